"""Stage-1 color and brightness restorer operating at 8x reduced resolution.

The input is folded into channels with a pixel unshuffle, passed through
shifted-window self-attention blocks, and brought back to full resolution by
three nearest-neighbour x2 upsampling stages.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import ModelBundle
from .imaging import ImageBuffer, pad_to_multiple


@dataclass(frozen=True)
class RestorerConfig:
    unshuffle_scale: int = 8
    embed_dim: int = 96
    n_blocks: int = 4
    depth: int = 2  # transformer layers per residual block
    window_size: int = 4
    n_heads: int = 4
    mlp_ratio: float = 2.0
    upsample_stages: int = 3
    in_channels: int = 3

    def __post_init__(self):
        if 2**self.upsample_stages != self.unshuffle_scale:
            raise ValueError(
                f"{self.upsample_stages} x2 stages cannot undo an unshuffle by {self.unshuffle_scale}")
        if self.embed_dim % self.n_heads:
            raise ValueError("embed_dim must be divisible by n_heads")

    @property
    def pad_multiple(self) -> int:
        return self.unshuffle_scale * self.window_size


def pixel_unshuffle(x: torch.Tensor, s: int) -> torch.Tensor:
    """Space-to-depth on ``(B, C, H, W)``; output channel ``c*s*s + i*s + j``."""
    b, c, h, w = x.shape
    if h % s or w % s:
        raise ValueError(f"spatial size {h}x{w} is not divisible by {s}")
    x = x.reshape(b, c, h // s, s, w // s, s)
    return x.permute(0, 1, 3, 5, 2, 4).reshape(b, c * s * s, h // s, w // s)


def pixel_shuffle(x: torch.Tensor, s: int) -> torch.Tensor:
    b, cs, h, w = x.shape
    if cs % (s * s):
        raise ValueError(f"{cs} channels cannot be shuffled by {s}")
    c = cs // (s * s)
    x = x.reshape(b, c, s, s, h, w)
    return x.permute(0, 1, 4, 2, 5, 3).reshape(b, c, h * s, w * s)


def rgb_to_ycbcr(x: torch.Tensor) -> torch.Tensor:
    r, g, b = x[:, 0:1], x[:, 1:2], x[:, 2:3]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = 0.5 + (b - y) * 0.564
    cr = 0.5 + (r - y) * 0.713
    return torch.cat([y, cb, cr], dim=1)


def window_partition(x: torch.Tensor, ws: int) -> torch.Tensor:
    b, h, w, c = x.shape
    x = x.reshape(b, h // ws, ws, w // ws, ws, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, ws * ws, c)


def window_reverse(windows: torch.Tensor, ws: int, h: int, w: int) -> torch.Tensor:
    b = windows.shape[0] // ((h // ws) * (w // ws))
    x = windows.reshape(b, h // ws, w // ws, ws, ws, -1)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, -1)


class WindowAttention(nn.Module):
    def __init__(self, dim: int, window_size: int, n_heads: int):
        super().__init__()
        self.ws = window_size
        self.n_heads = n_heads
        self.scale = (dim // n_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.rel_bias = nn.Parameter(torch.zeros((2 * window_size - 1) ** 2, n_heads))
        nn.init.trunc_normal_(self.rel_bias, std=0.02)

        coords = torch.stack(torch.meshgrid(torch.arange(window_size), torch.arange(window_size),
                                            indexing="ij")).flatten(1)
        rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0) + (window_size - 1)
        self.register_buffer("rel_index", rel[..., 0] * (2 * window_size - 1) + rel[..., 1],
                             persistent=False)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        bw, n, c = x.shape
        qkv = self.qkv(x).reshape(bw, n, 3, self.n_heads, c // self.n_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.rel_bias[self.rel_index.reshape(-1)].reshape(n, n, -1).permute(2, 0, 1)
        attn = attn + bias.unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.reshape(bw // nw, nw, self.n_heads, n, n) + mask[None, :, None]
            attn = attn.reshape(bw, self.n_heads, n, n)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(bw, n, c)
        return self.proj(out)


class SwinLayer(nn.Module):
    """Pre-norm (shifted) window attention followed by an MLP."""

    def __init__(self, dim: int, window_size: int, n_heads: int, shift: int, mlp_ratio: float):
        super().__init__()
        self.ws, self.shift = window_size, shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, window_size, n_heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def _shift_mask(self, h: int, w: int, device) -> torch.Tensor | None:
        if self.shift == 0:
            return None
        img = torch.zeros(1, h, w, 1, device=device)
        cnt = 0
        for hs in (slice(0, -self.ws), slice(-self.ws, -self.shift), slice(-self.shift, None)):
            for wsl in (slice(0, -self.ws), slice(-self.ws, -self.shift), slice(-self.shift, None)):
                img[:, hs, wsl, :] = cnt
                cnt += 1
        win = window_partition(img, self.ws).squeeze(-1)
        mask = win[:, None, :] - win[:, :, None]
        return mask.masked_fill(mask != 0, -100.0).masked_fill(mask == 0, 0.0)

    def forward(self, x: torch.Tensor, h: int, w: int) -> torch.Tensor:
        b, n, c = x.shape
        shortcut = x
        x = self.norm1(x).reshape(b, h, w, c)
        shift = self.shift if min(h, w) > self.ws else 0
        if shift:
            x = torch.roll(x, shifts=(-shift, -shift), dims=(1, 2))
        windows = self.attn(window_partition(x, self.ws), self._shift_mask(h, w, x.device) if shift else None)
        x = window_reverse(windows, self.ws, h, w)
        if shift:
            x = torch.roll(x, shifts=(shift, shift), dims=(1, 2))
        x = shortcut + x.reshape(b, n, c)
        return x + self.mlp(self.norm2(x))


class ResidualSwinBlock(nn.Module):
    def __init__(self, dim: int, depth: int, window_size: int, n_heads: int, mlp_ratio: float):
        super().__init__()
        self.layers = nn.ModuleList(
            SwinLayer(dim, window_size, n_heads, 0 if i % 2 == 0 else window_size // 2, mlp_ratio)
            for i in range(depth))
        self.conv = nn.Conv2d(dim, dim, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        t = x.flatten(2).transpose(1, 2)
        for layer in self.layers:
            t = layer(t, h, w)
        return x + self.conv(t.transpose(1, 2).reshape(b, c, h, w))


class LatentSwinIR(nn.Module):
    def __init__(self, cfg: RestorerConfig):
        super().__init__()
        self.cfg = cfg
        s, d = cfg.unshuffle_scale, cfg.embed_dim
        folded = cfg.in_channels * s * s
        self.shallow = nn.Conv2d(folded, d, 3, padding=1)
        self.color = nn.Conv2d(folded, d, 3, padding=1)
        self.blocks = nn.ModuleList(
            ResidualSwinBlock(d, cfg.depth, cfg.window_size, cfg.n_heads, cfg.mlp_ratio)
            for _ in range(cfg.n_blocks))
        self.norm = nn.LayerNorm(d)
        self.body_conv = nn.Conv2d(d, d, 3, padding=1)
        ups, ch = [], d
        for _ in range(cfg.upsample_stages):
            nxt = max(ch // 2, 16)
            ups.append(nn.Conv2d(ch, nxt, 3, padding=1))
            ch = nxt
        self.ups = nn.ModuleList(ups)
        self.head = nn.Conv2d(ch, cfg.in_channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        s = self.cfg.unshuffle_scale
        feat = self.shallow(pixel_unshuffle(x, s)) + self.color(pixel_unshuffle(rgb_to_ycbcr(x), s))
        body = feat
        for blk in self.blocks:
            body = blk(body)
        body = self.norm(body.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)
        h = feat + self.body_conv(body)
        for conv in self.ups:
            h = F.leaky_relu(conv(F.interpolate(h, scale_factor=2, mode="nearest")), 0.2)
        return self.head(h)


def build_restorer(cfg: RestorerConfig = RestorerConfig(), seed: int = 0) -> ModelBundle:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = LatentSwinIR(cfg)
    return ModelBundle("restorer", asdict(cfg), seed, {"net": net})


def restore_tensor(bundle: ModelBundle, x: torch.Tensor) -> torch.Tensor:
    """Eval-mode forward on a ``(B, 3, H, W)`` batch with padding and clamping."""
    net = bundle.modules["net"]
    cfg = net.cfg
    h, w = x.shape[-2:]
    m = cfg.pad_multiple
    ph, pw = (-h) % m, (-w) % m
    if ph or pw:
        mode = "reflect" if ph < h and pw < w else "replicate"
        x = F.pad(x, (0, pw, 0, ph), mode=mode)
    was_training = net.training
    net.eval()
    with torch.no_grad():
        y = net(x.float())
    net.train(was_training)
    return y[..., :h, :w].clamp(0.0, 1.0)


def restore(bundle: ModelBundle, ldr: ImageBuffer) -> ImageBuffer:
    if ldr.channels != 3:
        raise ValueError("restorer expects an RGB image")
    arr, (h, w) = pad_to_multiple(ldr.to_unit_float(), bundle.modules["net"].cfg.pad_multiple)
    x = torch.from_numpy(arr.transpose(2, 0, 1).copy()).float().unsqueeze(0)
    y = restore_tensor(bundle, x)[0, :, :h, :w]
    return ImageBuffer.from_unit(y.permute(1, 2, 0).double().numpy())
