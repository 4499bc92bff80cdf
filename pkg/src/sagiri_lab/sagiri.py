"""Stage-2 generative refiner.

A small VAE maps images to a 4-channel latent at 1/8 resolution. A
time- and prompt-conditioned U-Net predicts noise in that latent space. A
trainable copy of the U-Net encoder and middle block reads the noisy latent
concatenated with the condition latent; each of its outputs goes through a
zero-initialized 1x1 convolution and is concatenated into the matching
decoder level of the frozen U-Net.
"""
from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import ModelBundle
from .diffusion import NoiseSchedule, build_schedule, sample_loop
from .imaging import ImageBuffer, RegionMask, detect_unknown_mask, pad_to_multiple, project_mask_to_latent


@dataclass(frozen=True)
class VaeConfig:
    latent_channels: int = 4
    downsample_factor: int = 8
    base_width: int = 32
    kl_weight: float = 1e-6

    def __post_init__(self):
        if self.downsample_factor != 8:
            raise ValueError("the VAE is built for a fixed downsample factor of 8")

    @property
    def widths(self) -> list[int]:
        w = self.base_width
        return [max(w // 2, 8), w, 2 * w, 2 * w]


@dataclass(frozen=True)
class ControlUnetConfig:
    base_widths: tuple[int, ...] = (32, 64)
    time_embed_dim: int = 64
    prompt_embed_dim: int = 32
    vocab_size: int = 2048
    max_tokens: int = 16
    n_heads: int = 4
    latent_channels: int = 4
    cond_channels: int = 4

    def __post_init__(self):
        object.__setattr__(self, "base_widths", tuple(self.base_widths))
        for w in self.base_widths:
            if w % 8:
                raise ValueError("U-Net widths must be multiples of 8")

    @property
    def n_levels(self) -> int:
        return len(self.base_widths)


@dataclass
class PromptEmbedding:
    tokens: list[int]
    pooled: torch.Tensor


# ------------------------------------------------------------------------- VAE


class VAE(nn.Module):
    def __init__(self, cfg: VaeConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.widths
        enc = [nn.Conv2d(3, c[0], 3, padding=1), nn.SiLU()]
        for i in range(3):
            enc += [nn.Conv2d(c[i], c[i + 1], 3, stride=2, padding=1), nn.SiLU(),
                    nn.Conv2d(c[i + 1], c[i + 1], 3, padding=1), nn.SiLU()]
        enc.append(nn.Conv2d(c[3], 2 * cfg.latent_channels, 3, padding=1))
        self.encoder = nn.Sequential(*enc)
        # 1x1 entry keeps the decoder's reach at one latent cell (see latent_radius)
        dec = [nn.Conv2d(cfg.latent_channels, c[3], 1), nn.SiLU()]
        for i in range(3, 0, -1):
            dec += [nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(c[i], c[i - 1], 3, padding=1), nn.SiLU()]
        dec.append(nn.Conv2d(c[0], 3, 3, padding=1))
        self.decoder = nn.Sequential(*dec)

    def encode_stats(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mu, logvar = self.encoder(x * 2.0 - 1.0).chunk(2, dim=1)
        return mu, logvar.clamp(-30.0, 20.0)

    def encode(self, x: torch.Tensor, sample: bool = False, generator=None) -> torch.Tensor:
        mu, logvar = self.encode_stats(x)
        if not sample:
            return mu
        return mu + (0.5 * logvar).exp() * torch.randn(mu.shape, generator=generator, dtype=mu.dtype)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.decoder(z))

    @property
    def latent_radius(self) -> int:
        """Latent cells on each side that can influence one decoded pixel.

        Walks the decoder backwards: a k x k conv widens the reach by k // 2
        at its resolution, a x2 nearest upsample halves it (rounding up).
        """
        r = 0
        for layer in reversed(self.decoder):
            if isinstance(layer, nn.Conv2d):
                r += layer.kernel_size[0] // 2
            elif isinstance(layer, nn.Upsample):
                r = math.ceil(r / 2)
        return r


# --------------------------------------------------------------------- prompts


def tokenize(text: str, vocab_size: int, max_tokens: int) -> list[int]:
    """Lowercase whitespace tokens hashed into ``[1, vocab_size)``; 0 is the null token."""
    ids = []
    for tok in text.lower().split()[:max_tokens]:
        h = int.from_bytes(hashlib.blake2b(tok.encode("utf-8"), digest_size=8).digest(), "little")
        ids.append(1 + h % (vocab_size - 1))
    return ids


class PromptEncoder(nn.Module):
    def __init__(self, vocab_size: int, dim: int, max_tokens: int):
        super().__init__()
        self.vocab_size, self.max_tokens = vocab_size, max_tokens
        self.embed = nn.Embedding(vocab_size, dim)
        nn.init.normal_(self.embed.weight, std=0.5)

    def forward(self, prompts: list[str]) -> tuple[torch.Tensor, torch.Tensor]:
        """Token embeddings ``(B, L, D)`` and a key padding mask (True = pad)."""
        ids = [tokenize(p or "", self.vocab_size, self.max_tokens) or [0] for p in prompts]
        length = max(len(t) for t in ids)
        idx = torch.zeros(len(ids), length, dtype=torch.long)
        pad = torch.ones(len(ids), length, dtype=torch.bool)
        for i, t in enumerate(ids):
            idx[i, :len(t)] = torch.tensor(t)
            pad[i, :len(t)] = False
        return self.embed(idx), pad


def prompt_embed(text: str | None, encoder: PromptEncoder) -> PromptEmbedding:
    with torch.no_grad():
        ctx, pad = encoder([text or ""])
        keep = (~pad[0]).float()[:, None]
        pooled = (ctx[0] * keep).sum(0) / keep.sum()
    tokens = tokenize(text or "", encoder.vocab_size, encoder.max_tokens)
    return PromptEmbedding(tokens, pooled)


# ---------------------------------------------------------------------- U-Net


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=1)


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, ch), ch)


class ResBlock(nn.Module):
    """Residual block; ``extra`` channels bypass the input norm and enter the convolutions as they are."""

    def __init__(self, cin: int, cout: int, temb: int, extra: int = 0):
        super().__init__()
        self.extra = extra
        self.norm1, self.conv1 = _norm(cin), nn.Conv2d(cin + extra, cout, 3, padding=1)
        self.temb = nn.Linear(temb, cout)
        self.norm2, self.conv2 = _norm(cout), nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin + extra, cout, 1) if cin + extra != cout else nn.Identity()

    def forward(self, x, temb, extra=None):
        h = F.silu(self.norm1(x))
        if self.extra:
            h, x = torch.cat([h, extra], dim=1), torch.cat([x, extra], dim=1)
        h = self.conv1(h)
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttention(nn.Module):
    def __init__(self, ch: int, ctx_dim: int, n_heads: int):
        super().__init__()
        self.norm = _norm(ch)
        self.attn = nn.MultiheadAttention(ch, n_heads, kdim=ctx_dim, vdim=ctx_dim, batch_first=True)

    def forward(self, x, ctx, pad):
        b, c, h, w = x.shape
        q = self.norm(x).flatten(2).transpose(1, 2)
        out, _ = self.attn(q, ctx, ctx, key_padding_mask=pad, need_weights=False)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class UNetEncoder(nn.Module):
    """Input conv, one residual block per level (attention below the top level), middle block."""

    def __init__(self, cfg: ControlUnetConfig, in_channels: int):
        super().__init__()
        w = cfg.base_widths
        self.conv_in = nn.Conv2d(in_channels, w[0], 3, padding=1)
        self.blocks = nn.ModuleList()
        self.attns = nn.ModuleList()
        self.downs = nn.ModuleList()
        prev = w[0]
        for i, ch in enumerate(w):
            self.blocks.append(ResBlock(prev, ch, cfg.time_embed_dim))
            self.attns.append(CrossAttention(ch, cfg.prompt_embed_dim, cfg.n_heads) if i > 0 else nn.Identity())
            if i < len(w) - 1:
                self.downs.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
            prev = ch
        self.mid1 = ResBlock(prev, prev, cfg.time_embed_dim)
        self.mid_attn = CrossAttention(prev, cfg.prompt_embed_dim, cfg.n_heads)
        self.mid2 = ResBlock(prev, prev, cfg.time_embed_dim)

    def forward(self, x, temb, ctx, pad):
        h = self.conv_in(x)
        skips = []
        for i, blk in enumerate(self.blocks):
            h = blk(h, temb)
            if i > 0:
                h = self.attns[i](h, ctx, pad)
            skips.append(h)
            if i < len(self.downs):
                h = self.downs[i](h)
        h = self.mid2(self.mid_attn(self.mid1(h, temb), ctx, pad), temb)
        return skips, h


class UNetDecoder(nn.Module):
    """Decoder whose level inputs reserve channels for control features."""

    def __init__(self, cfg: ControlUnetConfig):
        super().__init__()
        w = cfg.base_widths
        self.blocks = nn.ModuleList()
        self.attns = nn.ModuleList()
        self.ups = nn.ModuleList()
        cur = w[-1]
        for i in reversed(range(len(w))):
            # control features skip the block's input norm so their scale, starting at zero, is kept
            n_ctrl = w[i] + (w[-1] if i == len(w) - 1 else 0)
            self.blocks.append(ResBlock(cur + w[i], w[i], cfg.time_embed_dim, extra=n_ctrl))
            self.attns.append(CrossAttention(w[i], cfg.prompt_embed_dim, cfg.n_heads) if i > 0 else nn.Identity())
            self.ups.append(nn.Conv2d(w[i], w[i - 1], 3, padding=1) if i > 0 else nn.Identity())
            cur = w[i - 1] if i > 0 else w[0]
        self.norm_out = _norm(w[0])
        self.conv_out = nn.Conv2d(w[0], cfg.latent_channels, 3, padding=1)

    def forward(self, mid, skips, ctrl, ctrl_mid, temb, ctx, pad):
        n = len(skips)
        h = mid
        for j, blk in enumerate(self.blocks):
            i = n - 1 - j
            c = torch.cat([ctrl[i], ctrl_mid], dim=1) if i == n - 1 else ctrl[i]
            h = blk(torch.cat([h, skips[i]], dim=1), temb, c)
            if i > 0:
                h = self.attns[j](h, ctx, pad)
                h = self.ups[j](F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.conv_out(F.silu(self.norm_out(h)))


class SagiriNet(nn.Module):
    def __init__(self, cfg: ControlUnetConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.time_embed_dim
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.encoder = UNetEncoder(cfg, cfg.latent_channels)
        self.decoder = UNetDecoder(cfg)
        self.control = UNetEncoder(cfg, cfg.latent_channels + cfg.cond_channels)
        widths = list(cfg.base_widths) + [cfg.base_widths[-1]]
        self.fusion = nn.ModuleList(nn.Conv2d(ch, ch, 1) for ch in widths)
        self.init_control_from_base()

    def init_control_from_base(self) -> None:
        """Copy base encoder weights into the control branch; zero every new parameter."""
        state = copy.deepcopy(self.encoder.state_dict())
        w_in = state["conv_in.weight"]
        extra = torch.zeros(w_in.shape[0], self.cfg.cond_channels, *w_in.shape[2:], dtype=w_in.dtype)
        state["conv_in.weight"] = torch.cat([w_in, extra], dim=1)
        self.control.load_state_dict(state)
        for conv in self.fusion:
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)

    def base_modules(self) -> list[nn.Module]:
        return [self.time_mlp, self.encoder, self.decoder]

    def control_modules(self) -> list[nn.Module]:
        return [self.control, self.fusion]

    def forward(self, x, t, ctx, pad, cond=None, levels=None):
        """Predict noise. ``cond=None`` runs the base U-Net alone.

        ``levels`` optionally selects which control outputs are fused
        (indices into the encoder levels, with ``n_levels`` meaning the
        middle block).
        """
        temb = self.time_mlp(timestep_embedding(t, self.cfg.time_embed_dim))
        skips, mid = self.encoder(x, temb, ctx, pad)
        if cond is None:
            ctrl = [torch.zeros_like(s) for s in skips]
            ctrl_mid = torch.zeros_like(mid)
        else:
            cskips, cmid = self.control(torch.cat([x, cond], dim=1), temb, ctx, pad)
            feats = [f(s) for f, s in zip(self.fusion, cskips + [cmid])]
            if levels is not None:
                feats = [f if i in levels else torch.zeros_like(f) for i, f in enumerate(feats)]
            ctrl, ctrl_mid = feats[:-1], feats[-1]
        return self.decoder(mid, skips, ctrl, ctrl_mid, temb, ctx, pad)


def set_trainable(bundle: ModelBundle, phase: str) -> None:
    """``base``: U-Net and prompt table train; ``control``: only control branch and fusion convs."""
    net, text, vae = bundle.modules["net"], bundle.modules["text"], bundle.modules["vae"]
    for p in vae.parameters():
        p.requires_grad_(False)
    base_on = phase == "base"
    for m in net.base_modules() + [text]:
        for p in m.parameters():
            p.requires_grad_(base_on)
    for m in net.control_modules():
        for p in m.parameters():
            p.requires_grad_(not base_on)


# --------------------------------------------------------------------- bundles


def bundle_from_config(config: dict, seed: int) -> ModelBundle:
    vcfg = VaeConfig(**config["vae"])
    ucfg = ControlUnetConfig(**config["unet"])
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        vae = VAE(vcfg)
        text = PromptEncoder(ucfg.vocab_size, ucfg.prompt_embed_dim, ucfg.max_tokens)
        net = SagiriNet(ucfg)
    bundle = ModelBundle("sagiri", config, seed, {"vae": vae, "text": text, "net": net},
                         extras={"latent_scale": 1.0, "phase": "fresh"})
    set_trainable(bundle, "control")
    return bundle


def build_sagiri(cfg: ControlUnetConfig = ControlUnetConfig(), base: ModelBundle | None = None,
                 seed: int = 0, vae_cfg: VaeConfig = VaeConfig(), schedule: dict | None = None) -> ModelBundle:
    """Fresh refiner, or one whose VAE, prompt table and base U-Net come from ``base``.

    The control branch is always re-derived from the base encoder.
    """
    if base is not None:
        config = copy.deepcopy(base.config)
        if config["unet"]["base_widths"] != list(cfg.base_widths) and \
                tuple(config["unet"]["base_widths"]) != cfg.base_widths:
            raise ValueError("control levels must mirror the base U-Net levels")
        bundle = bundle_from_config(config, seed)
        src = base.modules
        bundle.modules["vae"].load_state_dict(src["vae"].state_dict())
        bundle.modules["text"].load_state_dict(src["text"].state_dict())
        net = bundle.modules["net"]
        for name in ("time_mlp", "encoder", "decoder"):
            getattr(net, name).load_state_dict(getattr(src["net"], name).state_dict())
        net.init_control_from_base()
        bundle.extras = dict(base.extras)
        set_trainable(bundle, "control")
        return bundle
    config = {
        "vae": asdict(vae_cfg),
        "unet": {**asdict(cfg), "base_widths": list(cfg.base_widths)},
        "schedule": schedule or {"T": 1000, "beta_start": 1e-4, "beta_end": 0.02},
    }
    return bundle_from_config(config, seed)


def bundle_schedule(bundle: ModelBundle) -> NoiseSchedule:
    s = bundle.config.get("schedule", {})
    return build_schedule(s.get("T", 1000), "linear", s.get("beta_start", 1e-4), s.get("beta_end", 0.02))


def pad_multiple(bundle: ModelBundle) -> int:
    n_levels = len(bundle.config["unet"]["base_widths"])
    return bundle.config["vae"]["downsample_factor"] * 2 ** (n_levels - 1)


def _image_tensor(img: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).float().unsqueeze(0)


def vae_encode(img, bundle: ModelBundle, sample: bool = False, generator=None) -> torch.Tensor:
    """Scaled latent of a unit-float image (ImageBuffer or ``(B, 3, H, W)`` tensor)."""
    vae = bundle.modules["vae"]
    x = img if isinstance(img, torch.Tensor) else _image_tensor(img.to_unit_float())
    f = vae.cfg.downsample_factor
    if x.shape[-1] % f or x.shape[-2] % f:
        raise ValueError(f"image size {tuple(x.shape[-2:])} is not a multiple of {f}; pad first")
    with torch.no_grad():
        z = vae.encode(x.float(), sample=sample, generator=generator)
    return z * bundle.extras.get("latent_scale", 1.0)


def vae_decode(z: torch.Tensor, bundle: ModelBundle) -> torch.Tensor:
    with torch.no_grad():
        return bundle.modules["vae"].decode(z / bundle.extras.get("latent_scale", 1.0))


def vae_roundtrip(img: ImageBuffer, bundle: ModelBundle) -> ImageBuffer:
    arr, (h, w) = pad_to_multiple(img.to_unit_float(), pad_multiple(bundle))
    out = vae_decode(vae_encode(_image_tensor(arr), bundle), bundle)
    return ImageBuffer.from_unit(out[0, :, :h, :w].permute(1, 2, 0).double().numpy())


def make_denoiser(bundle: ModelBundle, prompts: list[str], cond: torch.Tensor | None,
                  guidance: float = 1.0):
    """Closure ``(x_t, t, _) -> eps_hat`` for :func:`sample_loop`."""
    net, text = bundle.modules["net"], bundle.modules["text"]
    net.eval()
    with torch.no_grad():
        ctx, pad = text(prompts)
        if guidance != 1.0:
            uctx, upad = text([""] * len(prompts))

    def eps(x, t, _condition):
        out = net(x, t, ctx, pad, cond=cond)
        if guidance != 1.0:
            un = net(x, t, uctx, upad, cond=cond)
            out = un + guidance * (out - un)
        return out

    return eps


def influence_region(latent_known: np.ndarray, radius: int, scale: int) -> np.ndarray:
    """Pixels whose decoded value depends only on known latent cells (1 = safe)."""
    unknown = latent_known == 0
    if radius > 0 and unknown.any():
        from scipy import ndimage

        unknown = ndimage.binary_dilation(unknown, structure=np.ones((3, 3), bool), iterations=radius)
    safe = (~unknown).astype(np.uint8)
    return np.kron(safe, np.ones((scale, scale), dtype=np.uint8))


@dataclass
class RefineResult:
    image: ImageBuffer
    mask: RegionMask
    roundtrip: ImageBuffer | None = None
    extras: dict = field(default_factory=dict)


def refine_detailed(stage1_img: ImageBuffer, prompt: str | None, mask_override: RegionMask | None,
                    bundle: ModelBundle, sched: NoiseSchedule | None = None, n_steps: int = 30, seed: int = 0,
                    convention: str = "shifted", guidance: float = 1.0,
                    saturation_mode: str = "all_channels") -> RefineResult:
    if bundle.kind != "sagiri":
        raise ValueError(f"refine needs a sagiri bundle, got {bundle.kind}")
    sched = sched or bundle_schedule(bundle)
    h, w = stage1_img.height, stage1_img.width
    if mask_override is not None:
        if mask_override.pixel_mask.shape != (h, w):
            raise ValueError(f"mask shape {mask_override.pixel_mask.shape} does not match image {(h, w)}")
        mask = RegionMask(mask_override.pixel_mask)
    else:
        mask = detect_unknown_mask(stage1_img.to_byte(), saturation_mode)
    m = pad_multiple(bundle)
    arr, _ = pad_to_multiple(stage1_img.to_unit_float(), m)
    pmask, _ = pad_to_multiple(mask.pixel_mask, m)
    f = bundle.config["vae"]["downsample_factor"]
    c = bundle.config["vae"]["latent_channels"]
    projected = project_mask_to_latent(RegionMask(pmask), f, c)
    z_cond = vae_encode(_image_tensor(arr), bundle)
    latent_mask = torch.from_numpy(projected.latent_mask.transpose(2, 0, 1).copy()).float().unsqueeze(0)
    denoiser = make_denoiser(bundle, [prompt or ""], z_cond, guidance)
    z0 = sample_loop(denoiser, None, z_cond, latent_mask, sched, n_steps, seed, convention=convention)
    out = vae_decode(z0, bundle)[0, :, :h, :w].permute(1, 2, 0).double().numpy()
    return RefineResult(ImageBuffer.from_unit(out), projected,
                        extras={"padded_shape": arr.shape[:2], "latent_radius": bundle.modules["vae"].latent_radius})


def refine(stage1_img: ImageBuffer, prompt: str | None, mask_override: RegionMask | None,
           bundle: ModelBundle, sched: NoiseSchedule | None = None, n_steps: int = 30, seed: int = 0,
           **kwargs) -> ImageBuffer:
    """Regenerate the unknown regions of a stage-1 result.

    Without ``mask_override`` the mask comes from clipped pixels of
    ``stage1_img``. Known latent cells are pinned to the encoding of the
    input at every step, so an all-known mask reproduces the VAE round trip.
    """
    return refine_detailed(stage1_img, prompt, mask_override, bundle, sched, n_steps, seed, **kwargs).image
