"""Color- and content-reconstruction objectives and their differentiable parts.

All functions take ``(B, C, H, W)`` tensors with values in [0, 1]; a 3-D
``(C, H, W)`` tensor, an ``H x W x C`` ndarray or an ImageBuffer is also
accepted and treated as a batch of one.
"""
from __future__ import annotations

from dataclasses import astuple, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .imaging import ImageBuffer

TRAIN_BINS = 64
EVAL_BINS = 256


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 10.0  # color: MSE
    lambda2: float = 1.0   # color: histogram
    lambda3: float = 0.1   # color: frequency
    lambda4: float = 1.0   # content: MSE
    lambda5: float = 1.0   # content: 1 - SSIM
    lambda6: float = 0.01  # content: frequency

    def __post_init__(self):
        for v in astuple(self):
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weights must be finite and nonnegative, got {astuple(self)}")

    @classmethod
    def mse_only(cls) -> "LossWeights":
        return cls(lambda1=10.0, lambda2=0.0, lambda3=0.0)


@dataclass(frozen=True)
class Histogram:
    bins: torch.Tensor  # (B, C, N)
    n_bins: int
    mode: str
    range: tuple[float, float] = (0.0, 1.0)


@dataclass(frozen=True)
class SsimConfig:
    data_range: float = 1.0
    window: str = "global"  # or "gaussian"
    window_size: int = 11
    sigma: float = 1.5

    @property
    def c1(self) -> float:
        return (0.01 * self.data_range) ** 2

    @property
    def c2(self) -> float:
        return (0.03 * self.data_range) ** 2


def as_batch(x) -> torch.Tensor:
    if isinstance(x, ImageBuffer):
        x = x.to_unit_float()
    if isinstance(x, np.ndarray):
        if x.ndim == 2:
            x = x[:, :, None]
        x = torch.from_numpy(np.ascontiguousarray(x.transpose(2, 0, 1)))
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4:
        raise ValueError(f"expected a (B, C, H, W) tensor, got shape {tuple(x.shape)}")
    return x


def _pair(pred, target) -> tuple[torch.Tensor, torch.Tensor]:
    pred, target = as_batch(pred), as_batch(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if target.dtype != pred.dtype:
        target = target.to(pred.dtype)
    return pred, target


def soft_histogram(img, n_bins: int = TRAIN_BINS) -> Histogram:
    """Differentiable per-channel histogram with a triangular kernel.

    Bin centers sit at ``(i + 0.5) / N``. Each value splits unit mass between
    its two nearest centers; values outside the outermost centers go wholly
    to the edge bin.
    """
    if n_bins < 2:
        raise ValueError("histogram needs at least 2 bins")
    x = as_batch(img)
    b, c = x.shape[:2]
    u = (x.reshape(b, c, -1).clamp(0.0, 1.0) * n_bins - 0.5).clamp(0.0, n_bins - 1.0)
    # NaN inputs keep a valid index and propagate through ``frac`` instead.
    lo = u.detach().nan_to_num(0.0).floor().clamp(max=n_bins - 2)
    frac = u - lo
    lo = lo.long()
    bins = torch.zeros(b, c, n_bins, dtype=x.dtype, device=x.device)
    bins = bins.scatter_add(2, lo, 1.0 - frac).scatter_add(2, lo + 1, frac)
    return Histogram(bins, n_bins, "soft")


def hard_histogram(img, n_bins: int = EVAL_BINS) -> Histogram:
    """Per-channel counts over N equal bins on [0, 1]; 1.0 falls in the last bin."""
    if n_bins < 2:
        raise ValueError("histogram needs at least 2 bins")
    x = as_batch(img).detach()
    b, c = x.shape[:2]
    edges = torch.tensor([i / n_bins for i in range(1, n_bins)], dtype=x.dtype)
    idx = torch.bucketize(x.reshape(b, c, -1).contiguous(), edges, right=True)
    bins = torch.zeros(b, c, n_bins, dtype=x.dtype)
    bins.scatter_add_(2, idx, torch.ones_like(idx, dtype=x.dtype))
    return Histogram(bins, n_bins, "hard")


def color_distribution_loss(pred, target, n_bins: int = TRAIN_BINS, mode: str = "soft") -> torch.Tensor:
    """Sum over channels and bins of |H_pred - H_target|, histograms normalized by pixel count.

    Batched inputs return the batch mean.
    """
    pred, target = _pair(pred, target)
    hist = {"soft": soft_histogram, "hard": hard_histogram}[mode]
    npix = pred.shape[2] * pred.shape[3]
    hp = hist(pred, n_bins).bins / npix
    ht = hist(target, n_bins).bins / npix
    return (hp - ht).abs().sum(dim=(1, 2)).mean()


def frequency_preservation_loss(pred, target) -> torch.Tensor:
    """Mean magnitude of the difference of unnormalized 2-D DFTs, per channel."""
    pred, target = _pair(pred, target)
    diff = torch.fft.fft2(pred) - torch.fft.fft2(target)
    return diff.abs().mean()


def _gaussian_window(size: int, sigma: float, dtype) -> torch.Tensor:
    r = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(r**2) / (2 * sigma**2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim_index(x, y, cfg: SsimConfig = SsimConfig()) -> torch.Tensor:
    """Structural similarity; batch- and channel-averaged.

    ``global`` uses whole-image statistics per channel; ``gaussian`` averages
    the windowed SSIM map over valid window positions.
    """
    x, y = _pair(x, y)
    c1, c2 = cfg.c1, cfg.c2
    if cfg.window == "global":
        mx, my = x.mean(dim=(2, 3)), y.mean(dim=(2, 3))
        dx, dy = x - mx[..., None, None], y - my[..., None, None]
        vx, vy = (dx * dx).mean(dim=(2, 3)), (dy * dy).mean(dim=(2, 3))
        cxy = (dx * dy).mean(dim=(2, 3))
    elif cfg.window == "gaussian":
        size = min(cfg.window_size, x.shape[2], x.shape[3])
        win = _gaussian_window(size, cfg.sigma, x.dtype).to(x.device)
        ch = x.shape[1]
        k = win.expand(ch, 1, size, size)

        def filt(t):
            return F.conv2d(t, k, groups=ch)

        mx, my = filt(x), filt(y)
        vx = filt(x * x) - mx * mx
        vy = filt(y * y) - my * my
        cxy = filt(x * y) - mx * my
    else:
        raise ValueError(f"unknown SSIM window {cfg.window!r}")
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx**2 + my**2 + c1) * (vx + vy + c2)
    return (num / den).mean()


def mse_loss(pred, target) -> torch.Tensor:
    pred, target = _pair(pred, target)
    return ((pred - target) ** 2).mean()


def compose_color_loss(pred, target, w: LossWeights = LossWeights(), n_bins: int = TRAIN_BINS,
                       return_terms: bool = False):
    """Stage-1 objective: weighted MSE + soft histogram distance + frequency loss."""
    pred, target = _pair(pred, target)
    terms = {
        "mse": mse_loss(pred, target),
        "cd": color_distribution_loss(pred, target, n_bins, "soft"),
        "fdp": frequency_preservation_loss(pred, target),
    }
    total = w.lambda1 * terms["mse"] + w.lambda2 * terms["cd"] + w.lambda3 * terms["fdp"]
    return (total, terms) if return_terms else total


def compose_content_loss(pred, target, w: LossWeights = LossWeights(), cfg: SsimConfig = SsimConfig(),
                         return_terms: bool = False):
    """Stage-2 objective: weighted MSE + (1 - SSIM) + frequency loss."""
    pred, target = _pair(pred, target)
    terms = {
        "mse": mse_loss(pred, target),
        "ssim": 1.0 - ssim_index(pred, target, cfg),
        "fdp": frequency_preservation_loss(pred, target),
    }
    total = w.lambda4 * terms["mse"] + w.lambda5 * terms["ssim"] + w.lambda6 * terms["fdp"]
    return (total, terms) if return_terms else total
