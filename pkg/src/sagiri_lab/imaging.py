"""Image containers, LDR/HDR file I/O, exposure simulation and region masks.

LDR images travel as 8-bit PNG, HDR radiance as PFM (portable float map).
Masks use 1 for known pixels and 0 for pixels the refiner should generate.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

VALUE_RANGES = ("unit_float", "byte", "hdr_linear")
COLORSPACES = ("srgb", "linear")


class ImagingError(Exception):
    """Base class for image container and file errors."""


class UnsupportedFormatError(ImagingError):
    pass


class CorruptImageError(ImagingError):
    pass


class InvalidImageError(ImagingError, ValueError):
    """Pixel data violates the declared value range or shape."""


@dataclass
class ImageBuffer:
    """H x W x C raster with value-range metadata.

    ``byte`` images hold integers in ``[0, 2**bit_depth - 1]`` (8-bit unless
    produced by a wider quantizer), ``unit_float`` values lie in [0, 1] and
    ``hdr_linear`` values are nonnegative scene radiance.
    """

    pixels: np.ndarray
    value_range: str = "unit_float"
    colorspace: str = "srgb"
    bit_depth: int = 8

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        self.pixels = px
        self.validate()

    def validate(self) -> None:
        px = self.pixels
        if self.value_range not in VALUE_RANGES:
            raise InvalidImageError(f"unknown value range {self.value_range!r}")
        if self.colorspace not in COLORSPACES:
            raise InvalidImageError(f"unknown colorspace {self.colorspace!r}")
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise InvalidImageError(f"expected H x W x {{1,3}} pixels, got shape {px.shape}")
        if not np.all(np.isfinite(px)):
            raise InvalidImageError("pixels must be finite")
        if self.value_range == "byte":
            top = 2**self.bit_depth - 1
            if np.any(px < 0) or np.any(px > top) or np.any(np.floor(px) != px):
                raise InvalidImageError(f"byte image must hold integers in [0, {top}]")
        elif self.value_range == "unit_float":
            if px.size and (px.min() < 0 or px.max() > 1):
                raise InvalidImageError("unit_float image must lie in [0, 1]")
        elif px.size and px.min() < 0:
            raise InvalidImageError("hdr_linear image must be nonnegative")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.pixels.shape

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def to_unit_float(self) -> np.ndarray:
        """Pixels as float64 in [0, 1]; HDR values are clipped."""
        if self.value_range == "byte":
            return self.pixels.astype(np.float64) / (2**self.bit_depth - 1)
        return np.clip(self.pixels.astype(np.float64), 0.0, 1.0)

    def to_byte(self) -> "ImageBuffer":
        if self.value_range == "byte" and self.bit_depth == 8:
            return self
        u = self.to_unit_float()
        return ImageBuffer(np.floor(u * 255.0 + 0.5).astype(np.uint8), "byte", self.colorspace)

    @classmethod
    def from_unit(cls, pixels: np.ndarray, colorspace: str = "srgb") -> "ImageBuffer":
        return cls(np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0), "unit_float", colorspace)


@dataclass
class RegionMask:
    """Known (1) / unknown (0) map in pixel space, optionally projected to latent space.

    ``latent_mask`` has shape ``(ceil(H/scale), ceil(W/scale), channels)``.
    """

    pixel_mask: np.ndarray
    latent_mask: np.ndarray | None = None
    scale: int = 1

    def __post_init__(self):
        pm = np.asarray(self.pixel_mask)
        if pm.ndim != 2:
            raise InvalidImageError(f"pixel mask must be 2-D, got shape {pm.shape}")
        if not np.all((pm == 0) | (pm == 1)):
            raise InvalidImageError("pixel mask entries must be 0 or 1")
        self.pixel_mask = pm.astype(np.uint8)
        if self.latent_mask is not None:
            lm = np.asarray(self.latent_mask).astype(np.uint8)
            h, w = pm.shape
            expected = (math.ceil(h / self.scale), math.ceil(w / self.scale))
            if lm.ndim != 3 or lm.shape[:2] != expected:
                raise InvalidImageError(f"latent mask shape {lm.shape} does not match {expected}")
            if np.any(lm != lm[:, :, :1]):
                raise InvalidImageError("latent mask must be identical across channels")
            self.latent_mask = lm

    @property
    def unknown_fraction(self) -> float:
        return float(1.0 - self.pixel_mask.mean())


@dataclass(frozen=True)
class ExposureSpec:
    ev: float = 0.0
    gamma: float = 2.2
    quantize_bits: int = 8

    def __post_init__(self):
        if not 1 <= self.quantize_bits <= 16:
            raise ValueError("quantize_bits must lie in [1, 16]")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")


@dataclass(frozen=True)
class DegradationSpec:
    """Random-stroke degradation parameters, stated for a 256 px reference size.

    Pixel quantities are rescaled by ``min(H, W) / reference_size`` when applied.
    """

    n_lines: tuple[int, int] = (1, 8)
    thickness_px: tuple[int, int] = (5, 30)
    dilation_radius: int = 8
    mask_blur_sigma: float = 12.0
    content_blur_sigma: float = 10.0
    seed: int = 0
    reference_size: int = 256

    def __post_init__(self):
        for name in ("n_lines", "thickness_px"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0 or (name == "thickness_px" and lo < 1):
                raise ValueError(f"{name} range {lo, hi} is empty or invalid")
        if self.n_lines[1] < 1:
            raise ValueError("n_lines range must allow at least one line")
        if self.dilation_radius < 0:
            raise ValueError("dilation_radius must be nonnegative")
        if not (self.mask_blur_sigma > 0 and self.content_blur_sigma > 0):
            raise ValueError("blur sigmas must be positive")


# --------------------------------------------------------------------------- I/O


def _read_pfm(path: Path) -> ImageBuffer:
    data = path.read_bytes()
    # Three whitespace-terminated header tokens: kind, "W H", scale.
    m = re.match(rb"(P[Ff])\s+(\d+)\s+(\d+)\s+([-+0-9.eE]+)\s", data)
    if m is None:
        raise CorruptImageError(f"{path}: malformed PFM header")
    kind, width, height, scale = m.group(1), int(m.group(2)), int(m.group(3)), float(m.group(4))
    channels = 3 if kind == b"PF" else 1
    if scale == 0:
        raise CorruptImageError(f"{path}: PFM scale must be nonzero")
    dtype = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
    count = width * height * channels
    body = data[m.end():]
    if len(body) < count * 4:
        raise CorruptImageError(f"{path}: PFM payload truncated ({len(body)} of {count * 4} bytes)")
    arr = np.frombuffer(body, dtype=dtype, count=count).astype(np.float32)
    # PFM rows run bottom to top.
    arr = arr.reshape(height, width, channels)[::-1].copy()
    if not np.all(np.isfinite(arr)):
        raise CorruptImageError(f"{path}: PFM payload contains non-finite values")
    value_range = "hdr_linear" if arr.size == 0 or arr.min() >= 0 else None
    if value_range is None:
        raise CorruptImageError(f"{path}: negative radiance in PFM payload")
    return ImageBuffer(arr, "hdr_linear", "linear")


def _write_pfm(img: ImageBuffer, path: Path) -> None:
    px = np.asarray(img.pixels, dtype="<f4")
    h, w, c = px.shape
    header = f"{'PF' if c == 3 else 'Pf'}\n{w} {h}\n-1.0\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(px[::-1]).tobytes())


def load_image(path) -> ImageBuffer:
    """Read an 8-bit PNG (byte range) or a PFM file (hdr_linear range)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image: {path}")
    suffix = path.suffix.lower()
    if suffix == ".pfm":
        return _read_pfm(path)
    if suffix != ".png":
        raise UnsupportedFormatError(f"{path}: only .png and .pfm are supported")
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("RGB", "L"):
                arr = np.asarray(im)
            elif im.mode in ("RGBA", "P", "LA"):
                arr = np.asarray(im.convert("RGB"))
            else:
                raise UnsupportedFormatError(f"{path}: PNG mode {im.mode} is not 8-bit RGB/gray")
    except (OSError, SyntaxError) as exc:
        raise CorruptImageError(f"{path}: {exc}") from exc
    return ImageBuffer(arr.astype(np.uint8), "byte", "srgb")


def save_image(img: ImageBuffer, path) -> None:
    """Write ``img`` as PNG or PFM, chosen by the file suffix.

    Float images written to PNG are quantized to 8 bits; byte images written to
    PFM are stored as their integer values.
    """
    path = Path(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"parent directory does not exist: {path.parent}")
    img.validate()
    suffix = path.suffix.lower()
    if suffix == ".pfm":
        _write_pfm(img, path)
    elif suffix == ".png":
        if img.value_range == "hdr_linear":
            raise InvalidImageError("HDR images must be saved as PFM")
        byte = img.to_byte() if not (img.value_range == "byte" and img.bit_depth == 8) else img
        arr = byte.pixels.astype(np.uint8)
        Image.fromarray(arr[:, :, 0] if arr.shape[2] == 1 else arr).save(path)
    else:
        raise UnsupportedFormatError(f"{path}: only .png and .pfm are supported")


def load_mask(path) -> RegionMask:
    """Mask files are 8-bit PNGs; nonzero means known."""
    img = load_image(path)
    return RegionMask((img.pixels[:, :, 0] > 127).astype(np.uint8))


def save_mask(mask: RegionMask, path) -> None:
    save_image(ImageBuffer(mask.pixel_mask.astype(np.uint8) * 255, "byte"), path)


# ---------------------------------------------------------------------- exposure


def apply_exposure(hdr: ImageBuffer, spec: ExposureSpec) -> ImageBuffer:
    """Simulate an LDR capture: scale by 2**ev, clip, gamma-encode, quantize."""
    if hdr.value_range != "hdr_linear":
        raise InvalidImageError(f"apply_exposure expects hdr_linear input, got {hdr.value_range}")
    levels = 2**spec.quantize_bits - 1
    scaled = np.clip(hdr.pixels.astype(np.float64) * 2.0**spec.ev, 0.0, 1.0)
    encoded = scaled ** (1.0 / spec.gamma)
    out = np.floor(encoded * levels + 0.5)
    dtype = np.uint8 if spec.quantize_bits <= 8 else np.uint16
    return ImageBuffer(out.astype(dtype), "byte", "srgb", bit_depth=spec.quantize_bits)


# ------------------------------------------------------------------------- masks


def detect_unknown_mask(ldr: ImageBuffer, mode: str = "all_channels") -> RegionMask:
    """Mark clipped pixels (value 0 or full scale) as unknown.

    ``all_channels`` needs every channel clipped to the same extreme;
    ``any_channel`` flags a pixel when any channel touches 0 or full scale.
    """
    if ldr.value_range != "byte":
        raise InvalidImageError(f"detect_unknown_mask expects a byte image, got {ldr.value_range}")
    top = 2**ldr.bit_depth - 1
    px = ldr.pixels
    if mode == "all_channels":
        unknown = np.all(px == top, axis=2) | np.all(px == 0, axis=2)
    elif mode == "any_channel":
        unknown = np.any(px == top, axis=2) | np.any(px == 0, axis=2)
    else:
        raise ValueError(f"unknown saturation mode {mode!r}")
    return RegionMask((~unknown).astype(np.uint8))


def project_mask_to_latent(mask: RegionMask, scale: int, channels: int) -> RegionMask:
    """A latent cell is known only when its whole scale x scale footprint is known."""
    if scale < 1:
        raise ValueError("scale must be >= 1")
    pm = mask.pixel_mask
    h, w = pm.shape
    if h % scale or w % scale:
        raise InvalidImageError(f"mask size {h}x{w} is not divisible by {scale}; pad first")
    cells = pm.reshape(h // scale, scale, w // scale, scale).min(axis=(1, 3))
    latent = np.repeat(cells[:, :, None], channels, axis=2)
    return RegionMask(pm, latent, scale)


def pad_to_multiple(arr: np.ndarray, multiple: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Reflect-pad the two leading axes up to a multiple; returns the original size."""
    h, w = arr.shape[:2]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph == 0 and pw == 0:
        return arr, (h, w)
    pad = [(0, ph), (0, pw)] + [(0, 0)] * (arr.ndim - 2)
    # reflect needs the padded extent to be smaller than the axis; symmetric tiling covers the rest
    mode = "reflect" if ph < h and pw < w else "symmetric"
    return np.pad(arr, pad, mode=mode), (h, w)


# ------------------------------------------------------------------- degradation


def _stroke_mask(shape: tuple[int, int], rng: np.random.Generator, n_lines: int,
                 thickness: tuple[float, float]) -> np.ndarray:
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    strokes = np.zeros((h, w), dtype=bool)
    for _ in range(n_lines):
        p0 = rng.uniform([0, 0], [h, w])
        p1 = rng.uniform([0, 0], [h, w])
        width = rng.uniform(thickness[0], thickness[1])
        d = p1 - p0
        denom = max(float(d @ d), 1e-12)
        s = np.clip(((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / denom, 0.0, 1.0)
        dist2 = (yy - p0[0] - s * d[0]) ** 2 + (xx - p0[1] - s * d[1]) ** 2
        strokes |= dist2 <= (width / 2.0) ** 2
    return strokes


def degradation_weight(shape: tuple[int, int], spec: DegradationSpec) -> np.ndarray:
    """Soft blend weight in [0, 1] built from dilated, blurred random strokes."""
    h, w = shape
    k = min(h, w) / spec.reference_size
    rng = np.random.default_rng(spec.seed)
    n = int(rng.integers(spec.n_lines[0], spec.n_lines[1] + 1))
    thickness = (max(spec.thickness_px[0] * k, 1.0), max(spec.thickness_px[1] * k, 1.0))
    strokes = _stroke_mask((h, w), rng, n, thickness)
    radius = int(round(spec.dilation_radius * k))
    if radius > 0 and strokes.any():
        disk = np.hypot(*np.mgrid[-radius:radius + 1, -radius:radius + 1]) <= radius
        strokes = ndimage.binary_dilation(strokes, structure=disk)
    weight = ndimage.gaussian_filter(strokes.astype(np.float64), sigma=spec.mask_blur_sigma * k,
                                     mode="constant")
    # Strokes saturate to full blur at their core.
    peak = weight.max()
    if peak > 0:
        weight = np.clip(weight / peak, 0.0, 1.0)
    return weight


def generate_degradation(img: ImageBuffer, spec: DegradationSpec) -> tuple[ImageBuffer, RegionMask]:
    """Blend ``img`` with a heavily blurred copy of itself under a random stroke mask.

    Returns the degraded image and a RegionMask whose unknown (0) pixels are
    those with nonzero blend weight.
    """
    if img.value_range not in ("unit_float", "byte"):
        raise InvalidImageError("generate_degradation expects a unit_float or byte image")
    h, w, _ = img.shape
    weight = degradation_weight((h, w), spec)
    k = min(h, w) / spec.reference_size
    src = img.pixels.astype(np.float64)
    sigma = spec.content_blur_sigma * k
    blurred = ndimage.gaussian_filter(src, sigma=(sigma, sigma, 0), mode="reflect")
    wt = weight[:, :, None]
    out = np.where(wt > 0, wt * blurred + (1.0 - wt) * src, src)
    if img.value_range == "byte":
        top = 2**img.bit_depth - 1
        out = np.clip(np.floor(out + 0.5), 0, top).astype(img.pixels.dtype)
    else:
        out = np.clip(out, 0.0, 1.0)
    degraded = ImageBuffer(out, img.value_range, img.colorspace, img.bit_depth)
    return degraded, RegionMask((weight == 0).astype(np.uint8))


def batch_seed(seed: int, index: int) -> int:
    """Per-item seed for parallel batch synthesis."""
    return int(seed) ^ int(index)
