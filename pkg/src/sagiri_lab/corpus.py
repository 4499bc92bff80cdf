"""Procedural HDR scenes, their exposure variants, and corpus manifests.

Scenes are rendered as linear radiance (bright sky with a sun, textured
ground, dark occluders), then turned into a tone-mapped reference and an
over- or under-exposed capture. A manifest is a JSON-lines file with one
record per item: ``lq``, ``gt`` and optional ``prompt`` / ``mask`` paths,
relative to the manifest's directory.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imaging import ExposureSpec, ImageBuffer, apply_exposure, load_image, save_image

EYE_OVER = ExposureSpec(ev=3.0, gamma=2.2)
EYE_UNDER = ExposureSpec(ev=-3.0, gamma=2.2)
TRAIN_EVS = (-3.0, -2.0, 2.0, 3.0)

_PALETTE = {
    "red": (0.9, 0.15, 0.1), "orange": (0.95, 0.5, 0.1), "yellow": (0.9, 0.85, 0.2),
    "green": (0.2, 0.7, 0.25), "blue": (0.15, 0.3, 0.9), "purple": (0.55, 0.2, 0.7),
    "white": (0.9, 0.9, 0.9), "gray": (0.45, 0.45, 0.45),
}
_SKIES = {"clear": (0.35, 0.55, 1.0), "sunset": (1.0, 0.55, 0.3), "overcast": (0.8, 0.8, 0.85)}
_GROUNDS = {"grassy": (0.2, 0.5, 0.15), "sandy": (0.75, 0.6, 0.35), "rocky": (0.4, 0.38, 0.36)}


@dataclass
class ToyItem:
    name: str
    hdr: ImageBuffer
    gt: ImageBuffer
    lq: ImageBuffer
    prompt: str
    ev: float


def _value_noise(rng: np.random.Generator, size: int, octaves: int = 3) -> np.ndarray:
    out = np.zeros((size, size))
    amp, total = 1.0, 0.0
    for o in range(octaves):
        cells = 4 * 2**o
        grid = rng.random((cells + 1, cells + 1))
        out += amp * ndimage.zoom(grid, size / (cells + 1), order=1)[:size, :size]
        total += amp
        amp *= 0.5
    return out / total


def render_scene(rng: np.random.Generator, size: int = 64) -> tuple[np.ndarray, str]:
    """Linear-radiance H x W x 3 scene and a caption describing it."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    sky_name = list(_SKIES)[rng.integers(len(_SKIES))]
    ground_name = list(_GROUNDS)[rng.integers(len(_GROUNDS))]
    horizon = rng.uniform(0.4, 0.7)
    sky_level = rng.uniform(0.8, 3.0)

    sky = np.array(_SKIES[sky_name]) * sky_level
    grad = (1.0 - 0.5 * yy / horizon)[..., None]
    img = sky[None, None] * grad
    sun_y, sun_x = rng.uniform(0.05, horizon * 0.8), rng.uniform(0.1, 0.9)
    sun_r = rng.uniform(0.04, 0.12)
    sun = np.exp(-((yy - sun_y) ** 2 + (xx - sun_x) ** 2) / (2 * sun_r**2))
    img = img + (rng.uniform(4.0, 20.0) * sun)[..., None] * np.array([1.0, 0.95, 0.85])

    tex = _value_noise(rng, size)
    ground = np.array(_GROUNDS[ground_name]) * rng.uniform(0.05, 0.4)
    ground_img = ground[None, None] * (0.5 + tex[..., None])
    below = (yy > horizon)[..., None]
    img = np.where(below, ground_img, img)

    n_obj = int(rng.integers(1, 4))
    color_name = list(_PALETTE)[rng.integers(len(_PALETTE))]
    shape_name = ("circle", "block")[rng.integers(2)]
    color = np.array(_PALETTE[color_name]) * rng.uniform(0.02, 0.3)
    for _ in range(n_obj):
        cy, cx = rng.uniform(0.3, 0.95), rng.uniform(0.05, 0.95)
        r = rng.uniform(0.06, 0.18)
        if shape_name == "circle":
            inside = (yy - cy) ** 2 + (xx - cx) ** 2 < r**2
        else:
            inside = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r * 0.7)
        img = np.where(inside[..., None], color[None, None] * (0.8 + 0.4 * tex[..., None]), img)
    count = {1: "a", 2: "two", 3: "three"}[n_obj]
    noun = shape_name if n_obj == 1 else shape_name + "s"
    caption = f"{count} {color_name} {noun} on {ground_name} ground under a {sky_name} sky"
    return np.maximum(img, 0.0), caption


def tone_map(hdr: ImageBuffer, key: float = 0.6, gamma: float = 2.2) -> ImageBuffer:
    """Reference rendering: global Reinhard curve, gamma encoding, 8-bit quantization.

    The output is kept one code away from both clipping extremes.
    """
    x = hdr.pixels.astype(np.float64)
    lum = 0.2126 * x[..., 0] + 0.7152 * x[..., 1] + 0.0722 * x[..., 2]
    scale = key / np.exp(np.mean(np.log(lum + 1e-4)))
    y = x * scale
    y = y / (1.0 + y)
    enc = np.clip(y, 0, 1) ** (1.0 / gamma)
    return ImageBuffer(np.clip(np.floor(enc * 255 + 0.5), 1, 254).astype(np.uint8), "byte")


def make_toy_item(seed, size: int = 64, ev: float | None = None, name: str | None = None) -> ToyItem:
    """One scene; ``seed`` may be an int or a sequence of ints (corpus seed, item index)."""
    rng = np.random.default_rng(seed)
    radiance, caption = render_scene(rng, size)
    hdr = ImageBuffer(radiance.astype(np.float32), "hdr_linear", "linear")
    if ev is None:
        ev = float(rng.choice(TRAIN_EVS))
    # Exposure is relative to a mid-gray metering of the scene.
    meter = 0.18 / float(np.mean(radiance))
    lq = apply_exposure(ImageBuffer(radiance * meter, "hdr_linear", "linear"), ExposureSpec(ev=ev, gamma=2.2))
    return ToyItem(name or f"scene_{seed}", hdr, tone_map(hdr), lq, caption, ev)


def make_toy_corpus(n: int, seed: int = 0, size: int = 64, start: int = 0) -> list[ToyItem]:
    return [make_toy_item([seed, start + i], size, name=f"scene_{start + i:05d}") for i in range(n)]


def split_corpus(seed: int = 0, n_train: int = 128, n_val: int = 32, size: int = 64
                 ) -> tuple[list[ToyItem], list[ToyItem]]:
    items = make_toy_corpus(n_train + n_val, seed, size)
    return items[:n_train], items[n_train:]


def exposure_variants(hdr: ImageBuffer) -> dict[str, ImageBuffer]:
    """Over/under-exposed captures of one HDR scene, metered to mid-gray."""
    meter = 0.18 / max(float(np.mean(hdr.pixels)), 1e-8)
    metered = ImageBuffer(hdr.pixels * meter, "hdr_linear", "linear")
    return {"over": apply_exposure(metered, EYE_OVER), "under": apply_exposure(metered, EYE_UNDER)}


# ------------------------------------------------------------------ manifests


@dataclass
class ManifestRecord:
    lq: str
    gt: str | None = None
    prompt: str | None = None
    mask: str | None = None
    id: str | None = None

    def to_json(self) -> str:
        return json.dumps({k: v for k, v in self.__dict__.items() if v is not None}, sort_keys=True)


def write_manifest(records: list[ManifestRecord], path) -> None:
    Path(path).write_text("".join(r.to_json() + "\n" for r in records))


def read_manifest(path) -> list[ManifestRecord]:
    path = Path(path)
    out = []
    for line in path.read_text().splitlines():
        if line.strip():
            out.append(ManifestRecord(**json.loads(line)))
    if not out:
        raise ValueError(f"{path}: manifest is empty")
    return out


def write_corpus(items: list[ToyItem], root, split: str) -> Path:
    """Save items under ``root/<split>/`` and write ``root/<split>.jsonl``."""
    root = Path(root)
    d = root / split
    for sub in ("lq", "gt", "hdr", "over", "under", "captions"):
        (d / sub).mkdir(parents=True, exist_ok=True)
    records = []
    for it in items:
        save_image(it.lq, d / "lq" / f"{it.name}.png")
        save_image(it.gt, d / "gt" / f"{it.name}.png")
        save_image(it.hdr, d / "hdr" / f"{it.name}.pfm")
        for kind, img in exposure_variants(it.hdr).items():
            save_image(img, d / kind / f"{it.name}.png")
        (d / "captions" / f"{it.name}.txt").write_text(it.prompt + "\n")
        records.append(ManifestRecord(lq=f"{split}/lq/{it.name}.png", gt=f"{split}/gt/{it.name}.png",
                                      prompt=f"{split}/captions/{it.name}.txt", id=it.name))
    manifest = root / f"{split}.jsonl"
    write_manifest(records, manifest)
    return manifest


def load_pairs(manifest) -> list[tuple[ImageBuffer, ImageBuffer, str]]:
    """(lq, gt, prompt) triples from a manifest; prompt is "" when absent."""
    manifest = Path(manifest)
    base = manifest.parent
    out = []
    for r in read_manifest(manifest):
        lq = load_image(base / r.lq)
        gt = load_image(base / r.gt) if r.gt else None
        prompt = (base / r.prompt).read_text().strip() if r.prompt else ""
        out.append((lq, gt, prompt))
    return out
