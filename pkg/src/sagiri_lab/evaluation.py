"""Full-reference metrics, directory benchmarking, and plug-and-play refinement.

External no-reference metrics are plug-ins: executables invoked as
``<plugin> <image-path>`` that print one number and exit 0.

Results CSV columns, in order: ``id``, ``psnr``, ``ssim``, ``l_cd_hard``,
one column per plug-in, then ``status``. The final row has ``id = mean``.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import shlex
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import ModelBundle
from .imaging import (ImageBuffer, ImagingError, detect_unknown_mask, load_image, load_mask,
                      save_image)
from .losses import EVAL_BINS, SsimConfig, color_distribution_loss, ssim_index
from .sagiri import refine_detailed

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
IMAGE_SUFFIXES = (".png", ".pfm")


@dataclass
class MetricsRecord:
    id: str
    psnr: float = math.nan
    ssim: float = math.nan
    l_cd_hard: float = math.nan
    external: dict[str, float] = field(default_factory=dict)
    status: str = "ok"


def _unit(img) -> np.ndarray:
    return img.to_unit_float() if isinstance(img, ImageBuffer) else np.asarray(img, dtype=np.float64)


def psnr(pred, target) -> float:
    """Peak signal-to-noise ratio in dB for unit-range images; identical inputs give ``PSNR_CAP``."""
    a, b = _unit(pred), _unit(target)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _tensor(img) -> torch.Tensor:
    return torch.from_numpy(_unit(img).transpose(2, 0, 1).copy())[None]


def full_reference(pred, target, ssim_cfg: SsimConfig = SsimConfig()) -> tuple[float, float, float]:
    """(psnr, ssim, hard L_cd) of one prediction against its reference."""
    p, t = _tensor(pred), _tensor(target)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {tuple(p.shape)} vs {tuple(t.shape)}")
    return (psnr(pred, target), float(ssim_index(p, t, ssim_cfg)),
            float(color_distribution_loss(p, t, EVAL_BINS, mode="hard")))


def run_plugin(cmd: str, image_path, timeout: float = 120.0) -> float:
    """Run one metric plug-in; raises RuntimeError on nonzero exit or unparsable output."""
    proc = subprocess.run([*shlex.split(cmd), str(image_path)], capture_output=True, text=True, timeout=timeout)
    if proc.returncode != 0:
        raise RuntimeError(f"plug-in {cmd!r} exited {proc.returncode}: {proc.stderr.strip()[:200]}")
    lines = [ln for ln in proc.stdout.splitlines() if ln.strip()]
    if len(lines) != 1:
        raise RuntimeError(f"plug-in {cmd!r} printed {len(lines)} lines, expected 1")
    return float(lines[0])


def _images(d: Path) -> list[Path]:
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and not p.name.endswith(".mask.png"))


def _plugin_name(cmd: str) -> str:
    return Path(shlex.split(cmd)[-1]).stem


def evaluate_directory(pred_dir, ref_dir=None, plugins: list[str] | tuple = (), csv_path=None,
                       ssim_cfg: SsimConfig = SsimConfig()) -> list[MetricsRecord]:
    """Score every image in ``pred_dir``; the returned list ends with the mean record.

    A missing reference or failed plug-in marks that item's status and leaves
    its value NaN; means are taken over the items that have a value.
    """
    pred_dir = Path(pred_dir)
    preds = _images(pred_dir) if pred_dir.is_dir() else []
    if not preds:
        raise FileNotFoundError(f"no images in {pred_dir}")
    names = [_plugin_name(c) for c in plugins]
    records = []
    for path in preds:
        rec = MetricsRecord(path.stem)
        notes = []
        try:
            pred = load_image(path)
        except ImagingError as exc:
            rec.status = f"unreadable: {exc}"
            records.append(rec)
            continue
        if ref_dir is not None:
            ref_path = Path(ref_dir) / path.name
            if ref_path.exists():
                try:
                    rec.psnr, rec.ssim, rec.l_cd_hard = full_reference(pred, load_image(ref_path), ssim_cfg)
                except (ValueError, ImagingError) as exc:
                    notes.append(f"reference error: {exc}")
            else:
                notes.append("missing reference")
        for cmd, name in zip(plugins, names):
            try:
                rec.external[name] = run_plugin(cmd, path)
            except (RuntimeError, ValueError, OSError, subprocess.TimeoutExpired) as exc:
                rec.external[name] = math.nan
                notes.append(f"{name} failed: {exc}")
        if notes:
            rec.status = "; ".join(notes)
        records.append(rec)
    records.append(mean_record(records, names))
    if csv_path is not None:
        write_metrics_csv(records, csv_path, names)
    return records


def _mean(values) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


def mean_record(records: list[MetricsRecord], plugin_names) -> MetricsRecord:
    return MetricsRecord(
        "mean",
        _mean(r.psnr for r in records),
        _mean(r.ssim for r in records),
        _mean(r.l_cd_hard for r in records),
        {n: _mean(r.external.get(n, math.nan) for r in records) for n in plugin_names},
        f"n={len(records)}",
    )


def write_metrics_csv(records: list[MetricsRecord], path, plugin_names) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "psnr", "ssim", "l_cd_hard", *plugin_names, "status"])
        for r in records:
            w.writerow([r.id, repr(r.psnr), repr(r.ssim), repr(r.l_cd_hard),
                        *(repr(r.external.get(n, math.nan)) for n in plugin_names), r.status])


# ------------------------------------------------------------ plug-and-play


@dataclass
class RefineOptions:
    n_steps: int = 30
    seed: int = 0
    convention: str = "shifted"
    guidance: float = 1.0
    saturation_mode: str = "all_channels"
    use_prompts: bool = True


def sidecar_paths(image_path: Path) -> tuple[Path, Path]:
    """``name.mask.png`` and ``name.txt`` next to ``name.<ext>``."""
    return image_path.with_name(image_path.stem + ".mask.png"), image_path.with_suffix(".txt")


def refine_directory(input_dir, bundle: ModelBundle, out_dir, options: RefineOptions = RefineOptions()
                     ) -> Path:
    """Refine every LDR image of ``input_dir`` into ``out_dir`` and write ``manifest.jsonl``.

    Item ``i`` (sorted by file name) uses seed ``options.seed ^ i``. A
    sidecar mask replaces auto-detection; a sidecar text file supplies the
    prompt. Unreadable inputs are logged and skipped.
    """
    input_dir, out_dir = Path(input_dir), Path(out_dir)
    paths = [p for p in _images(input_dir) if p.suffix.lower() == ".png"]
    if not paths:
        raise FileNotFoundError(f"no PNG images in {input_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, path in enumerate(paths):
        seed = options.seed ^ i
        try:
            img = load_image(path)
        except ImagingError as exc:
            log.warning("skipping %s: %s", path, exc)
            rows.append({"input": str(path), "status": f"skipped: {exc}"})
            continue
        mask_path, prompt_path = sidecar_paths(path)
        mask = load_mask(mask_path) if mask_path.exists() else None
        if mask is None:
            mask = detect_unknown_mask(img, options.saturation_mode)
        prompt = prompt_path.read_text().strip() if options.use_prompts and prompt_path.exists() else None
        result = refine_detailed(img, prompt, mask, bundle, n_steps=options.n_steps, seed=seed,
                                 convention=options.convention, guidance=options.guidance)
        out_path = out_dir / (path.stem + ".png")
        save_image(result.image, out_path)
        rows.append({"input": str(path), "output": str(out_path), "mask_coverage": mask.unknown_fraction,
                     "mask_source": "sidecar" if mask_path.exists() else "auto", "prompt": prompt,
                     "seed": seed, "status": "ok"})
    manifest = out_dir / "manifest.jsonl"
    manifest.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    return manifest


__all__ = ["PSNR_CAP", "MetricsRecord", "psnr", "full_reference", "run_plugin", "evaluate_directory",
           "mean_record", "write_metrics_csv", "RefineOptions", "sidecar_paths", "refine_directory"]
