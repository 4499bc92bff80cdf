"""Command-line entry point: ``sagiri-lab <subcommand> [options]``.

Settings come from an INI file (``--config``), then ``--set section.key=value``
overrides, then the dedicated flags. Every run writes the fully resolved
settings to ``<out>/resolved_config.ini``; feeding that file back through
``--config`` replays the run.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import configparser
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

from .checkpoint import CheckpointError, load_bundle, save_bundle
from .corpus import load_pairs, split_corpus, write_corpus
from .imaging import (DegradationSpec, ImagingError, detect_unknown_mask, load_image, load_mask, save_image,
                      save_mask)
from .losses import LossWeights
from .restorer import RestorerConfig, restore
from .sagiri import ControlUnetConfig, VaeConfig, build_sagiri, refine
from .training import (TrainConfig, TrainingError, finetune_data, finetune_sagiri, pretrain_sagiri,
                       restore_all, train_base_denoiser, train_restorer, train_vae)

log = logging.getLogger("sagiri_lab")

COMMANDS = ("synth-data", "train-restorer", "train-vae", "pretrain-sagiri", "finetune-sagiri", "enhance",
            "refine", "make-masks", "eval")


def cache_root() -> Path:
    return Path(os.environ.get("SAGIRI_LAB_CACHE", Path.home() / ".cache" / "sagiri_lab"))


# --------------------------------------------------------------------- config

_TRAIN_KEYS = ("batch_size", "lr", "steps", "crop_size", "grad_clip", "log_every", "checkpoint_every",
               "prompt_source", "content_weight", "content_t_max", "known_loss_weight", "prompt_dropout")


def default_settings() -> dict[str, dict]:
    train = {k: v for k, v in asdict(TrainConfig()).items() if k in _TRAIN_KEYS}
    train["checkpoint_every"] = 500
    train["prompt_source"] = "gt_captions"
    deg = asdict(DegradationSpec())
    deg.pop("seed")
    unet = asdict(ControlUnetConfig())
    unet["base_widths"] = list(unet["base_widths"])
    return {
        "run": {"seed": 0},
        "data": {"n_train": 128, "n_val": 32, "size": 64},
        "train": train,
        "loss": asdict(LossWeights()),
        "restorer": asdict(RestorerConfig()),
        "vae": {**asdict(VaeConfig()), "steps": 1000, "lr": 1e-3},
        "base": {"steps": 1500, "lr": 1e-3},
        "unet": unet,
        "schedule": {"T": 1000, "beta_start": 1e-4, "beta_end": 0.02},
        "degradation": deg,
        "sample": {"n_steps": 30, "convention": "shifted", "guidance": 1.0, "saturation_mode": "all_channels"},
    }


def _format(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(raw: str, like):
    if isinstance(like, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    if isinstance(like, (list, tuple)):
        return type(like)(int(x) for x in raw.split(","))
    return raw


def _merge(settings: dict, section: str, key: str, raw: str) -> None:
    if section not in settings or key not in settings[section]:
        raise KeyError(f"unknown setting {section}.{key}")
    settings[section][key] = _coerce(raw, settings[section][key])


def _ini() -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys such as ``T`` are case-sensitive
    return parser


def resolve_settings(config_path: str | None, overrides: list[str]) -> dict[str, dict]:
    settings = default_settings()
    if config_path:
        parser = _ini()
        if not parser.read(config_path):
            raise FileNotFoundError(f"config file not found: {config_path}")
        for section in parser.sections():
            if section == "command":
                continue
            for key, raw in parser.items(section):
                _merge(settings, section, key, raw)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise KeyError(f"override must look like section.key=value, got {item!r}")
        lhs, raw = item.split("=", 1)
        section, key = lhs.split(".", 1)
        _merge(settings, section, key, raw)
    return settings


def write_settings(settings: dict, argv: list[str], path: Path) -> None:
    parser = _ini()
    parser["command"] = {"argv": " ".join(argv)}
    for section, values in settings.items():
        parser[section] = {k: _format(v) for k, v in values.items()}
    with open(path, "w") as fh:
        parser.write(fh)


def _train_config(s: dict, out: Path, **extra) -> TrainConfig:
    return TrainConfig(seed=s["run"]["seed"], loss_weights=LossWeights(**s["loss"]), out_dir=str(out),
                       **{**s["train"], **extra})


def _sample_kwargs(s: dict) -> dict:
    return {"convention": s["sample"]["convention"], "guidance": s["sample"]["guidance"],
            "saturation_mode": s["sample"]["saturation_mode"]}


def _default_ckpt(path: str | None, name: str) -> Path:
    return Path(path) if path else cache_root() / name


# ------------------------------------------------------------------ commands


def cmd_synth_data(args, s, out: Path) -> None:
    train, val = split_corpus(s["run"]["seed"], s["data"]["n_train"], s["data"]["n_val"], s["data"]["size"])
    write_corpus(train, out, "train")
    write_corpus(val, out, "val")
    print(f"wrote {len(train)} train and {len(val)} val items to {out}")


def _gt_prompts(triples, source: str) -> list[str]:
    return [p for _, _, p in triples] if source != "none" else [""] * len(triples)


def cmd_train_restorer(args, s, out: Path) -> None:
    triples = load_pairs(args.data)
    bundle, opt_state = load_bundle(args.resume, "restorer") if args.resume else (None, None)
    cfg = _train_config(s, out)
    res = train_restorer([(lq, gt) for lq, gt, _ in triples], cfg, bundle, opt_state,
                         RestorerConfig(**s["restorer"]))
    path = out / "restorer.npz"
    save_bundle(res.bundle, path, res.optimizer)
    print(f"restorer checkpoint: {path}")


def cmd_train_vae(args, s, out: Path) -> None:
    """Train the VAE, then warm up the base U-Net that the control branch will steer."""
    triples = load_pairs(args.data)
    gts = [gt for _, gt, _ in triples]
    vae_s = dict(s["vae"])
    steps, lr = vae_s.pop("steps"), vae_s.pop("lr")
    unet = dict(s["unet"])
    bundle = build_sagiri(ControlUnetConfig(**unet), seed=s["run"]["seed"], vae_cfg=VaeConfig(**vae_s),
                          schedule=dict(s["schedule"]))
    train_vae(gts, _train_config(s, out, steps=steps, lr=lr), bundle)
    prompts = _gt_prompts(triples, s["train"]["prompt_source"])
    train_base_denoiser(gts, prompts, _train_config(s, out, steps=s["base"]["steps"], lr=s["base"]["lr"]),
                        bundle)
    path = out / "sagiri_base.npz"
    save_bundle(bundle, path)
    print(f"VAE + base checkpoint: {path}")


def cmd_pretrain_sagiri(args, s, out: Path) -> None:
    triples = load_pairs(args.data)
    bundle, opt_state = load_bundle(_default_ckpt(args.sagiri, "sagiri_base.npz"), "sagiri")
    if not args.resume_optimizer:
        opt_state = None
    deg = DegradationSpec(**{**s["degradation"], "seed": s["run"]["seed"]})
    res = pretrain_sagiri([gt for _, gt, _ in triples], deg, _train_config(s, out), bundle,
                          _gt_prompts(triples, s["train"]["prompt_source"]), opt_state)
    path = out / "sagiri_pretrain.npz"
    save_bundle(res.bundle, path, res.optimizer)
    print(f"pretrained refiner checkpoint: {path}")


def cmd_finetune_sagiri(args, s, out: Path) -> None:
    triples = load_pairs(args.data)
    bundle, _ = load_bundle(_default_ckpt(args.sagiri, "sagiri_pretrain.npz"), "sagiri")
    restorer, _ = load_bundle(_default_ckpt(args.restorer, "restorer.npz"), "restorer")
    lqs = [lq for lq, _, _ in triples]
    data = finetune_data(restore_all(restorer, lqs), [gt for _, gt, _ in triples], lqs,
                         _gt_prompts(triples, s["train"]["prompt_source"]), bundle, s["sample"]["saturation_mode"])
    res = finetune_sagiri(data, _train_config(s, out), bundle)
    path = out / "sagiri.npz"
    save_bundle(res.bundle, path, res.optimizer)
    print(f"refiner checkpoint: {path}")


def _inputs(path: Path) -> list[Path]:
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.suffix.lower() == ".png" and not p.name.endswith(".mask.png"))
    if not path.exists():
        raise FileNotFoundError(f"input not found: {path}")
    return [path]


def cmd_enhance(args, s, out: Path) -> None:
    restorer, _ = load_bundle(_default_ckpt(args.restorer, "restorer.npz"), "restorer")
    sagiri, _ = load_bundle(_default_ckpt(args.sagiri, "sagiri.npz"), "sagiri")
    paths = _inputs(Path(args.input))
    if len(paths) > 1 and (args.prompt_file or args.mask_file):
        raise ValueError("--prompt-file and --mask-file apply to a single input image")
    for i, path in enumerate(paths):
        lq = load_image(path)
        if args.mask_file:
            mask = load_mask(args.mask_file)
        else:
            # the clipped pixels of the capture, not of the restored image, are the unknown ones
            mask = detect_unknown_mask(lq, s["sample"]["saturation_mode"])
        prompt = Path(args.prompt_file).read_text().strip() if args.prompt_file else None
        if prompt is None and path.with_suffix(".txt").exists():
            prompt = path.with_suffix(".txt").read_text().strip()
        stage1 = restore(restorer, lq)
        if args.keep_intermediate:
            save_image(stage1, out / f"{path.stem}.stage1.png")
        result = refine(stage1, prompt, mask, sagiri, n_steps=s["sample"]["n_steps"],
                        seed=s["run"]["seed"] ^ i, **_sample_kwargs(s))
        save_image(result, out / f"{path.stem}.png")
        print(f"{path} -> {out / (path.stem + '.png')} (unknown {mask.unknown_fraction:.3f})")


def cmd_refine(args, s, out: Path) -> None:
    from .evaluation import RefineOptions, refine_directory

    sagiri, _ = load_bundle(_default_ckpt(args.sagiri, "sagiri.npz"), "sagiri")
    opts = RefineOptions(n_steps=s["sample"]["n_steps"], seed=s["run"]["seed"], use_prompts=not args.no_prompts,
                         **_sample_kwargs(s))
    manifest = refine_directory(args.input, sagiri, out, opts)
    print(f"manifest: {manifest}")


def cmd_make_masks(args, s, out: Path) -> None:
    for path in _inputs(Path(args.input)):
        mask = detect_unknown_mask(load_image(path), s["sample"]["saturation_mode"])
        save_mask(mask, out / f"{path.stem}.mask.png")
        print(f"{path.name}: unknown {mask.unknown_fraction:.4f}")


def cmd_eval(args, s, out: Path) -> None:
    from .evaluation import evaluate_directory

    records = evaluate_directory(args.pred, args.ref, args.plugin or (), out / "metrics.csv")
    m = records[-1]
    print(f"mean psnr {m.psnr:.3f}  ssim {m.ssim:.4f}  l_cd_hard {m.l_cd_hard:.5f}  -> {out / 'metrics.csv'}")


HANDLERS = {
    "synth-data": cmd_synth_data, "train-restorer": cmd_train_restorer, "train-vae": cmd_train_vae,
    "pretrain-sagiri": cmd_pretrain_sagiri, "finetune-sagiri": cmd_finetune_sagiri, "enhance": cmd_enhance,
    "refine": cmd_refine, "make-masks": cmd_make_masks, "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sagiri-lab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    helps = {
        "synth-data": "render the procedural toy corpus and its manifests",
        "train-restorer": "train the stage-1 color restorer",
        "train-vae": "train the VAE and warm up the base denoiser",
        "pretrain-sagiri": "train the control branch on synthetic degradations",
        "finetune-sagiri": "fine-tune the control branch on stage-1 outputs with masks",
        "enhance": "restore then refine one image or a directory",
        "refine": "refine a directory of third-party outputs",
        "make-masks": "write unknown-region masks for a directory",
        "eval": "score a directory of predictions",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", help="INI settings file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
        if name in ("train-restorer", "train-vae", "pretrain-sagiri", "finetune-sagiri"):
            p.add_argument("--data", required=True, help="corpus manifest (.jsonl)")
        if name == "train-restorer":
            p.add_argument("--resume", help="restorer checkpoint to continue from")
        if name in ("pretrain-sagiri", "finetune-sagiri", "enhance", "refine"):
            p.add_argument("--sagiri", help="refiner checkpoint (default: under $SAGIRI_LAB_CACHE)")
        if name == "pretrain-sagiri":
            p.add_argument("--resume-optimizer", action="store_true")
        if name in ("finetune-sagiri", "enhance"):
            p.add_argument("--restorer", help="restorer checkpoint (default: under $SAGIRI_LAB_CACHE)")
        if name in ("enhance", "refine", "make-masks"):
            p.add_argument("--in", dest="input", required=True, help="image file or directory")
        if name == "enhance":
            p.add_argument("--prompt-file")
            p.add_argument("--mask-file", help="known(255)/unknown(0) mask PNG")
            p.add_argument("--keep-intermediate", action="store_true", help="also save the stage-1 image")
        if name == "refine":
            p.add_argument("--no-prompts", action="store_true", help="ignore sidecar .txt prompts")
        if name == "eval":
            p.add_argument("--pred", required=True)
            p.add_argument("--ref")
            p.add_argument("--plugin", action="append", help="metric executable; repeatable")
    return parser


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = resolve_settings(args.config, args.set)
    except (KeyError, ValueError, FileNotFoundError, configparser.Error) as exc:
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        settings["run"]["seed"] = args.seed
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_settings(settings, [args.command, *argv[argv.index(args.command) + 1:]], out / "resolved_config.ini")
        HANDLERS[args.command](args, settings, out)
    except (OSError, ValueError, ImagingError, CheckpointError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


__all__ = ["run", "main", "build_parser", "resolve_settings", "default_settings", "cache_root"]


if __name__ == "__main__":
    main()
