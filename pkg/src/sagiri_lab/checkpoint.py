"""Self-describing model checkpoints.

A checkpoint is a NumPy ``.npz`` archive. ``__meta__`` holds UTF-8 JSON with
the model kind, config, seed, step count and free-form extras; every other
entry is a named array: ``param/<module>/<name>`` for module state and
``optim/<index>/<key>`` for optimizer state.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass
class ModelBundle:
    """Named modules plus the configuration needed to rebuild them."""

    kind: str
    config: dict
    seed: int
    modules: dict[str, nn.Module]
    step: int = 0
    extras: dict = field(default_factory=dict)

    def parameters(self):
        for m in self.modules.values():
            yield from m.parameters()

    def parameter_vector(self) -> torch.Tensor:
        return torch.cat([p.detach().reshape(-1) for p in self.parameters()])

    def n_parameters(self, trainable_only: bool = False) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad or not trainable_only)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for mname, module in self.modules.items():
            for pname, t in module.state_dict().items():
                out[f"param/{mname}/{pname}"] = t.detach().cpu().numpy()
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for mname, module in self.modules.items():
            prefix = f"param/{mname}/"
            sd = {k[len(prefix):]: torch.from_numpy(np.array(v)) for k, v in arrays.items()
                  if k.startswith(prefix)}
            missing, unexpected = module.load_state_dict(sd, strict=False)
            if missing or unexpected:
                raise CheckpointError(f"module {mname!r}: missing {missing}, unexpected {unexpected}")


def _optimizer_arrays(opt: torch.optim.Optimizer) -> tuple[dict[str, np.ndarray], dict]:
    sd = opt.state_dict()
    arrays = {}
    for idx, st in sd["state"].items():
        for key, val in st.items():
            arrays[f"optim/{idx}/{key}"] = torch.as_tensor(val).detach().cpu().numpy()
    return arrays, {"param_groups": sd["param_groups"]}


def _optimizer_state(arrays: dict[str, np.ndarray], meta: dict) -> dict:
    state: dict[int, dict] = {}
    for k, v in arrays.items():
        if not k.startswith("optim/"):
            continue
        _, idx, key = k.split("/", 2)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(np.array(v))
    return {"state": state, "param_groups": meta["param_groups"]}


def save_bundle(bundle: ModelBundle, path, optimizer: torch.optim.Optimizer | None = None) -> None:
    path = Path(path)
    arrays = bundle.state_arrays()
    meta = {
        "format": FORMAT_VERSION,
        "kind": bundle.kind,
        "config": bundle.config,
        "seed": bundle.seed,
        "step": bundle.step,
        "extras": bundle.extras,
        "modules": sorted(bundle.modules),
    }
    if optimizer is not None:
        opt_arrays, meta["optimizer"] = _optimizer_arrays(optimizer)
        arrays.update(opt_arrays)
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path.write_bytes(buf.getvalue())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as npz:
            arrays = {k: npz[k] for k in npz.files}
        meta = json.loads(arrays.pop("__meta__").tobytes().decode("utf-8"))
    except (ValueError, KeyError, OSError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if meta.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format {meta.get('format')}")
    return meta, arrays


def load_bundle(path, expected_kind: str | None = None) -> tuple[ModelBundle, dict | None]:
    """Rebuild a bundle from disk; also returns saved optimizer state, if any."""
    meta, arrays = read_checkpoint(path)
    kind = meta["kind"]
    if expected_kind is not None and kind != expected_kind:
        raise CheckpointError(f"{path}: expected a {expected_kind} checkpoint, found {kind}")
    if kind == "restorer":
        from .restorer import RestorerConfig, build_restorer

        bundle = build_restorer(RestorerConfig(**meta["config"]), meta["seed"])
    elif kind == "sagiri":
        from .sagiri import bundle_from_config

        bundle = bundle_from_config(meta["config"], meta["seed"])
    else:
        raise CheckpointError(f"{path}: unknown model kind {kind!r}")
    bundle.load_state_arrays(arrays)
    bundle.step = meta["step"]
    bundle.extras = meta["extras"]
    opt_state = _optimizer_state(arrays, meta["optimizer"]) if "optimizer" in meta else None
    return bundle, opt_state
