"""Training loops for the restorer, the VAE / base denoiser, and the refiner's two phases.

Every loop draws its minibatch, noise and degradations from generators seeded
with ``(seed, step)``, so a run resumed from a checkpoint replays exactly the
losses of an uninterrupted one.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import ModelBundle, save_bundle
from .diffusion import predict_x0, q_sample
from .imaging import (DegradationSpec, ImageBuffer, batch_seed, detect_unknown_mask,
                      generate_degradation, project_mask_to_latent)
from .losses import LossWeights, compose_color_loss, compose_content_loss
from .restorer import RestorerConfig, build_restorer, restore_tensor
from .sagiri import bundle_schedule, set_trainable

log = logging.getLogger(__name__)

PAPER_SCALE = {
    "restorer": "batch 16, 150,000 iterations, Adam lr 1e-4",
    "sagiri_pretrain": "250,000 Places365 images, 70,000 steps",
    "sagiri_finetune": "HDR-Real training set, another 20,000 steps",
}


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr: float = 1e-4
    steps: int = 2000
    seed: int = 0
    crop_size: int = 64
    loss_weights: LossWeights = field(default_factory=LossWeights)
    mask_enabled: bool = False
    prompt_source: str = "none"  # none | gt_captions | lq_captions
    grad_clip: float = 1.0
    log_every: int = 50
    checkpoint_every: int = 0
    out_dir: str | None = None
    # refiner-specific
    content_weight: float = 0.1
    content_t_max: int = 500
    known_loss_weight: float = 1.0  # < 1 down-weights known latent cells in the epsilon loss
    prompt_dropout: float = 0.1

    def __post_init__(self):
        if self.crop_size % 8:
            raise ValueError("crop_size must be a multiple of 8")
        if self.prompt_source not in ("none", "gt_captions", "lq_captions"):
            raise ValueError(f"unknown prompt source {self.prompt_source!r}")


@dataclass
class TrainResult:
    bundle: ModelBundle
    history: list[dict]
    optimizer: torch.optim.Optimizer


def to_tensor_batch(images) -> torch.Tensor:
    """Stack ImageBuffers / H x W x C arrays into a float32 ``(N, C, H, W)`` tensor."""
    arrs = [im.to_unit_float() if isinstance(im, ImageBuffer) else np.asarray(im, dtype=np.float64)
            for im in images]
    return torch.from_numpy(np.stack(arrs).transpose(0, 3, 1, 2).copy()).float()


def _step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step])


def _batch(seed: int, step: int, n: int, batch: int, *tensors, crop: int | None = None):
    rng = _step_rng(seed, step)
    idx = rng.choice(n, size=batch, replace=n < batch)
    out = [t[idx] if isinstance(t, torch.Tensor) else [t[i] for i in idx] for t in tensors]
    h = next(t for t in tensors if isinstance(t, torch.Tensor)).shape[-1]
    if crop is not None and crop < h:
        y, x = (int(v) for v in rng.integers(0, h - crop + 1, size=2))
        out = [t[..., y:y + crop, x:x + crop] if isinstance(t, torch.Tensor) and t.dim() == 4 else t
               for t in out]
    return idx, rng, out


class _Logger:
    def __init__(self, out_dir: str | None, name: str):
        self.path = Path(out_dir) / f"{name}_log.csv" if out_dir else None
        self.fields: list[str] | None = None

    def write(self, row: dict) -> None:
        if self.path is None:
            return
        new = not self.path.exists()
        with open(self.path, "a", newline="") as fh:
            if self.fields is None:
                self.fields = list(row)
            w = csv.DictWriter(fh, fieldnames=self.fields)
            if new:
                w.writeheader()
            w.writerow(row)


def _optimizer(params, cfg: TrainConfig, opt_state: dict | None) -> torch.optim.Optimizer:
    opt = torch.optim.Adam(params, lr=cfg.lr)
    if opt_state is not None:
        opt.load_state_dict(opt_state)
        for g in opt.param_groups:
            g["lr"] = cfg.lr
    return opt


def _check_finite(loss: torch.Tensor, step: int, terms: dict) -> None:
    if not torch.isfinite(loss):
        detail = ", ".join(f"{k}={float(torch.as_tensor(v).detach()):.4g}" for k, v in terms.items())
        raise TrainingError(f"non-finite loss at step {step} ({detail})")


def _maybe_checkpoint(bundle: ModelBundle, opt, cfg: TrainConfig, name: str) -> None:
    if cfg.out_dir and cfg.checkpoint_every and bundle.step % cfg.checkpoint_every == 0:
        save_bundle(bundle, Path(cfg.out_dir) / f"{name}_step{bundle.step:06d}.npz", opt)


# --------------------------------------------------------------------- stage 1


def train_restorer(pairs, cfg: TrainConfig, bundle: ModelBundle | None = None,
                   opt_state: dict | None = None, model_cfg: RestorerConfig = RestorerConfig()) -> TrainResult:
    """Optimize the color-reconstruction loss on (lq, gt) pairs.

    ``pairs`` is a sequence of ``(lq, gt)`` images. Passing a loaded bundle
    and its optimizer state resumes at ``bundle.step``.
    """
    if len(pairs) == 0:
        raise TrainingError("empty training set")
    lq = to_tensor_batch([p[0] for p in pairs])
    gt = to_tensor_batch([p[1] for p in pairs])
    if bundle is None:
        bundle = build_restorer(model_cfg, cfg.seed)
    mult = RestorerConfig(**bundle.config).pad_multiple
    if cfg.crop_size % mult:
        raise ValueError(f"crop_size {cfg.crop_size} must be divisible by {mult}")
    net = bundle.modules["net"]
    net.train()
    opt = _optimizer(net.parameters(), cfg, opt_state)
    logger = _Logger(cfg.out_dir, "restorer")
    history = []
    while bundle.step < cfg.steps:
        step = bundle.step
        _, _, (x, y) = _batch(cfg.seed, step, len(lq), cfg.batch_size, lq, gt, crop=cfg.crop_size)
        pred = net(x)
        loss, terms = compose_color_loss(pred, y, cfg.loss_weights, return_terms=True)
        _check_finite(loss, step, terms)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(net.parameters(), cfg.grad_clip)
        opt.step()
        bundle.step += 1
        row = {"step": step, "loss": loss.item(), **{k: v.item() for k, v in terms.items()}, "lr": cfg.lr}
        history.append(row)
        if step % cfg.log_every == 0 or bundle.step == cfg.steps:
            logger.write(row)
            log.info("restorer step %d loss %.5f", step, row["loss"])
        _maybe_checkpoint(bundle, opt, cfg, "restorer")
    net.eval()
    return TrainResult(bundle, history, opt)


def restorer_color_loss(bundle: ModelBundle, pairs, weights: LossWeights = LossWeights()) -> float:
    """Mean color loss of restored outputs over ``(lq, gt)`` pairs (eval mode, clamped)."""
    lq = to_tensor_batch([p[0] for p in pairs])
    gt = to_tensor_batch([p[1] for p in pairs])
    with torch.no_grad():
        return float(compose_color_loss(restore_tensor(bundle, lq), gt, weights))


def identity_color_loss(pairs, weights: LossWeights = LossWeights()) -> float:
    lq = to_tensor_batch([p[0] for p in pairs])
    gt = to_tensor_batch([p[1] for p in pairs])
    return float(compose_color_loss(lq, gt, weights))


# --------------------------------------------------------------- VAE and base


def train_vae(images, cfg: TrainConfig, bundle: ModelBundle, opt_state: dict | None = None) -> TrainResult:
    """Reconstruction + KL training of the refiner's VAE, then latent standardization."""
    if len(images) == 0:
        raise TrainingError("empty training set")
    x_all = to_tensor_batch(images)
    vae = bundle.modules["vae"]
    for p in vae.parameters():
        p.requires_grad_(True)
    vae.train()
    opt = _optimizer(vae.parameters(), cfg, opt_state)
    kl_w = vae.cfg.kl_weight
    history = []
    logger = _Logger(cfg.out_dir, "vae")
    start = bundle.extras.get("vae_steps", 0)
    for step in range(start, cfg.steps):
        _, rng, (x,) = _batch(cfg.seed, step, len(x_all), cfg.batch_size, x_all, crop=cfg.crop_size)
        gen = torch.Generator().manual_seed(int(rng.integers(2**62)))
        mu, logvar = vae.encode_stats(x)
        z = mu + (0.5 * logvar).exp() * torch.randn(mu.shape, generator=gen)
        rec = vae.decode(z)
        mse = F.mse_loss(rec, x)
        kl = -0.5 * torch.mean(1 + logvar - mu.pow(2) - logvar.exp())
        loss = mse + kl_w * kl
        _check_finite(loss, step, {"mse": mse, "kl": kl})
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(vae.parameters(), cfg.grad_clip)
        opt.step()
        row = {"step": step, "loss": loss.item(), "mse": mse.item(), "kl": kl.item(), "lr": cfg.lr}
        history.append(row)
        if step % cfg.log_every == 0:
            logger.write(row)
            log.info("vae step %d mse %.5f", step, row["mse"])
    vae.eval()
    for p in vae.parameters():
        p.requires_grad_(False)
    with torch.no_grad():
        z = torch.cat([vae.encode(x_all[i:i + 64]) for i in range(0, len(x_all), 64)])
    bundle.extras["latent_scale"] = float(1.0 / z.std())
    bundle.extras["vae_steps"] = cfg.steps
    return TrainResult(bundle, history, opt)


def vae_reconstruction_mse(bundle: ModelBundle, images) -> float:
    x = to_tensor_batch(images)
    vae = bundle.modules["vae"]
    with torch.no_grad():
        return float(F.mse_loss(vae.decode(vae.encode(x)), x))


def _drop_prompts(prompts: list[str], rng: np.random.Generator, p: float) -> list[str]:
    drop = rng.random(len(prompts)) < p
    return ["" if d else s for s, d in zip(prompts, drop)]


def train_base_denoiser(images, prompts, cfg: TrainConfig, bundle: ModelBundle,
                        opt_state: dict | None = None) -> TrainResult:
    """Epsilon-prediction training of the base U-Net on clean latents.

    Stands in for the pretrained text-to-image prior that the refiner is
    built on; the control branch is not used.
    """
    if len(images) == 0:
        raise TrainingError("empty training set")
    sched = bundle_schedule(bundle)
    set_trainable(bundle, "base")
    net, text = bundle.modules["net"], bundle.modules["text"]
    net.train()
    z_all = _encode_all(bundle, to_tensor_batch(images))
    prompts = list(prompts) if prompts is not None else [""] * len(images)
    params = [p for p in list(net.parameters()) + list(text.parameters()) if p.requires_grad]
    opt = _optimizer(params, cfg, opt_state)
    history = []
    logger = _Logger(cfg.out_dir, "base")
    start = bundle.extras.get("base_steps", 0)
    for step in range(start, cfg.steps):
        idx, rng, (z0, pr) = _batch(cfg.seed, step, len(z_all), cfg.batch_size, z_all, prompts)
        pr = _drop_prompts(pr, rng, cfg.prompt_dropout)
        t, eps = _draw_noise(rng, z0, sched.T)
        x_t = q_sample(z0, t, eps, sched)
        ctx, pad = text(pr)
        loss = F.mse_loss(net(x_t, t, ctx, pad), eps)
        _check_finite(loss, step, {"eps": loss})
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt.step()
        row = {"step": step, "loss": loss.item(), "lr": cfg.lr}
        history.append(row)
        if step % cfg.log_every == 0:
            logger.write(row)
            log.info("base step %d eps %.5f", step, row["loss"])
    bundle.extras["base_steps"] = cfg.steps
    set_trainable(bundle, "control")
    net.init_control_from_base()
    bundle.extras["phase"] = "base"
    net.eval()
    return TrainResult(bundle, history, opt)


def _encode_all(bundle: ModelBundle, x: torch.Tensor) -> torch.Tensor:
    vae = bundle.modules["vae"]
    scale = bundle.extras.get("latent_scale", 1.0)
    with torch.no_grad():
        return torch.cat([vae.encode(x[i:i + 64]) for i in range(0, len(x), 64)]) * scale


def _draw_noise(rng: np.random.Generator, z0: torch.Tensor, T: int):
    gen = torch.Generator().manual_seed(int(rng.integers(2**62)))
    t = torch.randint(1, T + 1, (z0.shape[0],), generator=gen)
    eps = torch.randn(z0.shape, generator=gen)
    return t, eps


# ------------------------------------------------------------------- refiner


@dataclass
class RefinerData:
    """Tensors for one refiner phase; ``latent_mask`` is None when masking is off."""

    cond_images: torch.Tensor
    targets: torch.Tensor
    prompts: list[str]
    latent_mask: torch.Tensor | None = None


def _noisy_latent(z_t, z_c, t, eps, mask, sched):
    x_t = q_sample(z_t, t, eps, sched)
    if mask is None:
        return x_t
    # Known cells follow the forward-noised condition latent, as at sampling time.
    return mask * q_sample(z_c, t, eps, sched) + (1.0 - mask) * x_t


def _eps_loss(eps_hat, eps, mask, known_weight: float) -> torch.Tensor:
    sq = (eps_hat - eps) ** 2
    if mask is None:
        return sq.mean()
    w = (1.0 - mask) + known_weight * mask
    return (sq * w).sum() / w.sum()


def _refiner_step(bundle: ModelBundle, cfg: TrainConfig, z_t: torch.Tensor, z_c: torch.Tensor,
                  target_img: torch.Tensor, prompts: list[str], mask: torch.Tensor | None,
                  rng: np.random.Generator, sched) -> tuple[torch.Tensor, dict]:
    net, text, vae = bundle.modules["net"], bundle.modules["text"], bundle.modules["vae"]
    t, eps = _draw_noise(rng, z_t, sched.T)
    x_t = _noisy_latent(z_t, z_c, t, eps, mask, sched)
    with torch.no_grad():
        ctx, pad = text(prompts)
    eps_hat = net(x_t, t, ctx, pad, cond=z_c)
    eps_loss = _eps_loss(eps_hat, eps, mask, cfg.known_loss_weight)
    terms = {"eps": eps_loss}
    loss = eps_loss
    sel = t <= cfg.content_t_max
    if cfg.content_weight > 0 and bool(sel.any()):
        x0_hat = predict_x0(x_t[sel], t[sel], eps_hat[sel], sched)
        decoded = vae.decode(x0_hat / bundle.extras.get("latent_scale", 1.0))
        content = compose_content_loss(decoded, target_img[sel], cfg.loss_weights)
        terms["content"] = content
        loss = loss + cfg.content_weight * content
    return loss, terms


def _train_refiner(bundle: ModelBundle, data: RefinerData, cfg: TrainConfig, opt_state, name: str,
                   degrade: DegradationSpec | None = None) -> TrainResult:
    if len(data.targets) == 0:
        raise TrainingError("empty training set")
    sched = bundle_schedule(bundle)
    set_trainable(bundle, "control")
    net = bundle.modules["net"]
    net.train()
    params = [p for p in net.parameters() if p.requires_grad]
    opt = _optimizer(params, cfg, opt_state)
    z_target = _encode_all(bundle, data.targets)
    z_cond_fixed = _encode_all(bundle, data.cond_images) if degrade is None else None
    history = []
    logger = _Logger(cfg.out_dir, name)
    key = f"{name}_steps"
    start = bundle.extras.get(key, 0)
    for step in range(start, cfg.steps):
        idx, rng, (zt, img_t, pr) = _batch(cfg.seed, step, len(z_target), cfg.batch_size,
                                           z_target, data.targets, data.prompts)
        if degrade is None:
            zc = z_cond_fixed[idx]
        else:
            imgs = []
            for j, i in enumerate(idx):
                spec = replace(degrade, seed=batch_seed(degrade.seed, step * cfg.batch_size + j))
                src = ImageBuffer.from_unit(data.targets[i].permute(1, 2, 0).double().numpy())
                imgs.append(generate_degradation(src, spec)[0])
            zc = _encode_all(bundle, to_tensor_batch(imgs))
        mask = data.latent_mask[idx] if (cfg.mask_enabled and data.latent_mask is not None) else None
        pr = _drop_prompts(pr, rng, cfg.prompt_dropout)
        loss, terms = _refiner_step(bundle, cfg, zt, zc, img_t, pr, mask, rng, sched)
        _check_finite(loss, step, terms)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt.step()
        bundle.step += 1
        row = {"step": step, "loss": loss.item(), **{k: v.item() for k, v in terms.items()}, "lr": cfg.lr}
        history.append(row)
        bundle.extras[key] = step + 1
        if step % cfg.log_every == 0:
            logger.write(row)
            log.info("%s step %d loss %.5f", name, step, row["loss"])
        _maybe_checkpoint(bundle, opt, cfg, name)
    bundle.extras["phase"] = name
    net.eval()
    return TrainResult(bundle, history, opt)


def pretrain_sagiri(images, deg: DegradationSpec, cfg: TrainConfig, bundle: ModelBundle,
                    prompts=None, opt_state: dict | None = None) -> TrainResult:
    """Control-branch training on synthetically degraded clean images, without masking."""
    if bundle.extras.get("vae_steps", 0) == 0:
        raise TrainingError("the VAE must be trained before refiner pretraining")
    cfg = replace(cfg, mask_enabled=False)
    targets = to_tensor_batch(images)
    data = RefinerData(targets, targets, list(prompts) if prompts is not None else [""] * len(images))
    return _train_refiner(bundle, data, cfg, opt_state, "pretrain", degrade=deg)


def finetune_data(stage1_outputs, gts, lqs, prompts, bundle: ModelBundle,
                  saturation_mode: str = "all_channels") -> RefinerData:
    """Pair stage-1 outputs with references; masks come from each item's own LDR input."""
    f = bundle.config["vae"]["downsample_factor"]
    c = bundle.config["vae"]["latent_channels"]
    masks = []
    for lq in lqs:
        m = detect_unknown_mask(lq.to_byte(), saturation_mode)
        lm = project_mask_to_latent(m, f, c).latent_mask
        masks.append(torch.from_numpy(lm.transpose(2, 0, 1).copy()).float())
    return RefinerData(to_tensor_batch(stage1_outputs), to_tensor_batch(gts), list(prompts), torch.stack(masks))


def finetune_sagiri(data: RefinerData, cfg: TrainConfig, bundle: ModelBundle,
                    opt_state: dict | None = None) -> TrainResult:
    """Paired fine-tuning with the unknown-region mask applied."""
    if bundle.extras.get("pretrain_steps", 0) == 0:
        raise TrainingError("finetuning needs a pretrained refiner checkpoint")
    cfg = replace(cfg, mask_enabled=True)
    return _train_refiner(bundle, data, cfg, opt_state, "finetune")


# ----------------------------------------------------------------- validation


def refiner_val_losses(bundle: ModelBundle, data: RefinerData, seed: int = 1234, n_draws: int = 4,
                       weights: LossWeights = LossWeights(), masked: bool = False,
                       known_loss_weight: float = 1.0) -> dict[str, float]:
    """Epsilon loss and one-step content loss on held-out data at fixed noise draws.

    With ``masked`` the noisy latent and the epsilon weighting follow the
    fine-tuning objective (requires ``data.latent_mask``); otherwise every
    cell is noised from the target and weighted equally.
    """
    if masked and data.latent_mask is None:
        raise ValueError("masked validation needs latent masks")
    sched = bundle_schedule(bundle)
    net, text, vae = bundle.modules["net"], bundle.modules["text"], bundle.modules["vae"]
    was_training = net.training
    net.eval()
    z_target = _encode_all(bundle, data.targets)
    z_cond = _encode_all(bundle, data.cond_images)
    mask = data.latent_mask if masked else None
    gen = torch.Generator().manual_seed(seed)
    eps_total, content_total = 0.0, 0.0
    with torch.no_grad():
        ctx, pad = text(data.prompts)
        for _ in range(n_draws):
            t = torch.randint(1, sched.T + 1, (len(z_target),), generator=gen)
            eps = torch.randn(z_target.shape, generator=gen)
            x_t = _noisy_latent(z_target, z_cond, t, eps, mask, sched)
            eps_hat = net(x_t, t, ctx, pad, cond=z_cond)
            eps_total += float(_eps_loss(eps_hat, eps, mask, known_loss_weight))
            x0 = predict_x0(x_t, t, eps_hat, sched).clamp(-10, 10)
            dec = vae.decode(x0 / bundle.extras.get("latent_scale", 1.0))
            content_total += float(compose_content_loss(dec, data.targets, weights))
    net.train(was_training)
    return {"eps": eps_total / n_draws, "content": content_total / n_draws}


def restore_all(bundle: ModelBundle, images) -> list[ImageBuffer]:
    x = to_tensor_batch(images)
    y = restore_tensor(bundle, x)
    return [ImageBuffer.from_unit(y[i].permute(1, 2, 0).double().numpy()) for i in range(len(y))]


__all__ = [
    "TrainConfig", "TrainResult", "TrainingError", "RefinerData", "PAPER_SCALE",
    "train_restorer", "train_vae", "train_base_denoiser", "pretrain_sagiri", "finetune_sagiri",
    "finetune_data", "refiner_val_losses", "restorer_color_loss", "identity_color_loss",
    "vae_reconstruction_mse", "restore_all", "to_tensor_batch",
]
