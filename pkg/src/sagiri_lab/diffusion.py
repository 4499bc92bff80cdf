"""DDPM schedules, forward noising and masked ancestral sampling.

Tables are indexed by timestep with index 0 reserved for clean data
(``alpha_bar[0] = 1``, ``beta[0] = 0``), so ``beta[t]`` for ``t = 1..T`` is
the usual T-vector. A respaced schedule keeps the same layout and records,
for every internal index, which timestep of the parent schedule it stands
for; that is what the denoiser is conditioned on.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

CONVENTIONS = ("shifted", "paper_literal")


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray
    timesteps: np.ndarray  # internal index -> model timestep

    @classmethod
    def from_alpha_bar(cls, alpha_bar: np.ndarray, timesteps: np.ndarray) -> "NoiseSchedule":
        alpha_bar = np.asarray(alpha_bar, dtype=np.float64)
        if alpha_bar[0] != 1.0 or np.any(np.diff(alpha_bar) >= 0):
            raise ValueError("alpha_bar must start at 1 and decrease strictly")
        alpha = np.ones_like(alpha_bar)
        alpha[1:] = alpha_bar[1:] / alpha_bar[:-1]
        beta = 1.0 - alpha
        post = np.zeros_like(alpha_bar)
        post[1:] = beta[1:] * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:])
        return cls(len(alpha_bar) - 1, beta, alpha, alpha_bar, post, np.asarray(timesteps, dtype=np.int64))

    def respace(self, n_steps: int) -> "NoiseSchedule":
        """Evenly strided subsequence of ``n_steps`` timesteps from T down to 1.

        Adjacent selected timesteps become adjacent steps; the cumulative
        products at the selected timesteps are copied, not recomputed.
        """
        if n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if n_steps > self.T:
            raise ValueError(f"n_steps={n_steps} exceeds T={self.T}")
        if n_steps == 1:
            chosen = np.array([self.T])
        else:
            chosen = np.unique(np.round(np.linspace(1, self.T, n_steps)).astype(np.int64))
        idx = np.concatenate([[0], chosen])
        return NoiseSchedule.from_alpha_bar(self.alpha_bar[idx], self.timesteps[idx])


def build_schedule(T: int = 1000, kind: str = "linear", beta_start: float = 1e-4,
                   beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if kind != "linear":
        raise ValueError(f"unsupported schedule kind {kind!r}")
    beta = np.concatenate([[0.0], np.linspace(beta_start, beta_end, T, dtype=np.float64)])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    post = np.zeros(T + 1)
    post[1:] = beta[1:] * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:])
    return NoiseSchedule(T, beta, alpha, alpha_bar, post, np.arange(T + 1, dtype=np.int64))


def _coef(table: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    """Gather ``table[t]`` and shape it to broadcast against ``like``."""
    if isinstance(t, torch.Tensor) and t.dim() > 0:
        vals = torch.as_tensor(table, dtype=like.dtype, device=like.device)[t.long()]
        return vals.reshape(-1, *([1] * (like.dim() - 1)))
    return torch.as_tensor(float(table[int(t)]), dtype=like.dtype, device=like.device)


def _check_t(t, sched: NoiseSchedule, low: int = 0) -> None:
    tt = t if isinstance(t, torch.Tensor) else torch.tensor(t)
    if tt.numel() and (int(tt.min()) < low or int(tt.max()) > sched.T):
        raise ValueError(f"timestep out of range [{low}, {sched.T}]")


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Draw from q(x_t | x_0): sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps."""
    if x0.shape != eps.shape:
        raise ValueError("x0 and eps shapes differ")
    _check_t(t, sched)
    ab = _coef(sched.alpha_bar, t, x0)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


def predict_x0(x_t: torch.Tensor, t, eps_hat: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    ab = _coef(sched.alpha_bar, t, x_t)
    return (x_t - (1.0 - ab).sqrt() * eps_hat) / ab.sqrt()


@dataclass
class SamplerState:
    x_t: torch.Tensor
    t: int
    rng_seed: int = 0


@dataclass
class DenoiserOutput:
    """Noise prediction plus the reverse-step Gaussian it implies."""

    eps_hat: torch.Tensor
    mean: torch.Tensor
    var: float

    @classmethod
    def from_eps(cls, eps_hat: torch.Tensor, x_t: torch.Tensor, t: int, sched: NoiseSchedule):
        if eps_hat.shape != x_t.shape:
            raise ValueError("eps_hat shape does not match x_t")
        a, b, ab = sched.alpha[t], sched.beta[t], sched.alpha_bar[t]
        mean = (x_t - (b / np.sqrt(1.0 - ab)) * eps_hat) / np.sqrt(a)
        return cls(eps_hat, mean, float(sched.posterior_var[t]))


def masked_reverse_step(state: SamplerState, x0_latent: torch.Tensor, mask: torch.Tensor,
                        out: DenoiserOutput, sched: NoiseSchedule, convention: str = "shifted",
                        generator: torch.Generator | None = None) -> SamplerState:
    """One reverse step splicing forward-noised known cells with model samples.

    ``mask`` is 1 on known latent cells. The known branch is noised to
    ``alpha_bar[t-1]`` (``shifted``) or ``alpha_bar[t]`` (``paper_literal``).
    The model branch adds no noise on the final step ``t = 1``.
    """
    if mask is None:
        raise ValueError("masked_reverse_step needs a latent mask")
    if convention not in CONVENTIONS:
        raise ValueError(f"unknown convention {convention!r}")
    t = state.t
    if t < 1 or t > sched.T:
        raise ValueError(f"cannot step from t={t}")
    x = state.x_t
    mask = mask.to(x.dtype)
    t_known = t - 1 if convention == "shifted" else t
    known = q_sample(x0_latent, t_known, torch.randn(x.shape, generator=generator, dtype=x.dtype), sched)
    z = torch.randn(x.shape, generator=generator, dtype=x.dtype)
    unknown = out.mean if t == 1 else out.mean + np.sqrt(out.var) * z
    x_prev = mask * known + (1.0 - mask) * unknown
    return SamplerState(x_prev, t - 1, state.rng_seed)


def reverse_step(state: SamplerState, out: DenoiserOutput, generator: torch.Generator | None = None
                 ) -> SamplerState:
    """Plain ancestral step, used when no mask is given."""
    t = state.t
    if t < 1:
        raise ValueError("cannot step from t=0")
    z = torch.randn(state.x_t.shape, generator=generator, dtype=state.x_t.dtype)
    x_prev = out.mean if t == 1 else out.mean + np.sqrt(out.var) * z
    return SamplerState(x_prev, t - 1, state.rng_seed)


Denoiser = Callable[[torch.Tensor, torch.Tensor, object], torch.Tensor]


def sample_loop(denoiser: Denoiser, condition, x0_latent: torch.Tensor | None, mask: torch.Tensor | None,
                sched: NoiseSchedule, n_steps: int = 30, seed: int = 0, *, shape=None,
                convention: str = "shifted", callback=None) -> torch.Tensor:
    """Ancestral sampling over ``n_steps`` strided timesteps, starting from pure noise.

    Args:
        denoiser: ``denoiser(x_t, model_timesteps, condition) -> eps_hat``.
        condition: passed through to the denoiser untouched.
        x0_latent: clean latent whose known cells are re-imposed each step.
        mask: latent mask, 1 = known; ``None`` disables the splice.
        sched: the full training schedule.
        callback: called as ``callback(state)`` after every step.

    Returns:
        The final latent ``x_0``.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    sub = sched.respace(n_steps)
    if shape is None:
        if x0_latent is None:
            raise ValueError("need x0_latent or shape")
        shape = x0_latent.shape
    dtype = x0_latent.dtype if x0_latent is not None else torch.float32
    gen = torch.Generator().manual_seed(int(seed))
    state = SamplerState(torch.randn(shape, generator=gen, dtype=dtype), sub.T, int(seed))
    if mask is not None:
        mask = mask.to(dtype).expand(shape)
    while state.t > 0:
        k = state.t
        tm = torch.full((shape[0],), int(sub.timesteps[k]), dtype=torch.long)
        with torch.no_grad():
            eps_hat = denoiser(state.x_t, tm, condition).to(dtype)
        out = DenoiserOutput.from_eps(eps_hat, state.x_t, k, sub)
        if mask is None:
            state = reverse_step(state, out, gen)
        else:
            state = masked_reverse_step(state, x0_latent, mask, out, sub, convention, gen)
        if callback is not None:
            callback(state)
    return state.x_t
