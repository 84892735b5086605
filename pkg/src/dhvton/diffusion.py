"""Noise schedule, forward noising, the noise-prediction loss and DDPM sampling."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np
import torch

from .core import ConfigError, DimensionError, PreconditionError, SeededRng, mse


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta DDPM schedule.  Step ``t`` in ``1..T`` lives in slot ``t-1``."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def _slot(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise IndexError(f"timestep {t.tolist()} outside 1..{self.T}")
        return t.astype(np.int64) - 1

    def beta(self, t) -> np.ndarray:
        return self.betas[self._slot(t)]

    def alpha(self, t) -> np.ndarray:
        return self.alphas[self._slot(t)]

    def alpha_bar(self, t) -> np.ndarray:
        return self.alpha_bars[self._slot(t)]


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas))


def _per_sample(values: np.ndarray, like: torch.Tensor) -> torch.Tensor:
    """Broadcast per-sample schedule values against a batched tensor."""
    v = torch.as_tensor(np.asarray(values), dtype=like.dtype)
    if v.dim() == 0:
        return v
    return v.view(-1, *([1] * (like.dim() - 1)))


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``; ``t`` is a step or one step per batch item."""
    if eps.shape != x0.shape:
        raise DimensionError(f"noise shape {tuple(eps.shape)} != image shape {tuple(x0.shape)}")
    ab = sched.alpha_bar(t)
    return _per_sample(np.sqrt(ab), x0) * x0 + _per_sample(np.sqrt(1.0 - ab), x0) * eps


@dataclass
class Conditions:
    """Everything the denoiser sees besides ``x_t`` and ``t`` (batched, NCHW)."""

    masked_person: torch.Tensor
    mask: torch.Tensor
    garment: torch.Tensor
    pose: torch.Tensor
    densepose: torch.Tensor

    def index(self, idx) -> "Conditions":
        return Conditions(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))


class Denoiser(Protocol):
    def __call__(self, x_t: torch.Tensor, t: torch.Tensor, conds: Conditions) -> torch.Tensor: ...


def training_loss(
    model: Denoiser,
    x0: torch.Tensor,
    conds: Conditions,
    t,
    eps: torch.Tensor,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """Mean squared error between the injected noise and the model's estimate."""
    if conds.masked_person.shape != x0.shape or conds.mask.shape[-2:] != x0.shape[-2:]:
        raise ConfigError(
            f"condition shapes {tuple(conds.masked_person.shape)}/{tuple(conds.mask.shape)} "
            f"do not match image {tuple(x0.shape)}"
        )
    x_t = q_sample(x0, t, eps, sched)
    t_tensor = torch.as_tensor(np.broadcast_to(np.asarray(t), (x0.shape[0],)).copy(), dtype=torch.long)
    return mse(model(x_t, t_tensor, conds), eps)


def ddpm_step(
    model: Denoiser,
    x_t: torch.Tensor,
    t: int,
    conds: Conditions,
    sched: NoiseSchedule,
    rng: SeededRng,
) -> torch.Tensor:
    """One ancestral step x_t -> x_{t-1} with sigma_t^2 = beta_t (no noise at t=1)."""
    if not 1 <= t <= sched.T:
        raise PreconditionError(f"timestep {t} outside 1..{sched.T}")
    beta = float(sched.beta(t))
    alpha = float(sched.alpha(t))
    ab = float(sched.alpha_bar(t))
    t_tensor = torch.full((x_t.shape[0],), t, dtype=torch.long)
    eps_hat = model(x_t, t_tensor, conds)
    if eps_hat.shape != x_t.shape:
        raise DimensionError(f"model returned {tuple(eps_hat.shape)} for input {tuple(x_t.shape)}")
    mean = (x_t - (beta / np.sqrt(1.0 - ab)) * eps_hat) / np.sqrt(alpha)
    if t == 1:
        return mean
    return mean + np.sqrt(beta) * rng.normal(tuple(x_t.shape), dtype=x_t.dtype)


@torch.no_grad()
def sample_loop(
    model: Denoiser,
    conds: Conditions,
    sched: NoiseSchedule,
    rng: SeededRng,
) -> torch.Tensor:
    """Ancestral sampling from pure noise, clamped, then composited onto the background."""
    shape = tuple(conds.masked_person.shape)
    x = rng.normal(shape, dtype=conds.masked_person.dtype)
    for t in range(sched.T, 0, -1):
        x = ddpm_step(model, x, t, conds, sched, rng)
    x = x.clamp(-1.0, 1.0)
    keep = (conds.mask > 0.5).expand_as(x)
    return torch.where(keep, x, conds.masked_person)
