"""DDPM machinery over latent codes (epsilon parameterization)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

from .losses import denoising_objective

EpsModel = Callable[[torch.Tensor, torch.Tensor, torch.Tensor | None], torch.Tensor]


@dataclass(frozen=True)
class DiffusionSchedule:
    betas: torch.Tensor
    kind: str = "linear"

    def __post_init__(self):
        b = self.betas
        if b.dim() != 1 or len(b) < 1:
            raise ValueError("betas must be a non-empty 1-D tensor")
        if not bool(((b > 0) & (b < 1)).all()):
            raise ValueError("betas must lie strictly inside (0, 1)")

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> torch.Tensor:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> torch.Tensor:
        return torch.cumprod(self.alphas, dim=0)

    def check_t(self, t: torch.Tensor | int) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long)
        if bool((t < 0).any()) or bool((t >= self.T).any()):
            raise ValueError(f"timestep out of range [0, {self.T})")
        return t

    def to_dict(self) -> dict:
        return {"T": self.T, "kind": self.kind}


def make_schedule(T: int, kind: str = "linear", beta_min: float = 1e-4, beta_max: float = 0.02) -> DiffusionSchedule:
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if kind == "linear":
        betas = torch.linspace(beta_min, beta_max, T, dtype=torch.float64)
    elif kind == "scaled_linear":
        betas = torch.linspace(beta_min**0.5, beta_max**0.5, T, dtype=torch.float64) ** 2
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return DiffusionSchedule(betas, kind)


def _bcast(values: torch.Tensor, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    out = values[t].to(like.dtype)
    return out.view(-1, *([1] * (like.dim() - 1)))


def q_sample(z0: torch.Tensor, t: torch.Tensor | int, eps: torch.Tensor, sched: DiffusionSchedule) -> torch.Tensor:
    """Forward noising ``sqrt(abar_t) z0 + sqrt(1 - abar_t) eps``."""
    t = sched.check_t(t)
    if t.dim() == 0:
        t = t.expand(z0.shape[0])
    abar = sched.alpha_bars
    return _bcast(abar.sqrt(), t, z0) * z0 + _bcast((1 - abar).sqrt(), t, z0) * eps


def predict_x0(z_t: torch.Tensor, t: torch.Tensor | int, eps: torch.Tensor, sched: DiffusionSchedule) -> torch.Tensor:
    t = sched.check_t(t)
    if t.dim() == 0:
        t = t.expand(z_t.shape[0])
    abar = sched.alpha_bars
    return (z_t - _bcast((1 - abar).sqrt(), t, z_t) * eps) / _bcast(abar.sqrt(), t, z_t)


def training_step(
    z0: torch.Tensor,
    c: torch.Tensor | None,
    model: EpsModel,
    sched: DiffusionSchedule,
    generator: torch.Generator,
) -> torch.Tensor:
    """Denoising loss for one batch with ``t ~ U[0, T)`` and ``eps ~ N(0, I)``."""
    t = torch.randint(0, sched.T, (z0.shape[0],), generator=generator)
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    z_t = q_sample(z0, t, eps, sched)
    return denoising_objective(eps, model(z_t, t, c))


@torch.no_grad()
def ddpm_sample(
    model: EpsModel,
    c: torch.Tensor | None,
    sched: DiffusionSchedule,
    generator: torch.Generator,
    shape: tuple[int, ...],
    dtype=torch.float32,
) -> torch.Tensor:
    """Ancestral sampling from ``z_T ~ N(0, I)``; no noise is added at ``t = 0``."""
    betas = sched.betas
    abar = sched.alpha_bars
    abar_prev = torch.cat([abar.new_ones(1), abar[:-1]])
    coef_x0 = betas * abar_prev.sqrt() / (1 - abar)
    coef_zt = (1 - abar_prev) * sched.alphas.sqrt() / (1 - abar)
    post_var = betas * (1 - abar_prev) / (1 - abar)

    z = torch.randn(shape, generator=generator, dtype=dtype)
    for step in reversed(range(sched.T)):
        t = torch.full((shape[0],), step, dtype=torch.long)
        eps = model(z, t, c)
        x0 = predict_x0(z, t, eps, sched)
        mean = _bcast(coef_x0, t, z) * x0 + _bcast(coef_zt, t, z) * z
        if step > 0:
            noise = torch.randn(shape, generator=generator, dtype=dtype)
            z = mean + _bcast(post_var.sqrt(), t, z) * noise
        else:
            z = mean
    return z


@dataclass
class LatentScaler:
    """Multiplies latents by ``scale`` (reciprocal std of calibration latents)."""

    scale: float = 1.0

    def __post_init__(self):
        if not (self.scale > 0 and torch.isfinite(torch.tensor(self.scale))):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")

    @classmethod
    def calibrate(cls, latents: torch.Tensor) -> "LatentScaler":
        return cls(float(1.0 / latents.double().std()))


def scale_latent(z: torch.Tensor, scaler: LatentScaler) -> torch.Tensor:
    return z * scaler.scale


def unscale_latent(z: torch.Tensor, scaler: LatentScaler) -> torch.Tensor:
    return z / scaler.scale
