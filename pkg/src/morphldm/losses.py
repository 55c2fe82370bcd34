"""Scalar objectives for both training stages."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .fields import ShapeError, displacement_gradient_penalty, displacement_magnitude, voxel_to_normalized


@dataclass
class Stage1Weights:
    """Loss coefficients for the autoencoder / registration stage.

    ``displacement_units`` selects the units the field regularizer sees:
    ``"normalized"`` rescales voxel displacements to the ``[-1, 1]`` sampling
    grid before penalizing, ``"voxel"`` penalizes them as stored.
    """

    alpha: float = 5.0
    beta: float = 1.0
    kl_weight: float = 1e-7
    adv_weight: float = 0.005
    displacement_units: str = "normalized"

    def __post_init__(self):
        for name in ("alpha", "beta", "kl_weight", "adv_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.displacement_units not in ("normalized", "voxel"):
            raise ValueError(f"unknown displacement_units {self.displacement_units!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def _same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def l1_similarity(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _same_shape(pred, target)
    return (pred - target).abs().mean()


def kl_to_standard_normal(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Elementwise-mean KL divergence of ``N(mu, exp(logvar))`` from ``N(0, 1)``."""
    return 0.5 * (mu.pow(2) + logvar.exp() - logvar - 1.0).mean()


def adversarial_losses(disc_real: torch.Tensor, disc_fake: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Hinge losses ``(gen_loss, disc_loss)``.

    ``gen_loss`` is computed from ``disc_fake`` as passed; callers detach the
    fake images when updating the discriminator.
    """
    disc_loss = F.relu(1.0 - disc_real).mean() + F.relu(1.0 + disc_fake).mean()
    gen_loss = -disc_fake.mean()
    return gen_loss, disc_loss


def generator_adversarial_loss(disc_fake: torch.Tensor) -> torch.Tensor:
    return -disc_fake.mean()


def regularizer_terms(u: torch.Tensor, units: str = "normalized") -> tuple[torch.Tensor, torch.Tensor]:
    """``(magnitude, gradient)`` penalties of a voxel-unit displacement."""
    if units == "normalized":
        u = voxel_to_normalized(u)
    return displacement_magnitude(u), displacement_gradient_penalty(u)


def stage1_objective(
    x: torch.Tensor,
    recon: torch.Tensor,
    weights: Stage1Weights,
    mu: torch.Tensor,
    logvar: torch.Tensor,
    field: torch.Tensor | None = None,
    disc_fake: torch.Tensor | None = None,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Total stage-1 loss and its weighted components.

    ``recon`` is the deformed template (or the direct reconstruction for the
    plain autoencoder, in which case ``field`` is None). The adversarial term
    is included only when ``disc_fake`` is given.
    """
    zero = x.new_zeros(())
    comps = {"l1": l1_similarity(recon, x)}
    comps["adv"] = weights.adv_weight * generator_adversarial_loss(disc_fake) if disc_fake is not None else zero
    if field is not None:
        mag, grad = regularizer_terms(field, weights.displacement_units)
        comps["magnitude"] = weights.alpha * mag
        comps["gradient"] = weights.beta * grad
    else:
        comps["magnitude"] = zero
        comps["gradient"] = zero
    comps["kl"] = weights.kl_weight * kl_to_standard_normal(mu, logvar)
    total = comps["l1"] + comps["adv"] + comps["magnitude"] + comps["gradient"] + comps["kl"]
    return total, comps


def denoising_objective(eps_true: torch.Tensor, eps_pred: torch.Tensor) -> torch.Tensor:
    _same_shape(eps_true, eps_pred)
    return F.mse_loss(eps_pred, eps_true)
