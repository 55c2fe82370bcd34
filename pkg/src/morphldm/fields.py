"""Dense deformation-field math.

Conventions used throughout the package:

* volumes are batched tensors ``(B, C, *S)`` with ``S`` the spatial shape
  (``(H, W)`` in 2D, ``(L, W, H)`` in 3D);
* displacement fields are ``(B, D, *S)`` with ``D == len(S)``, expressed in
  voxel units, channel ``d`` moving along spatial axis ``d``;
* the deformation is ``v = Id + u``: output voxel ``p`` samples the source at
  ``p + u(p)``.
"""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn.functional as F


class ShapeError(ValueError):
    """Raised when tensors violate a shape contract."""


def identity_grid(spatial_shape: Sequence[int], dtype=torch.float32, device=None) -> torch.Tensor:
    """Voxel-coordinate grid of shape ``(D, *S)`` with ``grid[d][idx] == idx[d]``."""
    spatial_shape = tuple(int(s) for s in spatial_shape)
    if not spatial_shape or any(s < 1 for s in spatial_shape):
        raise ShapeError(f"invalid spatial shape {spatial_shape}")
    axes = [torch.arange(s, dtype=dtype, device=device) for s in spatial_shape]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"), dim=0)


def _check_pair(img: torch.Tensor, field: torch.Tensor) -> None:
    ndim = img.dim() - 2
    if ndim not in (2, 3):
        raise ShapeError(f"expected a batched 2D or 3D volume, got shape {tuple(img.shape)}")
    if field.dim() != img.dim() or field.shape[1] != ndim:
        raise ShapeError(f"field shape {tuple(field.shape)} incompatible with image {tuple(img.shape)}")
    if field.shape[2:] != img.shape[2:]:
        raise ShapeError(f"spatial mismatch: image {tuple(img.shape[2:])} vs field {tuple(field.shape[2:])}")
    if field.shape[0] not in (1, img.shape[0]) and img.shape[0] != 1:
        raise ShapeError(f"batch mismatch: image {img.shape[0]} vs field {field.shape[0]}")


def voxel_to_normalized(field: torch.Tensor) -> torch.Tensor:
    """Rescale a voxel-unit displacement to the ``[-1, 1]`` grid convention."""
    sizes = field.shape[2:]
    scale = torch.tensor([2.0 / max(s - 1, 1) for s in sizes], dtype=field.dtype, device=field.device)
    return field * scale.view(1, -1, *([1] * len(sizes)))


def apply_deformation(img: torch.Tensor, field: torch.Tensor) -> torch.Tensor:
    """Warp ``img`` by the displacement ``field`` with multilinear interpolation.

    Sampling locations outside the grid are clamped to the border. The result
    is differentiable with respect to both arguments.
    """
    _check_pair(img, field)
    batch = max(img.shape[0], field.shape[0])
    img = img.expand(batch, *img.shape[1:])
    field = field.expand(batch, *field.shape[1:])
    sizes = img.shape[2:]
    # interpolate in float64 so the identity warp reproduces the input exactly
    out_dtype = img.dtype
    img, field = img.double(), field.double()
    coords = identity_grid(sizes, dtype=field.dtype, device=field.device).unsqueeze(0) + field
    # grid_sample wants (x, y[, z]) ordering, i.e. the last spatial axis first
    norm = torch.stack(
        [2.0 * coords[:, d] / max(sizes[d] - 1, 1) - 1.0 for d in reversed(range(len(sizes)))],
        dim=-1,
    )
    out = F.grid_sample(img, norm, mode="bilinear", padding_mode="border", align_corners=True)
    return out.to(out_dtype)


def displacement_magnitude(u: torch.Tensor) -> torch.Tensor:
    """Mean over batch and voxels of the Euclidean norm of each displacement vector."""
    return torch.linalg.vector_norm(u, dim=1).mean()


def forward_differences(u: torch.Tensor) -> list[torch.Tensor]:
    """Forward differences along each spatial axis, zero at the far boundary."""
    diffs = []
    for axis in range(2, u.dim()):
        d = torch.diff(u, dim=axis)
        pad = [0, 0] * (u.dim() - 1 - axis) + [0, 1]
        diffs.append(F.pad(d, pad))
    return diffs


def displacement_gradient_penalty(u: torch.Tensor) -> torch.Tensor:
    """Mean Euclidean norm of the spatial Jacobian of ``u``.

    For every voxel and displacement component, the forward differences along
    all spatial axes form a gradient vector; the penalty is the mean of its
    norm over batch, components and voxels.
    """
    if any(s < 2 for s in u.shape[2:]):
        raise ShapeError(f"every spatial dim must be >= 2, got {tuple(u.shape[2:])}")
    grad = torch.stack(forward_differences(u), dim=0)
    return torch.linalg.vector_norm(grad, dim=0).mean()


def jacobian_determinant_map(field: torch.Tensor) -> torch.Tensor:
    """Per-voxel determinant of ``d(Id + u)/dp``, shape ``(B, *S)``.

    Central differences in the interior, one-sided at the boundary
    (``torch.gradient`` semantics).
    """
    ndim = field.dim() - 2
    if ndim < 2 or field.shape[1] != ndim:
        raise ShapeError(f"expected (B, D, *S) with D = len(S) >= 2, got {tuple(field.shape)}")
    rows = []
    for comp in range(ndim):
        grads = torch.gradient(field[:, comp], dim=tuple(range(1, ndim + 1)))
        rows.append(torch.stack(grads, dim=-1))
    jac = torch.stack(rows, dim=-2)
    jac = jac + torch.eye(ndim, dtype=field.dtype, device=field.device)
    return torch.linalg.det(jac)


def negative_jacobian_fraction(field: torch.Tensor) -> float:
    return float((jacobian_determinant_map(field) <= 0).double().mean())


def one_hot(labels: torch.Tensor, num_regions: int, dtype=torch.float32) -> torch.Tensor:
    """``(B, *S)`` integer labels to ``(B, R, *S)`` one-hot channels."""
    oh = F.one_hot(labels.long(), num_regions).to(dtype)
    return oh.movedim(-1, 1)


def warp_labels(labels: torch.Tensor, field: torch.Tensor, num_regions: int | None = None) -> torch.Tensor:
    """Warp an integer label map ``(B, *S)`` through ``field``.

    Each region's indicator is warped linearly and the per-voxel argmax is
    taken; ties go to the lowest region index.
    """
    if labels.dim() != field.dim() - 1:
        raise ShapeError(f"labels {tuple(labels.shape)} incompatible with field {tuple(field.shape)}")
    if num_regions is None:
        num_regions = int(labels.max()) + 1
    dtype = field.dtype if field.is_floating_point() else torch.float32
    warped = apply_deformation(one_hot(labels, num_regions, dtype), field.to(dtype))
    # torch.argmax returns the first maximal index, which gives the tie rule
    return warped.argmax(dim=1).to(labels.dtype)
