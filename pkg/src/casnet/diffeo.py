"""Diffeomorphisms from stationary velocity fields.

The flow of a velocity field over unit time is computed by scaling and
squaring: the field is divided by ``2**T`` and the resulting small
deformation is composed with itself ``T`` times.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .volume import (
    DeformationField,
    GridSpec,
    as_tensor,
    check_same_grid,
    check_vector_field,
    identity_grid,
    spatial_gradient,
    trilinear_sample,
)

MAX_SQUARINGS = 16


@dataclass(frozen=True)
class IntegrationConfig:
    """Number of squaring steps; ``2**T`` effective Euler steps."""

    T: int = 6

    def __post_init__(self):
        if int(self.T) != self.T or not 0 <= self.T <= MAX_SQUARINGS:
            raise ValueError(f"T must be an integer in [0, {MAX_SQUARINGS}], got {self.T!r}")


def exp_svf(V, cfg: IntegrationConfig = IntegrationConfig()) -> DeformationField:
    """Exponentiate a stationary velocity field by scaling and squaring."""
    V = check_vector_field(V)
    grid = identity_grid(GridSpec.of(V))
    U = V / 2 ** cfg.T
    for _ in range(cfg.T):
        U = U + trilinear_sample(U, grid + U)
    return DeformationField(U)


def invert_svf(V, cfg: IntegrationConfig = IntegrationConfig()) -> DeformationField:
    """Inverse deformation: the flow of the negated velocity."""
    return exp_svf(-as_tensor(V), cfg)


@torch.no_grad()
def euler_integrate(V, n_steps: int) -> DeformationField:
    """Reference flow by explicit Euler with step ``1 / n_steps``.

    Each trajectory is advanced by sampling the velocity at its current
    position; used as an oracle for :func:`exp_svf`.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    V = check_vector_field(V)
    x0 = identity_grid(GridSpec.of(V))
    x = x0.clone()
    h = 1.0 / n_steps
    for _ in range(n_steps):
        x = x + h * trilinear_sample(V, x)
    return DeformationField(x - x0)


def compose(outer: DeformationField, inner: DeformationField) -> DeformationField:
    """Field of ``x -> outer(inner(x))``.

    ``warp(vol, compose(outer, inner))`` approximates
    ``warp(warp(vol, outer), inner)`` with a single resampling of ``vol``.
    """
    check_same_grid(outer.displacement, inner.displacement)
    U_in = inner.displacement
    return DeformationField(U_in + trilinear_sample(outer.displacement, inner.positions()))


def jacobian_det(phi: DeformationField) -> torch.Tensor:
    """Per-voxel determinant of ``I + dU/dx`` (central differences)."""
    J = spatial_gradient(phi.displacement) + torch.eye(3, dtype=phi.displacement.dtype)
    return torch.linalg.det(J)


def negative_jacobian_fraction(phi: DeformationField) -> float:
    det = jacobian_det(phi.detach())
    return float((det <= 0).double().mean())
