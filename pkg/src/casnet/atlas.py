"""Global and age-conditioned atlases.

The global atlas is the population mean of images and labelmaps.  Each age
group owns a learnable velocity field ``Q[g]`` whose flow ``psi`` warps the
global atlas into that group's conditional atlas.  At the end of every epoch
the global atlas is rebuilt by pulling all subjects back through
``phi^-1`` and ``psi^-1``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .diffeo import IntegrationConfig, compose, exp_svf
from .phantom import AGE_RANGE
from .volume import (
    DTYPE,
    DeformationField,
    GridSpec,
    as_tensor,
    check_same_grid,
    normalize_labels,
    warp,
)


def age_group(age: float, n_groups: int = 4, age_range=AGE_RANGE) -> int:
    """Equal-width age bin; ages on or beyond the range ends fall in the end bins."""
    lo, hi = age_range
    g = int(np.floor((age - lo) / (hi - lo) * n_groups))
    return min(max(g, 0), n_groups - 1)


def one_hot_group(group: int, n_groups: int = 4) -> np.ndarray:
    if not 0 <= group < n_groups:
        raise IndexError(f"age group {group} outside [0, {n_groups})")
    code = np.zeros(n_groups)
    code[group] = 1.0
    return code


@dataclass
class GlobalAtlas:
    image: torch.Tensor
    labels: torch.Tensor
    epoch: int = 0

    @property
    def grid(self) -> GridSpec:
        return GridSpec.of(self.image)


@dataclass
class AtlasPair:
    image: torch.Tensor
    labels: torch.Tensor


class ConditionalParams:
    """One free velocity field per age group, zero-initialised."""

    def __init__(self, grid: GridSpec, n_groups: int = 4, fields=None):
        if fields is None:
            fields = torch.zeros(n_groups, *grid.shape, 3, dtype=DTYPE)
        fields = as_tensor(fields)
        if fields.shape != (n_groups, *grid.shape, 3):
            raise ValueError(f"expected {n_groups} fields on grid {grid.shape}")
        self.fields = fields
        self.grid = grid

    @property
    def n_groups(self) -> int:
        return self.fields.shape[0]


def init_global_atlas(images, labels) -> GlobalAtlas:
    """Voxelwise mean of all images and of all labelmaps."""
    images, labels = list(images), list(labels)
    if not images or len(images) != len(labels):
        raise ValueError("need a non-empty dataset of (image, labels) pairs")
    check_same_grid(*images, *labels)
    image = torch.stack([as_tensor(i) for i in images]).mean(0)
    lab = torch.stack([as_tensor(s) for s in labels]).mean(0)
    return GlobalAtlas(image, lab, epoch=0)


def conditional_field(params: ConditionalParams, group: int,
                      cfg: IntegrationConfig = IntegrationConfig()) -> tuple[DeformationField, DeformationField]:
    if not 0 <= group < params.n_groups:
        raise IndexError(f"age group {group} outside [0, {params.n_groups})")
    Q = params.fields[group]
    return exp_svf(Q, cfg), exp_svf(-Q, cfg)


def conditional_atlas(atlas: GlobalAtlas, psi: DeformationField) -> AtlasPair:
    check_same_grid(atlas.image, psi.displacement)
    return AtlasPair(warp(atlas.image, psi), warp(atlas.labels, psi))


@torch.no_grad()
def update_global_atlas(atlas: GlobalAtlas, images, labels, fields) -> GlobalAtlas:
    """Mean of subjects pulled back to global space.

    ``fields`` holds one ``(phi_inv, psi_inv)`` pair per subject; subject ``i``
    contributes ``warp(I_i, compose(phi_inv, psi_inv))``.
    """
    images, labels, fields = list(images), list(labels), list(fields)
    if not (len(images) == len(labels) == len(fields)) or not images:
        raise ValueError("need one (phi_inv, psi_inv) pair per subject")
    img_sum = torch.zeros_like(atlas.image)
    lab_sum = torch.zeros_like(atlas.labels)
    for I, S, (phi_inv, psi_inv) in zip(images, labels, fields):
        pull = compose(phi_inv, psi_inv)
        img_sum += warp(I, pull)
        lab_sum += warp(S, pull)
    n = len(images)
    return GlobalAtlas(img_sum / n, normalize_labels(lab_sum / n), epoch=atlas.epoch + 1)


@dataclass
class MeanDisplacement:
    """Running arithmetic mean of displacement fields."""

    total: torch.Tensor | None = None
    count: int = 0

    @property
    def mean(self) -> torch.Tensor:
        if self.count == 0:
            raise ValueError("no displacement accumulated yet")
        return self.total / self.count

    def accumulate(self, U) -> "MeanDisplacement":
        U = as_tensor(U)
        if self.total is not None:
            check_same_grid(self.total, U)
            total = self.total + U
        else:
            total = U
        return MeanDisplacement(total, self.count + 1)


def accumulate_mean_displacement(m: MeanDisplacement, U) -> MeanDisplacement:
    return m.accumulate(U)
