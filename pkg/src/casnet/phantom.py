"""Synthetic age-varying brain phantoms with exact labels.

Tissues are nested ellipsoidal shells.  The cortical band is folded by an
angular ripple whose amplitude grows linearly with gestational age, and the
whole brain grows with age.  Intensities are per-class constants, optionally
blurred by a Gaussian point-spread function, plus Gaussian noise, so every phantom has a known intensity/label relationship.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch
from scipy import ndimage

from .diffeo import IntegrationConfig, exp_svf
from .volume import (
    DTYPE,
    GridSpec,
    as_tensor,
    check_same_grid,
    identity_grid,
    one_hot,
    warp,
)

AGE_RANGE = (20.6, 38.2)

CLASS_NAMES = (
    "background", "CSF", "CGM", "WM", "Outlier", "Ventricles",
    "Cerebellum", "DGM", "Brainstem", "Hippocampus",
)
CORTEX = 2

# outer edge (normalised ellipsoidal radius) of classes 1..9, outside-in
SHELL_EDGES = (1.0, 0.86, 0.68, 0.52, 0.44, 0.36, 0.28, 0.20, 0.12)
# adjacent shells always differ; some non-adjacent classes share a level
INTENSITIES = (0.0, 0.95, 0.40, 0.70, 0.20, 0.95, 0.55, 0.40, 0.70, 0.20)
SEMI_AXES = (0.935, 0.871, 0.806)  # fractions of the half-extent at full size


@dataclass(frozen=True)
class PhantomSpec:
    grid: GridSpec = field(default_factory=lambda: GridSpec.cube(32))
    c: int = 10
    age: float = 30.0
    seed: int = 0
    noise_sd: float = 0.05
    fold_amplitude_per_week: float = 0.006
    fold_frequency: float = 4.0
    growth: float = 0.15
    shape_jitter: float = 0.015
    psf_sigma: float = 0.0
    artifact: bool = False

    def __post_init__(self):
        lo, hi = AGE_RANGE
        if not lo <= self.age <= hi:
            raise ValueError(f"age {self.age} outside [{lo}, {hi}]")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")
        if self.psf_sigma < 0:
            raise ValueError("psf_sigma must be >= 0")
        if not 2 <= self.c <= len(CLASS_NAMES):
            raise ValueError(f"class count must be in [2, {len(CLASS_NAMES)}]")


@dataclass
class PhantomSubject:
    image: torch.Tensor
    labels: torch.Tensor
    age: float
    true_svf: torch.Tensor | None = None
    seed: int | None = None


def ripple_amplitude(spec: PhantomSpec) -> float:
    return spec.fold_amplitude_per_week * (spec.age - AGE_RANGE[0])


def _shell_edges(c: int):
    # fewer classes: keep the outer shells, merge the core into the last class
    return SHELL_EDGES[: c - 1]


def gen_phantom(spec: PhantomSpec) -> PhantomSubject:
    grid = spec.grid
    edges = _shell_edges(spec.c)
    if min(grid.shape) < 2 * len(edges) + 2:
        raise ValueError(f"grid {grid.shape} too small for {spec.c} classes")
    rng = np.random.default_rng(spec.seed)
    jitter = 1 + spec.shape_jitter * rng.standard_normal(3)
    phase = 0.15 * rng.standard_normal(2)

    t = (spec.age - AGE_RANGE[0]) / (AGE_RANGE[1] - AGE_RANGE[0])
    scale = 1 - spec.growth * (1 - t)
    half = np.array([(n - 1) / 2 for n in grid.shape])
    axes = half * np.array(SEMI_AXES) * scale * jitter

    x = identity_grid(grid).numpy() - half
    q = x / axes
    r = np.sqrt((q ** 2).sum(-1))
    theta = np.arccos(np.clip(q[..., 2] / np.maximum(r, 1e-12), -1, 1))
    azim = np.arctan2(q[..., 1], q[..., 0])
    f = spec.fold_frequency
    ripple = np.sin(theta) * np.cos(f * azim + phase[0]) * np.cos(f * theta + phase[1])
    amp = ripple_amplitude(spec)

    # gyri only push outward, which keeps the cortical boundary count
    # non-decreasing in age; a signed ripple loses a few voxels at some ages
    bump = (ripple + 1) / 2
    bounds = list(edges)
    if len(bounds) > 1:
        bounds[1] = bounds[1] + amp * bump
    if len(bounds) > 2:
        bounds[2] = bounds[2] + 0.5 * amp * bump
    classes = np.zeros(grid.shape, dtype=np.int64)
    for k, edge in enumerate(bounds, start=1):
        classes[r <= edge] = k

    levels = np.array(INTENSITIES[: spec.c])
    image = levels[classes]
    if spec.psf_sigma > 0:
        # scanner point-spread function; labels stay crisp
        image = ndimage.gaussian_filter(image, spec.psf_sigma, mode="nearest")
    if spec.noise_sd > 0:
        image = image + spec.noise_sd * rng.standard_normal(grid.shape)
    if spec.artifact:
        image = add_slice_artifact(image, rng)
    return PhantomSubject(
        image=torch.as_tensor(image, dtype=DTYPE),
        labels=one_hot(classes, spec.c),
        age=float(spec.age),
        seed=spec.seed,
    )


def add_slice_artifact(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Motion-like corruption of the two central axial slices."""
    out = image.copy()
    mid = image.shape[2] // 2
    band = slice(mid - 1, mid + 1)
    out[:, :, band] = 0.55 * out[:, :, band] + 0.1 * rng.standard_normal(out[:, :, band].shape)
    return out


def boundary_voxel_count(classes, k: int = CORTEX) -> int:
    """Voxels of class ``k`` with a 6-neighbour of a different class."""
    classes = torch.as_tensor(classes)
    mask = classes == k
    edge = torch.zeros_like(mask)
    for axis in range(3):
        diff = classes.narrow(axis, 1, classes.shape[axis] - 1) != classes.narrow(axis, 0, classes.shape[axis] - 1)
        lo = mask.narrow(axis, 0, classes.shape[axis] - 1) & diff
        hi = mask.narrow(axis, 1, classes.shape[axis] - 1) & diff
        edge.narrow(axis, 0, classes.shape[axis] - 1).logical_or_(lo)
        edge.narrow(axis, 1, classes.shape[axis] - 1).logical_or_(hi)
    return int(edge.sum())


def stratified_ages(n: int, age_range=AGE_RANGE, n_groups: int = 4, seed: int = 0) -> np.ndarray:
    """One age per stratum, interleaved so every block of ``n_groups``
    consecutive subjects spans all age groups."""
    if n < 1:
        raise ValueError("n must be >= 1")
    lo, hi = age_range
    rng = np.random.default_rng(seed)
    u = rng.uniform(size=n)
    slots = lo + (np.arange(n) + u) / n * (hi - lo)
    per = -(-n // n_groups)
    order = sorted(range(n), key=lambda s: (s % per, s // per))
    return slots[order]


def gen_dataset(n: int, age_range=AGE_RANGE, base_seed: int = 0, spec: PhantomSpec | None = None,
                n_groups: int = 4) -> list[PhantomSubject]:
    spec = spec or PhantomSpec()
    ages = stratified_ages(n, age_range, n_groups, base_seed)
    seeds = np.random.SeedSequence(base_seed).generate_state(n, dtype=np.uint64)
    return [gen_phantom(replace(spec, age=float(a), seed=int(s))) for a, s in zip(ages, seeds)]


def split_indices(n: int, n_val: int = 0, n_test: int = 0) -> dict[str, list[int]]:
    n_train = n - n_val - n_test
    if n_train < 1:
        raise ValueError("split leaves no training subjects")
    idx = list(range(n))
    return {"train": idx[:n_train], "val": idx[n_train:n_train + n_val], "test": idx[n_train + n_val:]}


def warp_phantom(subject: PhantomSubject, V, cfg: IntegrationConfig = IntegrationConfig()) -> PhantomSubject:
    V = as_tensor(V)
    check_same_grid(subject.image, V)
    with torch.no_grad():
        phi = exp_svf(V, cfg)
        return PhantomSubject(
            image=warp(subject.image, phi),
            labels=warp(subject.labels, phi),
            age=subject.age,
            true_svf=V.clone(),
            seed=subject.seed,
        )


def smooth_velocity(grid: GridSpec, seed: int, n_bumps: int = 5, sigma=(8.0, 12.0),
                    max_norm: float = 2.0) -> torch.Tensor:
    """Sum of Gaussian bumps with random directions, rescaled to ``max_norm`` voxels."""
    rng = np.random.default_rng(seed)
    x = identity_grid(grid).numpy()
    shape = np.array(grid.shape, dtype=float)
    V = np.zeros(x.shape)
    for _ in range(n_bumps):
        centre = rng.uniform(0.25 * shape, 0.75 * shape)
        s = rng.uniform(*sigma)
        direction = rng.standard_normal(3)
        V += np.exp(-((x - centre) ** 2).sum(-1) / (2 * s * s))[..., None] * direction
    V *= max_norm / np.linalg.norm(V, axis=-1).max()
    return torch.as_tensor(V, dtype=DTYPE)
