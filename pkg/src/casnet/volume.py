"""Dense volume containers, trilinear sampling and warping.

Layout conventions (all float64 torch tensors, channels last):

* scalar volume  -- shape ``(l, w, h)``
* label volume   -- shape ``(l, w, h, c)``, per-voxel probabilities
* vector field   -- shape ``(l, w, h, 3)``, components in voxel units

Positions are expressed in voxel index space with unit spacing and the
origin at voxel ``(0, 0, 0)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
import torch

DTYPE = torch.float64


class GridMismatchError(ValueError):
    """Raised when volumes on different grids are combined."""


class CorruptFieldError(FloatingPointError):
    """Raised when sample positions or field values are not finite."""


@dataclass(frozen=True)
class GridSpec:
    l: int
    w: int
    h: int

    def __post_init__(self):
        for name in ("l", "w", "h"):
            n = getattr(self, name)
            if int(n) != n or n < 2:
                raise ValueError(f"grid axis {name}={n!r} must be an integer >= 2")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.l, self.w, self.h)

    @property
    def size(self) -> int:
        return self.l * self.w * self.h

    @classmethod
    def of(cls, array) -> "GridSpec":
        return cls(*tuple(int(s) for s in array.shape[:3]))

    @classmethod
    def cube(cls, n: int) -> "GridSpec":
        return cls(n, n, n)


def as_tensor(x) -> torch.Tensor:
    """Convert array-likes to a float64 tensor without copying tensors already in shape."""
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def check_scalar_volume(vol) -> torch.Tensor:
    vol = as_tensor(vol)
    if vol.ndim != 3:
        raise ValueError(f"scalar volume must be 3-D, got shape {tuple(vol.shape)}")
    GridSpec.of(vol)
    if not torch.isfinite(vol).all():
        raise CorruptFieldError("scalar volume contains non-finite values")
    return vol


def check_label_volume(prob, atol: float = 1e-6) -> torch.Tensor:
    prob = as_tensor(prob)
    if prob.ndim != 4:
        raise ValueError(f"label volume must be 4-D (l, w, h, c), got {tuple(prob.shape)}")
    GridSpec.of(prob)
    if not torch.isfinite(prob).all():
        raise CorruptFieldError("label volume contains non-finite values")
    if (prob < -atol).any() or (prob > 1 + atol).any():
        raise ValueError("label probabilities must lie in [0, 1]")
    if (prob.sum(-1) - 1).abs().max() > atol:
        raise ValueError("label probabilities must sum to 1 per voxel")
    return prob


def check_vector_field(field) -> torch.Tensor:
    field = as_tensor(field)
    if field.ndim != 4 or field.shape[-1] != 3:
        raise ValueError(f"vector field must have shape (l, w, h, 3), got {tuple(field.shape)}")
    GridSpec.of(field)
    if not torch.isfinite(field).all():
        raise CorruptFieldError("vector field contains non-finite values")
    return field


def check_same_grid(*arrays) -> GridSpec:
    grids = {tuple(a.shape[:3]) for a in arrays}
    if len(grids) != 1:
        raise GridMismatchError(f"grid mismatch: {sorted(grids)}")
    return GridSpec(*grids.pop())


def identity_grid(grid) -> torch.Tensor:
    """Voxel coordinates of every grid point, shape ``(l, w, h, 3)``."""
    if not isinstance(grid, GridSpec):
        grid = GridSpec(*grid)
    axes = [torch.arange(n, dtype=DTYPE) for n in grid.shape]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"), dim=-1)


@dataclass(frozen=True)
class DeformationField:
    """Coordinate map ``phi(x) = x + displacement(x)``."""

    displacement: torch.Tensor

    def __post_init__(self):
        d = self.displacement
        if d.ndim != 4 or d.shape[-1] != 3:
            raise ValueError(f"displacement must have shape (l, w, h, 3), got {tuple(d.shape)}")

    @classmethod
    def identity(cls, grid) -> "DeformationField":
        if not isinstance(grid, GridSpec):
            grid = GridSpec(*grid)
        return cls(torch.zeros(*grid.shape, 3, dtype=DTYPE))

    @property
    def grid(self) -> GridSpec:
        return GridSpec.of(self.displacement)

    def is_identity(self) -> bool:
        return not bool(self.displacement.detach().abs().max() > 0)

    def positions(self) -> torch.Tensor:
        return identity_grid(self.grid) + self.displacement

    def detach(self) -> "DeformationField":
        return DeformationField(self.displacement.detach())


# -- trilinear sampling ------------------------------------------------------

@numba.njit(cache=True)
def _cell(p, n):
    """Clamp ``p`` to ``[0, n-1]``; return lower corner, fraction, inside flag."""
    inside = 0.0 <= p <= n - 1
    if p < 0.0:
        p = 0.0
    elif p > n - 1:
        p = n - 1.0
    i = min(int(np.floor(p)), n - 2)
    return i, p - i, inside


@numba.njit(cache=True)
def _tri_forward(data, shape, pos):
    nx, ny, nz = shape[0], shape[1], shape[2]
    m, c = pos.shape[0], data.shape[1]
    out = np.zeros((m, c))
    for k in range(m):
        i, fx, _ = _cell(pos[k, 0], nx)
        j, fy, _ = _cell(pos[k, 1], ny)
        l, fz, _ = _cell(pos[k, 2], nz)
        for dx in range(2):
            wx = fx if dx else 1.0 - fx
            for dy in range(2):
                wy = fy if dy else 1.0 - fy
                for dz in range(2):
                    wz = fz if dz else 1.0 - fz
                    w = wx * wy * wz
                    row = ((i + dx) * ny + (j + dy)) * nz + (l + dz)
                    for ch in range(c):
                        out[k, ch] += w * data[row, ch]
    return out


@numba.njit(cache=True)
def _tri_backward(data, shape, pos, gout, want_data, want_pos):
    nx, ny, nz = shape[0], shape[1], shape[2]
    m, c = pos.shape[0], data.shape[1]
    gdata = np.zeros(data.shape if want_data else (0, c))
    gpos = np.zeros((m, 3) if want_pos else (0, 3))
    for k in range(m):
        i, fx, inx = _cell(pos[k, 0], nx)
        j, fy, iny = _cell(pos[k, 1], ny)
        l, fz, inz = _cell(pos[k, 2], nz)
        for dx in range(2):
            wx = fx if dx else 1.0 - fx
            sx = 1.0 if dx else -1.0
            for dy in range(2):
                wy = fy if dy else 1.0 - fy
                sy = 1.0 if dy else -1.0
                for dz in range(2):
                    wz = fz if dz else 1.0 - fz
                    sz = 1.0 if dz else -1.0
                    row = ((i + dx) * ny + (j + dy)) * nz + (l + dz)
                    if want_data:
                        w = wx * wy * wz
                        for ch in range(c):
                            gdata[row, ch] += w * gout[k, ch]
                    if want_pos:
                        proj = 0.0
                        for ch in range(c):
                            proj += data[row, ch] * gout[k, ch]
                        gpos[k, 0] += sx * wy * wz * proj
                        gpos[k, 1] += wx * sy * wz * proj
                        gpos[k, 2] += wx * wy * sz * proj
        if want_pos:
            # positions moved by the border clamp do not move the sample
            if not inx:
                gpos[k, 0] = 0.0
            if not iny:
                gpos[k, 1] = 0.0
            if not inz:
                gpos[k, 2] = 0.0
    return gdata, gpos


class _Trilinear(torch.autograd.Function):
    """Spatial-transformer sampling with a hand-written adjoint.

    ``data`` is ``(N, C)`` (flattened grid of ``shape``), ``pos`` is ``(M, 3)``.
    """

    corrupt_adjoint = False  # negative-control switch used by the gradient checks

    @staticmethod
    def forward(ctx, data, pos, shape):
        shape_arr = np.asarray(shape, dtype=np.int64)
        d = np.ascontiguousarray(data.detach().numpy())
        p = np.ascontiguousarray(pos.detach().numpy())
        ctx.save_for_backward(data, pos)
        ctx.shape_arr = shape_arr
        return torch.from_numpy(_tri_forward(d, shape_arr, p))

    @staticmethod
    def backward(ctx, grad_out):
        data, pos = ctx.saved_tensors
        want_data, want_pos = ctx.needs_input_grad[0], ctx.needs_input_grad[1]
        gdata, gpos = _tri_backward(
            np.ascontiguousarray(data.detach().numpy()), ctx.shape_arr,
            np.ascontiguousarray(pos.detach().numpy()),
            np.ascontiguousarray(grad_out.detach().numpy()), want_data, want_pos)
        grad_data = torch.from_numpy(gdata) if want_data else None
        grad_pos = torch.from_numpy(gpos) if want_pos else None
        if grad_pos is not None and _Trilinear.corrupt_adjoint:
            grad_pos = 1.1 * grad_pos
        return grad_data, grad_pos, None


def trilinear_sample(vol, pos) -> torch.Tensor:
    """Sample ``vol`` at voxel-space positions with trilinear interpolation.

    Parameters
    ----------
    vol : tensor, shape (l, w, h) or (l, w, h, C)
        Volume to sample. Channels, if present, are interpolated independently.
    pos : tensor, shape (..., 3)
        Sample positions. Out-of-range positions are clamped to the border.

    Returns
    -------
    tensor, shape (...) or (..., C)
    """
    vol = as_tensor(vol)
    pos = as_tensor(pos)
    if pos.shape[-1] != 3:
        raise ValueError("positions must have a trailing axis of length 3")
    if not torch.isfinite(pos).all():
        raise CorruptFieldError("non-finite sample position (corrupted deformation field?)")
    scalar = vol.ndim == 3
    shape = tuple(vol.shape[:3])
    GridSpec(*shape)
    data = vol.reshape(-1, 1) if scalar else vol.reshape(-1, vol.shape[-1])
    lead = pos.shape[:-1]
    out = _Trilinear.apply(data, pos.reshape(-1, 3), shape)
    return out.reshape(lead) if scalar else out.reshape(*lead, data.shape[1])


def normalize_labels(prob: torch.Tensor) -> torch.Tensor:
    return prob / prob.sum(-1, keepdim=True)


def warp(vol, phi: DeformationField, labels: bool | None = None) -> torch.Tensor:
    """Resample ``vol`` through ``phi``: ``out(x) = vol(x + U(x))``.

    4-D inputs are treated as label probability maps and renormalised per
    voxel unless ``labels=False``; pass ``labels=False`` to warp vector data
    componentwise.
    """
    vol = as_tensor(vol)
    check_same_grid(vol, phi.displacement)
    out = trilinear_sample(vol, phi.positions())
    if labels is None:
        labels = vol.ndim == 4
    return normalize_labels(out) if labels else out


def spatial_gradient(field) -> torch.Tensor:
    """Finite-difference Jacobian of a vector field.

    Central differences in the interior, one-sided differences at the
    borders. Returns shape ``(l, w, h, 3, 3)`` indexed ``[..., component, axis]``.
    """
    field = as_tensor(field)
    GridSpec.of(field)
    parts = []
    for axis in range(3):
        f = field.movedim(axis, 0)
        d = torch.cat([
            (f[1:2] - f[0:1]),
            (f[2:] - f[:-2]) / 2,
            (f[-1:] - f[-2:-1]),
        ], dim=0)
        parts.append(d.movedim(0, axis))
    return torch.stack(parts, dim=-1)


def argmax_labels(prob) -> torch.Tensor:
    """Hard class map; ties resolve to the lowest class index."""
    prob = as_tensor(prob)
    # torch.argmax returns the first maximal index
    return torch.argmax(prob, dim=-1)


def one_hot(classes, c: int) -> torch.Tensor:
    classes = torch.as_tensor(classes).long()
    return torch.nn.functional.one_hot(classes, c).to(DTYPE)
