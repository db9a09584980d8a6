"""Independent scalar-loop oracles used across the test modules."""
import math

import numpy as np


def naive_trilinear(vol, p):
    """Trilinear interpolation of one scalar volume at one point, border-clamped."""
    vol = np.asarray(vol)
    shape = vol.shape
    q = [min(max(float(p[a]), 0.0), shape[a] - 1.0) for a in range(3)]
    i0 = [min(int(math.floor(q[a])), shape[a] - 2) for a in range(3)]
    f = [q[a] - i0[a] for a in range(3)]
    total = 0.0
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = ((f[0] if dx else 1 - f[0]) * (f[1] if dy else 1 - f[1])
                     * (f[2] if dz else 1 - f[2]))
                total += w * vol[i0[0] + dx, i0[1] + dy, i0[2] + dz]
    return total


def naive_mean_sq(a, b):
    a, b = np.asarray(a).ravel(), np.asarray(b).ravel()
    s = 0.0
    for x, y in zip(a, b):
        s += (x - y) ** 2
    return s / len(a)


def naive_gradient(U):
    """Per-voxel loop version of the central/one-sided difference Jacobian."""
    U = np.asarray(U)
    shape = U.shape[:3]
    out = np.zeros(shape + (3, 3))
    for idx in np.ndindex(*shape):
        for axis in range(3):
            n = shape[axis]
            i = idx[axis]
            lo, hi = list(idx), list(idx)
            if i == 0:
                hi[axis] = 1
                d = U[tuple(hi)] - U[idx]
            elif i == n - 1:
                lo[axis] = n - 2
                d = U[idx] - U[tuple(lo)]
            else:
                lo[axis], hi[axis] = i - 1, i + 1
                d = (U[tuple(hi)] - U[tuple(lo)]) / 2
            out[idx + (slice(None), axis)] = d
    return out


def smooth_field(n, seed, amp=1.0):
    """Smooth random vector field from a few Gaussian bumps (numpy only)."""
    rng = np.random.default_rng(seed)
    x = np.stack(np.meshgrid(*[np.arange(n)] * 3, indexing="ij"), -1).astype(float)
    out = np.zeros((n, n, n, 3))
    for _ in range(3):
        c = rng.uniform(0.3 * n, 0.7 * n, 3)
        s = rng.uniform(0.25 * n, 0.4 * n)
        out += rng.normal(0, 1, 3) * np.exp(-((x - c) ** 2).sum(-1, keepdims=True) / (2 * s * s))
    return amp * out / np.abs(out).max()


def interior(t, margin=4):
    """Voxels at least ``margin`` voxels from every face."""
    return t[margin:-margin, margin:-margin, margin:-margin]
