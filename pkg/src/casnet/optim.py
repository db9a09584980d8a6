"""Gradients, finite-difference verification and the Adam update.

Reverse-mode derivatives come from torch autograd over the pipeline's
operations; the one non-trivial adjoint (trilinear sampling) is written by
hand in :mod:`casnet.volume`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import torch

Params = Mapping[str, torch.Tensor]


def grad(loss_fn: Callable[[Params], torch.Tensor], params: Params) -> tuple[float, dict[str, torch.Tensor]]:
    """Value and exact gradient of ``loss_fn`` with respect to every block."""
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    loss = loss_fn(leaves)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {float(loss.detach())}")
    grads = torch.autograd.grad(loss, list(leaves.values()), allow_unused=True)
    out = {k: (torch.zeros_like(v) if g is None else g) for (k, v), g in zip(leaves.items(), grads)}
    return float(loss.detach()), out


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    probes: int
    step: float
    worst: dict[str, tuple[int, float, float]] = field(default_factory=dict)

    @property
    def worst_error(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def passed(self, tol: float = 1e-6) -> bool:
        return self.worst_error < tol


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


@torch.no_grad()
def _eval(loss_fn, params):
    return float(loss_fn(params))


def grad_check(loss_fn, params: Params, probes: int = 64, step: float = 1e-5,
               seed: int = 0, blocks=None, order: int = 2) -> GradCheckReport:
    """Compare :func:`grad` with central differences at random coordinates.

    ``order=2`` is the three-point stencil; ``order=4`` the five-point one,
    whose O(h^4) truncation error allows a larger step and so less
    round-off on long computations.
    """
    if not 1e-7 <= step <= 1e-3:
        raise ValueError("step must lie in [1e-7, 1e-3]")
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    # (offset, weight) pairs of symmetric differences f(x + kh) - f(x - kh)
    pairs = ((1, 1 / 2),) if order == 2 else ((1, 8 / 12), (2, -1 / 12))
    _, analytic = grad(loss_fn, params)
    rng = np.random.default_rng(seed)
    work = {k: v.detach().clone() for k, v in params.items()}
    errors, worst = {}, {}
    for name in blocks or list(work):
        flat = work[name].view(-1)
        picks = rng.choice(flat.numel(), size=min(probes, flat.numel()), replace=False)
        errors[name] = 0.0
        for i in picks:
            orig = flat[i].item()
            fd = 0.0
            for k, c in pairs:
                flat[i] = orig + k * step
                up = _eval(loss_fn, work)
                flat[i] = orig - k * step
                fd += c * (up - _eval(loss_fn, work))
            flat[i] = orig
            fd /= step
            ga = analytic[name].view(-1)[i].item()
            err = relative_error(ga, fd)
            if err >= errors[name]:
                errors[name] = err
                worst[name] = (int(i), ga, fd)
    return GradCheckReport(errors, len(picks), step, worst)


@dataclass
class Adam:
    """Bias-corrected adaptive-moment optimiser over named parameter blocks.

    ``lr`` may be a single rate or a mapping from block name to rate.
    """

    lr: float | Mapping[str, float] = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def rate(self, name: str) -> float:
        return self.lr[name] if isinstance(self.lr, Mapping) else self.lr

    @torch.no_grad()
    def step(self, params: Params, grads: Params) -> None:
        """Update ``params`` in place."""
        self.step_count += 1
        bc1 = 1 - self.beta1 ** self.step_count
        bc2 = 1 - self.beta2 ** self.step_count
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} != parameter {tuple(p.shape)} for {name}")
            if name not in self.m:
                self.m[name] = torch.zeros_like(p)
                self.v[name] = torch.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m.mul_(self.beta1).add_(g, alpha=1 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1 - self.beta2)
            denom = (v / bc2).sqrt_().add_(self.eps)
            p.addcdiv_(m, denom, value=-self.rate(name) / bc1)


def adam_step(state: Adam, params: Params, grads: Params) -> Adam:
    state.step(params, grads)
    return state
