"""Training objectives: segmentation, registration, combination and regularisation.

Every "L2" term is a mean squared error so the weights keep their meaning
across grid sizes.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .volume import DeformationField, as_tensor, spatial_gradient, warp


@dataclass
class LossWeights:
    """Loss weights with the image/label switch at ``switch_epoch``.

    Before the switch the image term dominates (atlas quality), afterwards
    the label term (segmentation accuracy).
    """

    lambda_i: tuple[float, float] = (2.0, 1.0)
    lambda_l: tuple[float, float] = (1.0, 2.0)
    lambda_g: float = 200.0
    lambda_d: float = 500.0
    lambda_m: float = 200.0
    switch_epoch: int = 200

    def __post_init__(self):
        self.lambda_i = tuple(float(v) for v in self.lambda_i)
        self.lambda_l = tuple(float(v) for v in self.lambda_l)
        values = [*self.lambda_i, *self.lambda_l, self.lambda_g, self.lambda_d, self.lambda_m]
        if any(v < 0 for v in values):
            raise ValueError("loss weights must be non-negative")

    def image_weight(self, epoch: int) -> float:
        return self.lambda_i[epoch >= self.switch_epoch]

    def label_weight(self, epoch: int) -> float:
        return self.lambda_l[epoch >= self.switch_epoch]

    @classmethod
    def constant(cls, lambda_i=1.0, lambda_l=1.0, lambda_g=0.0, lambda_d=0.0, lambda_m=0.0):
        return cls((lambda_i, lambda_i), (lambda_l, lambda_l), lambda_g, lambda_d, lambda_m)


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def mse(a, b) -> torch.Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mse")
    return ((a - b) ** 2).mean()


def seg_loss(S_hat, S) -> torch.Tensor:
    """Mean over voxels and channels of squared label differences."""
    S_hat, S = as_tensor(S_hat), as_tensor(S)
    _same_shape(S_hat, S, "seg_loss")
    return ((S_hat - S) ** 2).mean()


def registration_loss(A, A_s, phi: DeformationField, I, S, weights: LossWeights,
                      epoch: int = 0) -> torch.Tensor:
    """Atlas-to-subject fit in label and image space.

    ``lambda_l * seg_loss(A_s o phi, S) + lambda_i * mse(A o phi, I)``
    """
    A, A_s, I, S = (as_tensor(x) for x in (A, A_s, I, S))
    _same_shape(A, I, "registration_loss image")
    _same_shape(A_s, S, "registration_loss labels")
    label_term = seg_loss(warp(A_s, phi), S)
    image_term = mse(warp(A, phi), I)
    return weights.label_weight(epoch) * label_term + weights.image_weight(epoch) * image_term


def regularization_loss(U, U_bar, weights: LossWeights) -> torch.Tensor:
    """Smoothness, magnitude and mean-displacement penalties on a displacement."""
    U, U_bar = as_tensor(U), as_tensor(U_bar)
    _same_shape(U, U_bar, "regularization_loss")
    grad_term = (spatial_gradient(U) ** 2).mean()
    return (weights.lambda_g * grad_term
            + weights.lambda_d * (U ** 2).mean()
            + weights.lambda_m * (U_bar ** 2).mean())


def total_loss(seg, reg, comb, regularization):
    parts = (seg, reg, comb, regularization)
    for p in parts:
        if not torch.isfinite(torch.as_tensor(p)).all():
            raise FloatingPointError("non-finite loss component")
    return seg + reg + comb + regularization
