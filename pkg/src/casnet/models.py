"""Learnable components: intensity segmenter, registration velocity and merge layer."""
from __future__ import annotations

from typing import Protocol

import torch
import torch.nn.functional as F

from .volume import DTYPE, GridSpec, as_tensor, check_same_grid

FEATURES = ("intensity", "neighbour_mean6", "local_var27")


def voxel_features(image) -> torch.Tensor:
    """Per-voxel (intensity, 6-neighbour mean, 3x3x3 variance), edge-replicated.

    Returns shape ``(l, w, h, 3)``.
    """
    image = as_tensor(image)
    x = image[None, None]
    padded = F.pad(x, (1, 1, 1, 1, 1, 1), mode="replicate")[0, 0]
    l, w, h = image.shape
    nb = (padded[:-2, 1:-1, 1:-1] + padded[2:, 1:-1, 1:-1]
          + padded[1:-1, :-2, 1:-1] + padded[1:-1, 2:, 1:-1]
          + padded[1:-1, 1:-1, :-2] + padded[1:-1, 1:-1, 2:]) / 6
    patches = padded.unfold(0, 3, 1).unfold(1, 3, 1).unfold(2, 3, 1).reshape(l, w, h, 27)
    var = patches.var(-1, unbiased=False)
    return torch.stack([image, nb, var], dim=-1)


class SegModel:
    """Softmax classifier over :func:`voxel_features`; ``weight`` is ``(c, 3)``."""

    def __init__(self, c: int, weight=None, bias=None):
        self.c = c
        self.weight = torch.zeros(c, len(FEATURES), dtype=DTYPE) if weight is None else as_tensor(weight)
        self.bias = torch.zeros(c, dtype=DTYPE) if bias is None else as_tensor(bias)

    def parameters(self) -> dict[str, torch.Tensor]:
        return {"ss_weight": self.weight, "ss_bias": self.bias}

    def predict(self, image, features=None) -> torch.Tensor:
        feats = voxel_features(image) if features is None else features
        return torch.softmax(feats @ self.weight.T + self.bias, dim=-1)


def ss_predict(image, model: SegModel) -> torch.Tensor:
    return model.predict(image)


class VelocityPredictor(Protocol):
    """Anything mapping (subject, image, segmentation, atlas pair) to a velocity field."""

    def __call__(self, index: int, image, seg, atlas_image, atlas_labels) -> torch.Tensor: ...


class FreeFieldDRS:
    """Registration velocities held as free per-subject fields.

    The inputs the amortised network would consume are accepted and checked
    but do not enter the computation.
    """

    def __init__(self, grid: GridSpec, n_subjects: int, fields=None):
        if fields is None:
            fields = torch.zeros(n_subjects, *grid.shape, 3, dtype=DTYPE)
        self.fields = as_tensor(fields)
        self.grid = grid

    def parameters(self) -> dict[str, torch.Tensor]:
        return {"drs_fields": self.fields}

    def __call__(self, index, image, seg, atlas_image, atlas_labels) -> torch.Tensor:
        check_same_grid(image, seg, atlas_image, atlas_labels, self.fields[index])
        return self.fields[index]


def drs_velocity(image, seg, atlas_image, atlas_labels, model: VelocityPredictor, index: int = 0):
    return model(index, image, seg, atlas_image, atlas_labels)


class MergeLayer:
    """1x1x1 convolution over the (segmenter, atlas) probability pair, per class."""

    def __init__(self, c: int, w_ss=None, w_drs=None, bias=None, init_weight: float = 0.0):
        fill = lambda v: torch.full((c,), init_weight, dtype=DTYPE) if v is None else as_tensor(v)
        self.c = c
        self.w_ss = fill(w_ss)
        self.w_drs = fill(w_drs)
        self.bias = torch.zeros(c, dtype=DTYPE) if bias is None else as_tensor(bias)

    def parameters(self) -> dict[str, torch.Tensor]:
        return {"merge_w_ss": self.w_ss, "merge_w_drs": self.w_drs, "merge_bias": self.bias}

    def __call__(self, seg, seg_atlas) -> torch.Tensor:
        seg, seg_atlas = as_tensor(seg), as_tensor(seg_atlas)
        if seg.shape != seg_atlas.shape or seg.shape[-1] != self.c:
            raise ValueError(f"merge: shape mismatch {tuple(seg.shape)} vs {tuple(seg_atlas.shape)}")
        return torch.softmax(self.w_ss * seg + self.w_drs * seg_atlas + self.bias, dim=-1)


def merge(seg, seg_atlas, layer: MergeLayer) -> torch.Tensor:
    return layer(seg, seg_atlas)
