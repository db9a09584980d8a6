"""End-to-end training, inference and evaluation."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage

from .atlas import (
    ConditionalParams,
    GlobalAtlas,
    MeanDisplacement,
    age_group,
    init_global_atlas,
    update_global_atlas,
)
from .config import TrainConfig
from .diffeo import IntegrationConfig, compose, exp_svf, negative_jacobian_fraction
from .losses import mse, regularization_loss, seg_loss, total_loss
from .models import FreeFieldDRS, MergeLayer, SegModel, voxel_features
from .optim import Adam
from .volume import (
    DTYPE,
    DeformationField,
    GridSpec,
    argmax_labels,
    as_tensor,
    check_label_volume,
    normalize_labels,
    warp,
)

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("L_S", "L_R", "L_C", "L_Reg", "total")


class NumericFailure(FloatingPointError):
    """Training produced a non-finite loss."""


@dataclass
class CASNet:
    """Trained state: global atlas, per-group fields, SS, DRS and merge layer."""

    atlas: GlobalAtlas
    groups: ConditionalParams
    ss: SegModel
    drs: FreeFieldDRS
    merge: MergeLayer
    age_range: tuple[float, float]
    epoch: int = 0

    @property
    def grid(self) -> GridSpec:
        return self.atlas.grid

    @property
    def n_classes(self) -> int:
        return self.ss.c

    def parameters(self) -> dict[str, torch.Tensor]:
        return {"group_fields": self.groups.fields, **self.ss.parameters(),
                **self.drs.parameters(), **self.merge.parameters()}

    def group_of(self, age: float) -> int:
        return age_group(age, self.groups.n_groups, self.age_range)

    @classmethod
    def initialise(cls, images, labels, n_groups: int = 4, age_range=(20.6, 38.2)) -> "CASNet":
        atlas = init_global_atlas(images, labels)
        grid, c = atlas.grid, atlas.labels.shape[-1]
        return cls(atlas, ConditionalParams(grid, n_groups), SegModel(c),
                   FreeFieldDRS(grid, len(images)), MergeLayer(c), tuple(age_range))


def warp_atlas(atlas: GlobalAtlas, pull: DeformationField):
    """Atlas image and labels through one field, sharing a single resampling pass."""
    stacked = torch.cat([atlas.image.unsqueeze(-1), atlas.labels], dim=-1)
    out = warp(stacked, pull, labels=False)
    return out[..., 0], normalize_labels(out[..., 1:])


def reg_scale(grid: GridSpec, units: str) -> torch.Tensor:
    """Per-component factor converting voxel displacements to the regulariser's units."""
    if units == "voxel":
        return torch.ones(3, dtype=DTYPE)
    if units == "normalized":
        return torch.tensor([2.0 / (n - 1) for n in grid.shape], dtype=DTYPE)
    raise ValueError(f"unknown displacement units {units!r}")


@dataclass
class SubjectOutput:
    seg: torch.Tensor          # SS prediction
    seg_atlas: torch.Tensor    # atlas-propagated labels
    seg_merged: torch.Tensor   # merged labels
    image_atlas: torch.Tensor  # atlas image in subject space
    phi: DeformationField
    psi: DeformationField


def forward_subject(model: CASNet, params, index: int, image, features, cfg: IntegrationConfig,
                    psi: DeformationField, velocity=None) -> SubjectOutput:
    """Forward dataflow for one subject given the group deformation ``psi``."""
    ss = SegModel(model.n_classes, params["ss_weight"], params["ss_bias"])
    seg = ss.predict(image, features)
    if velocity is None:
        drs = FreeFieldDRS(model.grid, 0, params["drs_fields"])
        velocity = drs(index, image, seg, model.atlas.image, model.atlas.labels)
    phi = exp_svf(velocity, cfg)
    image_atlas, seg_atlas = warp_atlas(model.atlas, compose(psi, phi))
    layer = MergeLayer(model.n_classes, params["merge_w_ss"], params["merge_w_drs"], params["merge_bias"])
    return SubjectOutput(seg, seg_atlas, layer(seg, seg_atlas), image_atlas, phi, psi)


@dataclass
class EpochLog:
    epoch: int
    losses: dict[str, float]
    lambda_i: float
    lambda_l: float
    grad_norm: float
    seconds: float


@dataclass
class TrainResult:
    model: CASNet
    history: list[EpochLog] = field(default_factory=list)


def _batch_loss(model, params, batch, data, feats, cfg: TrainConfig, epoch: int, ids=None):
    """Mean per-subject loss parts over ``batch`` plus the fields used."""
    weights = cfg.loss_weights()
    icfg = IntegrationConfig(cfg.T)
    psis = {}
    mean_disp = MeanDisplacement()
    scale = reg_scale(model.grid, cfg.reg_units)
    outs = []
    for i in batch:
        g = model.group_of(data[i][2])
        if g not in psis:
            psis[g] = exp_svf(params["group_fields"][g], icfg)
        out = forward_subject(model, params, i, data[i][0], feats[i], icfg, psis[g])
        outs.append(out)
        mean_disp = mean_disp.accumulate(out.phi.displacement * scale)
    u_bar = mean_disp.mean
    parts = {k: 0.0 for k in LOSS_COLUMNS}
    for i, out in zip(batch, outs):
        I, S, _ = data[i]
        l_s = seg_loss(out.seg, S)
        l_r = (weights.label_weight(epoch) * seg_loss(out.seg_atlas, S)
               + weights.image_weight(epoch) * mse(out.image_atlas, I))
        l_c = seg_loss(out.seg_merged, S)
        l_reg = regularization_loss(out.phi.displacement * scale, u_bar, weights)
        try:
            total = total_loss(l_s, l_r, l_c, l_reg)
        except FloatingPointError as exc:
            raise NumericFailure(f"subject {ids[i] if ids else i}, epoch {epoch}: {exc}") from exc
        for k, v in zip(LOSS_COLUMNS, (l_s, l_r, l_c, l_reg, total)):
            parts[k] = parts[k] + v / len(batch)
    return parts


def _learning_rates(cfg: TrainConfig) -> dict[str, float]:
    return {"group_fields": cfg.lr_group, "drs_fields": cfg.lr_field,
            "ss_weight": cfg.lr_ss, "ss_bias": cfg.lr_ss,
            "merge_w_ss": cfg.lr_merge, "merge_w_drs": cfg.lr_merge, "merge_bias": cfg.lr_merge}


@torch.no_grad()
def refresh_atlas(model: CASNet, data, cfg: TrainConfig) -> None:
    """Rebuild the global atlas from all subjects pulled back through the current fields."""
    icfg = IntegrationConfig(cfg.T)
    psi_inv = {}
    fields = []
    for i, (_, _, age) in enumerate(data):
        g = model.group_of(age)
        if g not in psi_inv:
            psi_inv[g] = exp_svf(-model.groups.fields[g], icfg)
        fields.append((exp_svf(-model.drs.fields[i], icfg), psi_inv[g]))
    model.atlas = update_global_atlas(model.atlas, [d[0] for d in data], [d[1] for d in data], fields)


def train(cfg: TrainConfig, images, labels, ages, model: CASNet | None = None,
          on_epoch=None, subject_ids=None) -> TrainResult:
    """Optimise all learnable components on the training subjects.

    Every epoch visits the subjects in fixed order in batches of
    ``cfg.batch_size`` (0 = full batch) and ends with a global atlas refresh.
    """
    images = [as_tensor(i) for i in images]
    labels = [as_tensor(s) for s in labels]
    data = list(zip(images, labels, [float(a) for a in ages]))
    if model is None:
        model = CASNet.initialise(images, labels, cfg.groups, cfg.age_range)
    feats = [voxel_features(i) for i in images]
    params = model.parameters()
    opt = Adam(lr=_learning_rates(cfg))
    n = len(data)
    bs = cfg.batch_size or n
    weights = cfg.loss_weights()
    result = TrainResult(model)
    start_epoch = model.epoch
    for epoch in range(start_epoch, start_epoch + cfg.epochs):
        t0 = time.perf_counter()
        sums = {k: 0.0 for k in LOSS_COLUMNS}
        gnorm = 0.0
        for b0 in range(0, n, bs):
            batch = list(range(b0, min(n, b0 + bs)))
            leaves = {k: v.detach().requires_grad_(True) for k, v in params.items()}
            parts = _batch_loss(model, leaves, batch, data, feats, cfg, epoch, subject_ids)
            total = parts["total"]
            if not torch.isfinite(total):
                raise NumericFailure(f"non-finite loss at epoch {epoch}, batch starting at subject {b0}")
            grads = torch.autograd.grad(total, list(leaves.values()), allow_unused=True)
            grads = {k: torch.zeros_like(v) if g is None else g for (k, v), g in zip(leaves.items(), grads)}
            gnorm += float(sum((g ** 2).sum() for g in grads.values())) ** 0.5
            opt.step(params, grads)
            for k in LOSS_COLUMNS:
                sums[k] += float(parts[k].detach()) * len(batch) / n
        refresh_atlas(model, data, cfg)
        model.epoch = epoch + 1
        entry = EpochLog(epoch, sums, weights.image_weight(epoch), weights.label_weight(epoch),
                         gnorm, time.perf_counter() - t0)
        result.history.append(entry)
        if on_epoch is not None:
            on_epoch(entry, model)
        log.debug("epoch %d total %.6f", epoch, sums["total"])
    return result


# -- inference ---------------------------------------------------------------

@dataclass
class Segmentation:
    seg: torch.Tensor
    seg_atlas: torch.Tensor
    seg_merged: torch.Tensor
    phi: DeformationField
    velocity: torch.Tensor


def register_subject(model: CASNet, image, seg, group: int, cfg: TrainConfig,
                     steps: int | None = None) -> torch.Tensor:
    """Fit a fresh velocity field for an unseen subject with SS, AGS and merge frozen.

    The SS prediction stands in for the unknown labelmap in the label term.
    """
    steps = cfg.test_steps if steps is None else steps
    weights = cfg.loss_weights()
    late = cfg.epochs  # weights in force at the end of training
    icfg = IntegrationConfig(cfg.T)
    with torch.no_grad():
        psi = exp_svf(model.groups.fields[group], icfg)
    V = torch.zeros(*model.grid.shape, 3, dtype=DTYPE)
    scale = reg_scale(model.grid, cfg.reg_units)
    params = {"V": V}
    opt = Adam(lr=cfg.test_lr)
    seg = seg.detach()
    for _ in range(steps):
        leaf = V.detach().requires_grad_(True)
        phi = exp_svf(leaf, icfg)
        image_atlas, seg_atlas = warp_atlas(model.atlas, compose(psi, phi))
        U = phi.displacement * scale
        loss = (weights.image_weight(late) * mse(image_atlas, image)
                + weights.label_weight(late) * seg_loss(seg_atlas, seg)
                + regularization_loss(U, torch.zeros_like(U), _no_mean(weights)))
        (g,) = torch.autograd.grad(loss, [leaf])
        opt.step(params, {"V": g})
    return V


def _no_mean(weights):
    from dataclasses import replace
    return replace(weights, lambda_m=0.0)


def segment(model: CASNet, image, age: float, cfg: TrainConfig, steps: int | None = None) -> Segmentation:
    image = as_tensor(image)
    group = model.group_of(age)
    feats = voxel_features(image)
    with torch.no_grad():
        seg = model.ss.predict(image, feats)
    V = register_subject(model, image, seg, group, cfg, steps)
    icfg = IntegrationConfig(cfg.T)
    with torch.no_grad():
        psi = exp_svf(model.groups.fields[group], icfg)
        out = forward_subject(model, model.parameters(), 0, image, feats, icfg, psi, velocity=V)
    return Segmentation(out.seg, out.seg_atlas, out.seg_merged, out.phi, V)


# -- evaluation --------------------------------------------------------------

def dice(pred, truth, k: int) -> float:
    pred, truth = torch.as_tensor(pred), torch.as_tensor(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"dice: shape mismatch {tuple(pred.shape)} vs {tuple(truth.shape)}")
    p, t = pred == k, truth == k
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / denom


def largest_component_fraction(classes, k: int) -> float:
    """Share of class-``k`` voxels in its largest 6-connected component (1 if absent)."""
    mask = (torch.as_tensor(classes) == k).numpy()
    comp, n = ndimage.label(mask)
    if n == 0:
        return 1.0
    sizes = np.bincount(comp.ravel())[1:]
    return float(sizes.max() / sizes.sum())


VARIANTS = ("SS", "DRS", "CAS-Net")


@dataclass
class EvalReport:
    classes: tuple[str, ...]
    dice: dict[str, np.ndarray]      # variant -> (subjects, classes)
    neg_jacobian_fraction: float
    seconds: float

    def mean(self, variant: str) -> np.ndarray:
        return self.dice[variant].mean(0)

    def sd(self, variant: str) -> np.ndarray:
        return self.dice[variant].std(0)

    def overall(self, variant: str) -> float:
        return float(self.mean(variant).mean())

    def overall_present(self, variant: str, predicted: np.ndarray | None = None) -> float:
        """Overall mean over classes the variant predicts somewhere in the test set."""
        present = self.predicted[variant] if predicted is None else predicted
        means = self.mean(variant)[present]
        return float(means.mean()) if means.size else 0.0

    predicted: dict[str, np.ndarray] = field(default_factory=dict)

    def table(self) -> str:
        head = f"{'Method':<10}" + "".join(f"{c[:10]:>11}" for c in self.classes) + f"{'Overall':>11}"
        lines = [head]
        for v in VARIANTS:
            lines.append(f"{v:<10}" + "".join(f"{100 * m:>11.1f}" for m in self.mean(v))
                         + f"{100 * self.overall(v):>11.1f}")
            lines.append(f"{'(sd)':<10}" + "".join(f"{100 * s:>11.1f}" for s in self.sd(v))
                         + f"{100 * float(self.dice[v].mean(1).std()):>11.1f}")
        lines.append(f"negative-Jacobian fraction: {self.neg_jacobian_fraction:.6f}")
        return "\n".join(lines)

    def rows(self):
        for v in VARIANTS:
            yield [v, "mean", *self.mean(v), self.overall(v)]
            yield [v, "sd", *self.sd(v), float(self.dice[v].mean(1).std())]


def evaluate(model: CASNet, images, labels, ages, cfg: TrainConfig, class_names=None,
             steps: int | None = None) -> EvalReport:
    """Per-class Dice over tissue classes (background excluded) for the three variants."""
    t0 = time.perf_counter()
    c = model.n_classes
    names = tuple(class_names or [f"class{k}" for k in range(c)])[1:]
    scores = {v: [] for v in VARIANTS}
    predicted = {v: np.zeros(c - 1, dtype=bool) for v in VARIANTS}
    neg = []
    for image, lab, age in zip(images, labels, ages):
        out = segment(model, image, age, cfg, steps)
        truth = argmax_labels(as_tensor(lab))
        for v, prob in zip(VARIANTS, (out.seg, out.seg_atlas, out.seg_merged)):
            check_label_volume(prob)
            pred = argmax_labels(prob)
            scores[v].append([dice(pred, truth, k) for k in range(1, c)])
            predicted[v] |= np.array([bool((pred == k).any()) for k in range(1, c)])
        neg.append(negative_jacobian_fraction(out.phi))
    return EvalReport(names, {v: np.array(s) for v, s in scores.items()},
                      float(np.mean(neg)), time.perf_counter() - t0, predicted)


# -- gradient verification -------------------------------------------------------

def _offset_field(rng: np.random.Generator, n: int, offset: float, spread: float, modes: int = 4) -> np.ndarray:
    """Velocity ``offset + smooth variation`` with every component in ``offset +- spread``."""
    x = np.stack(np.meshgrid(*[np.arange(n)] * 3, indexing="ij"), -1).astype(float)
    out = np.full((n, n, n, 3), offset)
    for _ in range(modes):
        omega = rng.uniform(-1.0, 1.0, 3) * np.pi / n
        amp = rng.uniform(-spread, spread, 3) / modes
        out += amp * np.sin((x @ omega)[..., None] + rng.uniform(0, 2 * np.pi, 3))
    return out


def gradcheck_problem(n: int = 8, n_subjects: int = 2, seed: int = 0, cfg: TrainConfig | None = None):
    """Randomly initialised full-pipeline loss on a small random instance.

    Returns ``(loss_fn, params)`` for :func:`casnet.optim.grad_check`.
    Trilinear interpolation has kinks on voxel planes, where central
    differences are meaningless. The random velocities are therefore drawn
    as a small positive offset plus a bounded smooth variation (group
    fields 0.06 +- 0.025, subject fields 0.08 +- 0.03 voxel), which keeps
    the fractional part of every sample position, in every squaring step
    and in the composed pull, strictly inside (0, 1). Small offsets keep
    the regulariser, and with it the round-off in the loss, small.
    """
    cfg = cfg or TrainConfig(grid=n)
    rng = np.random.default_rng(seed)
    lo, hi = cfg.age_range
    ages = np.linspace(lo, hi, n_subjects + 2)[1:-1]
    images = [torch.as_tensor(rng.uniform(0, 1, (n, n, n)), dtype=DTYPE) for _ in ages]
    labels = [torch.softmax(torch.as_tensor(rng.normal(0, 2, (n, n, n, cfg.classes)), dtype=DTYPE), -1)
              for _ in ages]
    model = CASNet.initialise(images, labels, cfg.groups, cfg.age_range)
    shifts = {"group_fields": (0.06, 0.025), "drs_fields": (0.08, 0.03)}
    params = {}
    for name, value in model.parameters().items():
        if name in shifts:
            blocks = [_offset_field(rng, n, *shifts[name]) for _ in range(value.shape[0])]
            params[name] = torch.as_tensor(np.stack(blocks), dtype=DTYPE)
        else:
            params[name] = torch.as_tensor(rng.normal(0.0, 0.5, value.shape), dtype=DTYPE)
    data = list(zip(images, labels, [float(a) for a in ages]))
    feats = [voxel_features(i) for i in images]
    batch = list(range(n_subjects))

    def loss_fn(p):
        return _batch_loss(model, p, batch, data, feats, cfg, 0)["total"]

    return loss_fn, params
