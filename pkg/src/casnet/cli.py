"""Command-line interface.

Every subcommand accepts ``--config FILE`` (flat ``key=value``) and one flag
per :class:`~casnet.config.TrainConfig` field; flags override the file.
Exit codes: 0 success, 2 configuration or input error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import torch

from . import io
from .atlas import age_group, conditional_field
from .config import ConfigError, TrainConfig
from .diffeo import IntegrationConfig
from .optim import grad_check
from .phantom import CLASS_NAMES, PhantomSpec, gen_dataset, split_indices
from .pipeline import (
    LOSS_COLUMNS,
    NumericFailure,
    evaluate,
    gradcheck_problem,
    segment,
    train,
    warp_atlas,
)
from .volume import GridSpec

log = logging.getLogger("casnet")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class InputError(Exception):
    """Missing or malformed input files; reported with exit code 2."""


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    g = p.add_argument_group("config overrides")
    for f in fields(TrainConfig):
        g.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, metavar=f.name.upper(),
                       default=None, help=f"override {f.name} (default {f.default})")


def load_config(args) -> TrainConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        return TrainConfig.load(path, **overrides)
    return TrainConfig(**overrides)


def _class_names(c: int):
    return CLASS_NAMES[:c] if c <= len(CLASS_NAMES) else [f"class{k}" for k in range(c)]


# -- subcommands ---------------------------------------------------------------

def cmd_generate_data(args, cfg: TrainConfig) -> int:
    try:
        spec = PhantomSpec(grid=GridSpec.cube(cfg.grid), c=cfg.classes, noise_sd=args.noise_sd,
                           psf_sigma=args.psf_sigma, artifact=args.artifact)
        splits = split_indices(args.n, args.n_val, args.n_test)
        subjects = gen_dataset(args.n, cfg.age_range, cfg.seed, spec, cfg.groups)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    groups = [age_group(s.age, cfg.groups, cfg.age_range) for s in subjects]
    out = io.save_dataset(subjects, args.out or cfg.data_dir, splits, groups)
    print(f"wrote {args.n} subjects to {out}")
    return EXIT_OK


def _load_split(directory, split: str):
    manifest = Path(directory) / "manifest.json"
    if not manifest.exists():
        raise InputError(f"no dataset manifest at {manifest}")
    ids, images, labels, ages = io.load_dataset(directory, split)
    if not ids:
        raise InputError(f"split {split!r} in {directory} is empty")
    return ids, images, labels, ages


def _log_row(entry) -> list[str]:
    vals = [entry.losses[k] for k in LOSS_COLUMNS] + [entry.lambda_i, entry.lambda_l, entry.grad_norm]
    return [str(entry.epoch)] + [repr(float(v)) for v in vals]


def cmd_train(args, cfg: TrainConfig) -> int:
    ids, images, labels, ages = _load_split(cfg.data_dir, "train")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    torch.manual_seed(cfg.seed)
    with open(out / "train_log.csv", "w", newline="") as flog, open(out / "timing.csv", "w", newline="") as ftime:
        wlog, wtime = csv.writer(flog, lineterminator="\n"), csv.writer(ftime, lineterminator="\n")
        wlog.writerow(["epoch", *LOSS_COLUMNS, "lambda_i", "lambda_l", "grad_norm"])
        wtime.writerow(["epoch", "seconds"])

        def on_epoch(entry, model):
            wlog.writerow(_log_row(entry))
            wtime.writerow([entry.epoch, f"{entry.seconds:.3f}"])
            flog.flush()
            ftime.flush()
            if cfg.checkpoint_every and model.epoch % cfg.checkpoint_every == 0:
                io.save_checkpoint(model, out / "checkpoints" / f"epoch_{model.epoch:04d}")
            log.info("epoch %d total %.6g", entry.epoch, entry.losses["total"])

        result = train(cfg, images, labels, ages, on_epoch=on_epoch, subject_ids=ids)
    io.save_checkpoint(result.model, out / "checkpoint")
    print(f"trained {len(ids)} subjects for {cfg.epochs} epochs; checkpoint in {out / 'checkpoint'}")
    return EXIT_OK


def _checkpoint(args, cfg):
    path = Path(args.checkpoint or Path(cfg.out_dir) / "checkpoint")
    if not (path / "manifest.txt").exists():
        raise InputError(f"no checkpoint at {path}")
    return io.load_checkpoint(path)


def cmd_make_atlas(args, cfg: TrainConfig) -> int:
    model = _checkpoint(args, cfg)
    out = Path(args.out or Path(cfg.out_dir) / "atlases")
    out.mkdir(parents=True, exist_ok=True)
    icfg = IntegrationConfig(cfg.T)
    mid = model.grid.shape[2] // 2
    with torch.no_grad():
        for g in range(model.groups.n_groups):
            psi, _ = conditional_field(model.groups, g, icfg)
            image, labels = warp_atlas(model.atlas, psi)
            io.write_vvol(out / f"atlas_group{g}_image.vvol", image, "scalar")
            io.write_vvol(out / f"atlas_group{g}_labels.vvol", labels, "prob")
            io.export_slices(image, 2, mid, out / f"atlas_group{g}_image.pgm", labels=False)
            io.export_slices(labels, 2, mid, out / f"atlas_group{g}_labels.ppm", labels=True)
    print(f"wrote {model.groups.n_groups} conditional atlases to {out}")
    return EXIT_OK


def cmd_segment(args, cfg: TrainConfig) -> int:
    model = _checkpoint(args, cfg)
    path = Path(args.image)
    if not path.exists():
        raise InputError(f"image {path} not found")
    image, kind = io.read_vvol(path)
    if kind != "scalar":
        raise InputError(f"{path} holds a {kind} volume, expected scalar")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = segment(model, image, args.age, cfg)
    for name, prob in (("ss", res.seg), ("drs", res.seg_atlas), ("merged", res.seg_merged)):
        io.write_vvol(out / f"seg_{name}.vvol", prob, "prob")
    io.write_vvol(out / "phi_displacement.vvol", res.phi.displacement, "vector")
    io.export_slices(res.seg_merged, 2, model.grid.shape[2] // 2, out / "seg_merged.ppm", labels=True)
    print(f"segmentation written to {out}")
    return EXIT_OK


def cmd_evaluate(args, cfg: TrainConfig) -> int:
    model = _checkpoint(args, cfg)
    _, images, labels, ages = _load_split(args.data or cfg.data_dir, args.split)
    report = evaluate(model, images, labels, ages, cfg, _class_names(model.n_classes))
    path = Path(args.report or Path(cfg.out_dir) / "eval.csv")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "stat", *report.classes, "overall"])
        for row in report.rows():
            w.writerow(row[:2] + [f"{float(v):.6f}" for v in row[2:]])
    with open(path.with_name(path.stem + "_diagnostics.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["quantity", "value"])
        w.writerow(["negative_jacobian_fraction", f"{report.neg_jacobian_fraction:.8f}"])
        w.writerow(["wall_clock_seconds", f"{report.seconds:.3f}"])
        w.writerow(["subjects", len(images)])
    print(report.table())
    return EXIT_OK


def cmd_export_slices(args, cfg: TrainConfig) -> int:
    path = Path(args.input)
    if not path.exists():
        raise InputError(f"volume {path} not found")
    vol, kind = io.read_vvol(path)
    if kind == "vector":
        raise InputError("vector fields cannot be exported as slices")
    axis = args.axis
    index = vol.shape[axis] // 2 if args.index is None else args.index
    if not 0 <= index < vol.shape[axis]:
        raise InputError(f"slice index {index} out of range [0, {vol.shape[axis]})")
    out = io.export_slices(vol, axis, index, args.out, labels=kind == "prob")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_grad_check(args, cfg: TrainConfig) -> int:
    from .volume import _Trilinear

    cfg = replace(cfg, grid=args.size)
    worst = 0.0
    _Trilinear.corrupt_adjoint = args.corrupt
    try:
        for seed in range(cfg.seed, cfg.seed + args.inits):
            loss_fn, params = gradcheck_problem(args.size, seed=seed, cfg=cfg)
            rep = grad_check(loss_fn, params, args.probes, args.step, seed, order=args.order)
            for name, err in rep.max_rel_error.items():
                print(f"init {seed} {name:<14} max rel error {err:.3e}")
            worst = max(worst, rep.worst_error)
    finally:
        _Trilinear.corrupt_adjoint = False
    ok = worst < args.tol
    print(f"{'PASS' if ok else 'FAIL'}: worst relative error {worst:.3e} (tolerance {args.tol:g})")
    return EXIT_OK if ok else EXIT_NUMERIC


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="casnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write a phantom dataset")
    p.add_argument("--out", help="output directory (default data_dir)")
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--n-val", type=int, default=0)
    p.add_argument("--n-test", type=int, default=8)
    p.add_argument("--noise-sd", type=float, default=0.05)
    p.add_argument("--psf-sigma", type=float, default=0.0, help="Gaussian point-spread width in voxels")
    p.add_argument("--artifact", action="store_true", help="perturb the two central axial slices")
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train on the train split of data_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("make-atlas", help="write one conditional atlas per age group")
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.set_defaults(func=cmd_make_atlas)

    p = sub.add_parser("segment", help="segment one image")
    p.add_argument("--checkpoint")
    p.add_argument("--image", required=True)
    p.add_argument("--age", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("evaluate", help="Dice report on one split")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--split", default="test")
    p.add_argument("--report", help="CSV path (default out_dir/eval.csv)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-slices", help="write one slice of a VVOL volume as PGM/PPM")
    p.add_argument("--input", required=True)
    p.add_argument("--axis", type=int, choices=(0, 1, 2), default=2)
    p.add_argument("--index", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_slices)

    p = sub.add_parser("grad-check", help="full-loss gradient against finite differences")
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--probes", type=int, default=64)
    p.add_argument("--step", type=float, default=1e-3)
    p.add_argument("--order", type=int, choices=(2, 4), default=4)
    p.add_argument("--inits", type=int, default=3, help="random initialisations")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--corrupt", action="store_true", help="negative control: perturbed sampling adjoint")
    p.set_defaults(func=cmd_grad_check)

    for p in sub.choices.values():
        _add_config_flags(p)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args)
        return args.func(args, cfg)
    except (ConfigError, InputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericFailure, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
