"""VVOL volume files, PGM/PPM slice export and checkpoint directories.

VVOL layout: ``key=value`` header lines (``magic``, ``kind``, ``l``, ``w``,
``h``, ``c``) ended by a blank line, then little-endian float64 samples with
the channel varying fastest, then x, then y, then z.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .volume import DTYPE, as_tensor

MAGIC = "VVOL1"
KINDS = ("scalar", "prob", "vector")

# fixed label palette (class index -> RGB); wraps for larger class counts
PALETTE = np.array([
    (0, 0, 0), (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60),
    (250, 190, 212), (0, 128, 128),
], dtype=np.uint8)


class VVOLError(ValueError):
    """Malformed VVOL file."""


def _as_4d(data, kind: str) -> np.ndarray:
    arr = as_tensor(data).detach().numpy()
    if kind == "scalar":
        if arr.ndim != 3:
            raise ValueError("scalar volumes must be 3-D")
        arr = arr[..., None]
    elif arr.ndim != 4 or (kind == "vector" and arr.shape[-1] != 3):
        raise ValueError(f"{kind} volumes must be 4-D" + (" with 3 components" if kind == "vector" else ""))
    return arr


def write_vvol(path, data, kind: str = "scalar") -> None:
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    arr = _as_4d(data, kind)
    l, w, h, c = arr.shape
    header = f"magic={MAGIC}\nkind={kind}\nl={l}\nw={w}\nh={h}\nc={c}\n\n"
    # (l, w, h, c) -> file order z, y, x, channel (channel fastest)
    body = np.ascontiguousarray(arr.transpose(2, 1, 0, 3)).astype("<f8").tobytes()
    Path(path).write_bytes(header.encode("ascii") + body)


def read_vvol(path) -> tuple[torch.Tensor, str]:
    raw = Path(path).read_bytes()
    end = raw.find(b"\n\n")
    if end < 0:
        raise VVOLError(f"{path}: missing header terminator")
    meta = {}
    for line in raw[:end].decode("ascii").splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise VVOLError(f"{path}: bad header line {line!r}")
        meta[key.strip()] = value.strip()
    if meta.get("magic") != MAGIC:
        raise VVOLError(f"{path}: not a VVOL1 file")
    kind = meta.get("kind")
    if kind not in KINDS:
        raise VVOLError(f"{path}: unknown kind {kind!r}")
    try:
        l, w, h, c = (int(meta[k]) for k in ("l", "w", "h", "c"))
    except (KeyError, ValueError) as exc:
        raise VVOLError(f"{path}: incomplete dimensions") from exc
    body = raw[end + 2:]
    if len(body) != 8 * l * w * h * c:
        raise VVOLError(f"{path}: expected {8 * l * w * h * c} data bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype="<f8").reshape(h, w, l, c).transpose(2, 1, 0, 3)
    out = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float64))
    return (out[..., 0] if kind == "scalar" else out), kind


# -- slice images ----------------------------------------------------------

def take_slice(vol, axis: int, index: int) -> np.ndarray:
    arr = as_tensor(vol).detach().numpy()
    if axis not in (0, 1, 2):
        raise ValueError("axis must be 0, 1 or 2")
    if not 0 <= index < arr.shape[axis]:
        raise IndexError(f"slice index {index} out of range [0, {arr.shape[axis]})")
    return np.take(arr, index, axis=axis)


def intensity_slice_pgm(vol, axis: int, index: int) -> bytes:
    sl = take_slice(vol, axis, index)
    lo, hi = float(sl.min()), float(sl.max())
    if hi > lo:
        pix = np.rint((sl - lo) / (hi - lo) * 255)
    else:
        pix = np.full(sl.shape, 128.0)
    rows, cols = pix.shape
    return f"P5\n{cols} {rows}\n255\n".encode("ascii") + pix.astype(np.uint8).tobytes()


def label_slice_ppm(labels, axis: int, index: int) -> bytes:
    """Colour-coded class map of one slice; accepts class maps or probability maps."""
    arr = as_tensor(labels)
    classes = torch.argmax(arr, dim=-1) if arr.ndim == 4 else arr.long()
    sl = take_slice(classes, axis, index).astype(np.int64)
    rgb = PALETTE[sl % len(PALETTE)]
    rows, cols = sl.shape
    return f"P6\n{cols} {rows}\n255\n".encode("ascii") + rgb.tobytes()


def export_slices(vol, axis: int, index: int, path, labels: bool | None = None) -> Path:
    """Write one slice as PGM (intensities) or PPM (labels)."""
    arr = as_tensor(vol)
    if labels is None:
        labels = arr.ndim == 4
    payload = label_slice_ppm(arr, axis, index) if labels else intensity_slice_pgm(arr, axis, index)
    path = Path(path)
    path.write_bytes(payload)
    return path


def read_pnm(path) -> np.ndarray:
    """Minimal reader for the P5/P6 files written above."""
    raw = Path(path).read_bytes()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    cols, rows = (int(v) for v in dims.split())
    if magic == b"P5":
        return np.frombuffer(body, dtype=np.uint8).reshape(rows, cols)
    if magic == b"P6":
        return np.frombuffer(body, dtype=np.uint8).reshape(rows, cols, 3)
    raise ValueError(f"unsupported PNM type {magic!r}")


# -- checkpoints ---------------------------------------------------------------

def _floats(t) -> str:
    return " ".join(repr(float(v)) for v in torch.as_tensor(t).reshape(-1))


def _parse_floats(text: str, shape) -> torch.Tensor:
    vals = [float(v) for v in text.split()]
    return torch.tensor(vals, dtype=DTYPE).reshape(shape)


def save_checkpoint(model, directory) -> Path:
    """Write a model as VVOL fields plus ``manifest.txt``."""
    from .models import FEATURES

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_vvol(d / "atlas_image.vvol", model.atlas.image, "scalar")
    write_vvol(d / "atlas_labels.vvol", model.atlas.labels, "prob")
    for g in range(model.groups.n_groups):
        write_vvol(d / f"group_field_{g}.vvol", model.groups.fields[g], "vector")
    n_subjects = model.drs.fields.shape[0]
    for i in range(n_subjects):
        write_vvol(d / f"drs_field_{i:04d}.vvol", model.drs.fields[i], "vector")
    c = model.n_classes
    lines = {
        "format": "casnet-checkpoint-1",
        "classes": c,
        "features": ",".join(FEATURES),
        "groups": model.groups.n_groups,
        "subjects": n_subjects,
        "epoch": model.epoch,
        "atlas_epoch": model.atlas.epoch,
        "age_min": repr(float(model.age_range[0])),
        "age_max": repr(float(model.age_range[1])),
        "ss_weight": _floats(model.ss.weight),
        "ss_bias": _floats(model.ss.bias),
        "merge_w_ss": _floats(model.merge.w_ss),
        "merge_w_drs": _floats(model.merge.w_drs),
        "merge_bias": _floats(model.merge.bias),
    }
    (d / "manifest.txt").write_text("".join(f"{k}={v}\n" for k, v in lines.items()))
    return d


def load_checkpoint(directory):
    from .atlas import ConditionalParams, GlobalAtlas
    from .config import parse_key_values
    from .models import FreeFieldDRS, MergeLayer, SegModel
    from .pipeline import CASNet

    d = Path(directory)
    manifest = d / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no checkpoint manifest in {d}")
    meta = parse_key_values(manifest.read_text())
    c, n_groups, n_subjects = int(meta["classes"]), int(meta["groups"]), int(meta["subjects"])
    image, _ = read_vvol(d / "atlas_image.vvol")
    labels, _ = read_vvol(d / "atlas_labels.vvol")
    atlas = GlobalAtlas(image, labels, int(meta["atlas_epoch"]))
    groups = ConditionalParams(atlas.grid, n_groups,
                               torch.stack([read_vvol(d / f"group_field_{g}.vvol")[0] for g in range(n_groups)]))
    if n_subjects:
        fields = torch.stack([read_vvol(d / f"drs_field_{i:04d}.vvol")[0] for i in range(n_subjects)])
    else:
        fields = torch.zeros(0, *atlas.grid.shape, 3, dtype=DTYPE)
    ss = SegModel(c, _parse_floats(meta["ss_weight"], (c, -1)), _parse_floats(meta["ss_bias"], (c,)))
    merge = MergeLayer(c, _parse_floats(meta["merge_w_ss"], (c,)), _parse_floats(meta["merge_w_drs"], (c,)),
                       _parse_floats(meta["merge_bias"], (c,)))
    return CASNet(atlas, groups, ss, FreeFieldDRS(atlas.grid, n_subjects, fields), merge,
                  (float(meta["age_min"]), float(meta["age_max"])), int(meta["epoch"]))


# -- datasets on disk ----------------------------------------------------------

def save_dataset(subjects, directory, splits: dict[str, list[int]], groups: list[int]) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    split_of = {i: name for name, idx in splits.items() for i in idx}
    entries = []
    for i, s in enumerate(subjects):
        sid = f"sub{i:04d}"
        write_vvol(d / f"{sid}_image.vvol", s.image, "scalar")
        write_vvol(d / f"{sid}_labels.vvol", s.labels, "prob")
        entries.append({"id": sid, "age": float(s.age), "group": int(groups[i]),
                        "split": split_of[i], "seed": int(s.seed) if s.seed is not None else None,
                        "image": f"{sid}_image.vvol", "labels": f"{sid}_labels.vvol"})
    (d / "manifest.json").write_text(json.dumps({"subjects": entries}, indent=2) + "\n")
    return d


def load_dataset(directory, split: str | None = None):
    """Return ``(ids, images, labels, ages)`` for one split (or all subjects)."""
    d = Path(directory)
    entries = json.loads((d / "manifest.json").read_text())["subjects"]
    if split is not None:
        entries = [e for e in entries if e["split"] == split]
    images = [read_vvol(d / e["image"])[0] for e in entries]
    labels = [read_vvol(d / e["labels"])[0] for e in entries]
    return [e["id"] for e in entries], images, labels, [e["age"] for e in entries]
