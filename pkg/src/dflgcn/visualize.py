"""Input-gradient heat maps for the segments chosen by the DFL branch.

For every selected segment the summed pooled feature is backpropagated to the
network input. The gradient magnitude averaged over joints and coordinates
gives one curve over frames; averaged over coordinates and over the frames of
the segment's receptive field it gives one value per joint.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .heads import DflModel, segment_bounds
from .nn import ShapeError, as_tensor


@dataclass
class SegmentHeat:
    slot: int
    segment: int
    feature_frames: tuple[int, int]   # [a, b) on the backbone output axis
    receptive_field: tuple[int, int]  # [lo, hi) on the input axis
    curve: np.ndarray                 # [T]
    joint_map: np.ndarray             # [V]


def saliency_maps(model: DflModel, x: np.ndarray) -> list[SegmentHeat]:
    """Heat maps for one prepared clip ``x[3, T, V]`` (batch dimension optional)."""
    x = as_tensor(x)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[0] != 1:
        raise ShapeError(f"expected a single clip [C, T, V], got {x.shape}")
    if x.shape[1] != model.cfg.in_channels or x.shape[3] != model.graph.num_joints:
        raise ShapeError(f"clip shape {x.shape[1:]} does not match the model "
                         f"({model.cfg.in_channels} channels, {model.graph.num_joints} joints)")
    model.eval()
    rec = model.forward(x, branch_mode="dfl")
    f_shape = model.backbone.activations[-1].shape
    _, c, t_out, v = f_shape
    bounds = segment_bounds(t_out, model.dfl.n)
    maps = []
    for slot, seg in enumerate(rec.selected[0]):
        a, b = bounds[int(seg)]
        df = np.zeros(f_shape)
        df[:, :, a:b, :] = 1.0 / ((b - a) * v)
        model.zero_grad()
        dx = np.abs(model.backbone.backward(df)[0])  # [C, T, V]
        lo, hi = model.backbone.receptive_field(a, b, x.shape[2])
        maps.append(SegmentHeat(slot, int(seg), (a, b), (lo, hi),
                                dx.mean(axis=(0, 2)), dx[:, lo:hi, :].mean(axis=(0, 1))))
    model.zero_grad()
    return maps


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM, scaled so the maximum maps to 255 (all-zero stays black)."""
    image = np.atleast_2d(np.asarray(image, dtype=np.float64))
    if np.any(image < 0) or not np.all(np.isfinite(image)):
        raise ValueError("PGM values must be finite and non-negative")
    peak = image.max()
    scaled = np.zeros(image.shape) if peak == 0 else image / peak * 255.0
    pixels = np.round(scaled).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][:w * h], dtype=np.uint8).reshape(h, w)


def export_maps(maps: list[SegmentHeat], out_dir, joint_names=None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not maps:
        raise ValueError("no heat maps to export")
    written = []
    curves = out / "heat_curves.csv"
    with open(curves, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slot", "segment", "rf_lo", "rf_hi", "frame", "heat"])
        for m in maps:
            for t, h in enumerate(m.curve):
                w.writerow([m.slot, m.segment, *m.receptive_field, t, repr(float(h))])
    written.append(curves)
    joints = out / "joint_maps.csv"
    names = joint_names or [str(j) for j in range(len(maps[0].joint_map))]
    with open(joints, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slot", "segment", "joint", "name", "heat"])
        for m in maps:
            for j, h in enumerate(m.joint_map):
                w.writerow([m.slot, m.segment, j, names[j], repr(float(h))])
    written.append(joints)
    for m in maps:
        p = out / f"curve_slot{m.slot}.pgm"
        write_pgm(p, m.curve[None, :])
        written.append(p)
        p = out / f"joints_slot{m.slot}.pgm"
        write_pgm(p, m.joint_map[None, :])
        written.append(p)
    p = out / "curves.pgm"
    write_pgm(p, np.stack([m.curve for m in maps]))
    written.append(p)
    return written
