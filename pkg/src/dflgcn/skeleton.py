"""Skeleton clips: data model, file formats, resampling, noise, augmentation,
and a procedural synthetic action dataset."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .graph import TopologyError


class ClipParseError(ValueError):
    pass


class EmptyClipError(ClipParseError):
    pass


@dataclass(frozen=True)
class SkeletonTopology:
    names: tuple[str, ...]
    parent: tuple[int, ...]
    center: int
    chest: int
    lshoulder: int
    rshoulder: int

    def __post_init__(self):
        v = len(self.parent)
        if len(self.names) != v:
            raise TopologyError(f"{len(self.names)} names for {v} joints")
        roots = [i for i, p in enumerate(self.parent) if p == -1]
        if len(roots) != 1:
            raise TopologyError(f"topology needs exactly one root, found {roots}")
        for i, p in enumerate(self.parent):
            if p != -1 and not 0 <= p < v:
                raise TopologyError(f"joint {i} has invalid parent {p}")
        for i in range(v):
            seen, j = set(), i
            while j != -1:
                if j in seen:
                    raise TopologyError(f"parent links of joint {i} form a cycle")
                seen.add(j)
                j = self.parent[j]
        named = (self.center, self.chest, self.lshoulder, self.rshoulder)
        if v >= 4:
            if len(set(named)) != 4 or not all(0 <= k < v for k in named):
                raise TopologyError(f"reference joints {named} must be distinct and < {v}")
        elif not all(0 <= k < v for k in named):
            raise TopologyError(f"reference joints {named} out of range for {v} joints")

    @property
    def num_joints(self) -> int:
        return len(self.parent)

    def to_dict(self) -> dict:
        return {"names": list(self.names), "parent": list(self.parent),
                "center": self.center, "chest": self.chest,
                "lshoulder": self.lshoulder, "rshoulder": self.rshoulder}

    @classmethod
    def from_dict(cls, d: dict) -> "SkeletonTopology":
        return cls(tuple(d["names"]), tuple(int(p) for p in d["parent"]), int(d["center"]),
                   int(d["chest"]), int(d["lshoulder"]), int(d["rshoulder"]))

    def descendants(self, joint: int) -> list[int]:
        out = [joint]
        for j in range(self.num_joints):
            k = j
            while k != -1 and k != joint:
                k = self.parent[k]
            if k == joint and j != joint:
                out.append(j)
        return out


NTU_JOINT_NAMES = (
    "SpineBase", "SpineMid", "Neck", "Head",
    "ShoulderLeft", "ElbowLeft", "WristLeft", "HandLeft",
    "ShoulderRight", "ElbowRight", "WristRight", "HandRight",
    "HipLeft", "KneeLeft", "AnkleLeft", "FootLeft",
    "HipRight", "KneeRight", "AnkleRight", "FootRight",
    "SpineShoulder", "HandTipLeft", "ThumbLeft", "HandTipRight", "ThumbRight",
)
NTU_PARENTS = (-1, 0, 20, 2, 20, 4, 5, 6, 20, 8, 9, 10, 0, 12, 13, 14,
               0, 16, 17, 18, 1, 7, 7, 11, 11)


def ntu_topology() -> SkeletonTopology:
    return SkeletonTopology(NTU_JOINT_NAMES, NTU_PARENTS, center=1, chest=20,
                            lshoulder=4, rshoulder=8)


@dataclass
class SkeletonClip:
    topology: SkeletonTopology
    positions: np.ndarray          # [T, V, 3], meters
    label: int | None = None
    subject_id: int | None = None
    camera_id: int | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        p = self.positions
        if p.ndim != 3 or p.shape[2] != 3 or p.shape[1] != self.topology.num_joints:
            raise ValueError(f"positions shape {p.shape} does not match "
                             f"[T, {self.topology.num_joints}, 3]")
        if p.shape[0] < 2:
            raise ValueError(f"clip needs at least 2 frames, got {p.shape[0]}")
        if not np.all(np.isfinite(p)):
            raise ValueError("clip positions must be finite")

    @property
    def num_frames(self) -> int:
        return self.positions.shape[0]

    def with_positions(self, positions: np.ndarray) -> "SkeletonClip":
        return replace(self, positions=positions)


@dataclass
class Dataset:
    clips: list[SkeletonClip]
    class_count: int
    split: str = "train"
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        for i, c in enumerate(self.clips):
            if c.label is None or not 0 <= c.label < self.class_count:
                raise ValueError(f"clip {i} label {c.label} not in [0, {self.class_count})")

    def __len__(self):
        return len(self.clips)

    @property
    def labels(self) -> np.ndarray:
        return np.array([c.label for c in self.clips], dtype=np.int64)

    def subset(self, indices, split: str | None = None) -> "Dataset":
        names = [self.names[i] for i in indices] if self.names else []
        return Dataset([self.clips[i] for i in indices], self.class_count,
                       split or self.split, names)

    def map(self, fn) -> "Dataset":
        return Dataset([fn(c) for c in self.clips], self.class_count, self.split, list(self.names))


# -- file formats --------------------------------------------------------------

def clip_to_json(clip: SkeletonClip) -> dict:
    d = {"topology": clip.topology.to_dict(), "label": clip.label,
         "frames": clip.positions.tolist()}
    if clip.subject_id is not None:
        d["subject_id"] = clip.subject_id
    if clip.camera_id is not None:
        d["camera_id"] = clip.camera_id
    return d


def write_clip_file(clip: SkeletonClip, path) -> None:
    # json writes floats with repr(), which round-trips float64 exactly
    Path(path).write_text(json.dumps(clip_to_json(clip)))


def _parse_json_clip(text: str, path) -> SkeletonClip:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ClipParseError(f"{path}:{e.lineno}: invalid JSON: {e.msg}") from e
    try:
        topo = SkeletonTopology.from_dict(d["topology"])
        frames = np.asarray(d["frames"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as e:
        raise ClipParseError(f"{path}: malformed clip: {e}") from e
    if frames.ndim != 3 or frames.shape[1:] != (topo.num_joints, 3):
        raise ClipParseError(f"{path}: frames shape {frames.shape}, expected "
                             f"[T, {topo.num_joints}, 3]")
    if frames.shape[0] == 0:
        raise EmptyClipError(f"{path}: clip has no frames")
    label = d.get("label")
    try:
        return SkeletonClip(topo, frames, None if label is None else int(label),
                            d.get("subject_id"), d.get("camera_id"))
    except ValueError as e:
        raise ClipParseError(f"{path}: {e}") from e


def _parse_ntu(text: str, path, topology: SkeletonTopology) -> SkeletonClip:
    """NTU ``.skeleton`` text: frame count, then per frame a body count and per
    body an info line, a joint count and one 12-value line per joint."""
    lines = text.splitlines()
    pos = 0

    def take(what):
        nonlocal pos
        while pos < len(lines) and not lines[pos].strip():
            pos += 1
        if pos >= len(lines):
            raise ClipParseError(f"{path}:{pos + 1}: unexpected end of file, expected {what}")
        pos += 1
        return pos, lines[pos - 1].split()

    def take_int(what):
        lineno, tok = take(what)
        if len(tok) != 1:
            raise ClipParseError(f"{path}:{lineno}: expected {what}, got {len(tok)} fields")
        try:
            return int(tok[0])
        except ValueError:
            raise ClipParseError(f"{path}:{lineno}: expected integer {what}, got {tok[0]!r}")

    n_frames = take_int("frame count")
    v = topology.num_joints
    frames = []
    for f in range(n_frames):
        n_bodies = take_int(f"body count of frame {f}")
        first = None
        for b in range(n_bodies):
            take(f"body info line (frame {f}, body {b})")
            n_joints = take_int("joint count")
            if n_joints != v:
                raise ClipParseError(f"{path}:{pos}: {n_joints} joints, topology has {v}")
            joints = np.empty((v, 3))
            for j in range(v):
                lineno, tok = take(f"joint {j} line")
                if len(tok) != 12:
                    raise ClipParseError(f"{path}:{lineno}: expected 12 values, got {len(tok)}")
                try:
                    joints[j] = [float(t) for t in tok[:3]]
                except ValueError:
                    raise ClipParseError(f"{path}:{lineno}: non-numeric joint coordinates")
            if b == 0:
                first = joints
        frames.append(first)
    if n_frames == 0 or all(fr is None for fr in frames):
        raise EmptyClipError(f"{path}: no bodies in any frame")
    if any(fr is None for fr in frames):
        missing = [i for i, fr in enumerate(frames) if fr is None]
        raise ClipParseError(f"{path}: frames without a body: {missing[:10]}")
    positions = np.stack(frames)
    if len(positions) < 2:
        positions = np.concatenate([positions, positions])
    return SkeletonClip(topology, positions)


def parse_clip_file(path, format: str = "json", topology: SkeletonTopology | None = None
                    ) -> SkeletonClip:
    path = Path(path)
    text = path.read_text()
    if format == "json":
        return _parse_json_clip(text, path)
    if format == "ntu":
        return _parse_ntu(text, path, topology or ntu_topology())
    raise ValueError(f"unknown clip format {format!r}")


def write_manifest(path, rows) -> None:
    """``rows`` are ``(relative_path, label, split)`` tuples."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "label", "split"])
        for r in rows:
            w.writerow(r)


def read_manifest(path) -> list[tuple[str, int, str]]:
    with open(path, newline="") as fh:
        return [(r["path"], int(r["label"]), r["split"]) for r in csv.DictReader(fh)]


def save_dataset(directory, splits: dict[str, Dataset]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for split, ds in splits.items():
        for i, clip in enumerate(ds.clips):
            name = ds.names[i] if ds.names else f"{split}_{i:05d}"
            rel = f"{name}.json"
            write_clip_file(clip, directory / rel)
            rows.append((rel, clip.label, split))
    manifest = directory / "manifest.csv"
    write_manifest(manifest, rows)
    return manifest


def load_dataset(directory, class_count: int | None = None) -> dict[str, Dataset]:
    directory = Path(directory)
    rows = read_manifest(directory / "manifest.csv")
    if class_count is None:
        class_count = max(r[1] for r in rows) + 1
    by_split: dict[str, list] = {}
    for rel, label, split in rows:
        clip = parse_clip_file(directory / rel)
        clip.label = label
        by_split.setdefault(split, []).append((Path(rel).stem, clip))
    return {s: Dataset([c for _, c in items], class_count, s, [n for n, _ in items])
            for s, items in by_split.items()}


# -- clip operations -------------------------------------------------------------

def resample_uniform(clip: SkeletonClip, target_frames: int = 100) -> SkeletonClip:
    """Linear interpolation onto ``target_frames`` frames; endpoints preserved."""
    t = clip.num_frames
    if t < 2:
        raise ValueError(f"resampling needs at least 2 frames, got {t}")
    if target_frames < 2:
        raise ValueError(f"target length must be >= 2, got {target_frames}")
    src = np.arange(target_frames) * (t - 1) / (target_frames - 1)
    lo = np.minimum(np.floor(src).astype(np.int64), t - 2)
    w = (src - lo)[:, None, None]
    p = clip.positions
    out = (1.0 - w) * p[lo] + w * p[lo + 1]
    # exact endpoints regardless of rounding in the weights
    out[0] = p[0]
    out[-1] = p[-1]
    if t == target_frames:
        out = p.copy()
    return clip.with_positions(out)


def add_gaussian_noise(clip: SkeletonClip, sigma: float, seed) -> SkeletonClip:
    if sigma < 0:
        raise ValueError(f"noise sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return clip.with_positions(clip.positions.copy())
    rng = np.random.default_rng(seed)
    return clip.with_positions(clip.positions + rng.normal(0.0, sigma, clip.positions.shape))


def yaw_matrix(angle: float) -> np.ndarray:
    """Rotation about the vertical (+Y) axis."""
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@dataclass(frozen=True)
class AugmentParams:
    max_yaw_deg: float = 30.0
    max_translation: float = 0.5
    min_fragment: int = 2


@dataclass(frozen=True)
class RigidTransformLog:
    start: int
    stop: int
    rotation: np.ndarray
    pivot: np.ndarray
    translation: np.ndarray

    def inverse_apply(self, positions: np.ndarray) -> np.ndarray:
        out = positions.copy()
        frag = out[self.start:self.stop] - self.translation - self.pivot
        out[self.start:self.stop] = frag @ self.rotation + self.pivot
        return out


def augment_translate_rotate(clip: SkeletonClip, seed, params: AugmentParams = AugmentParams(),
                             return_log: bool = False):
    """Rigidly move a random contiguous fragment: yaw about the vertical axis
    through the fragment's first-frame centre joint, then translate."""
    rng = np.random.default_rng(seed)
    t = clip.num_frames
    length = int(rng.integers(min(params.min_fragment, t), t + 1))
    start = int(rng.integers(0, t - length + 1))
    stop = start + length
    yaw = math.radians(rng.uniform(-params.max_yaw_deg, params.max_yaw_deg))
    shift = rng.uniform(-params.max_translation, params.max_translation, size=3)
    rot = yaw_matrix(yaw)
    pivot = clip.positions[start, clip.topology.center].copy()
    pivot[1] = 0.0  # vertical axis through the centre joint
    out = clip.positions.copy()
    out[start:stop] = (out[start:stop] - pivot) @ rot.T + pivot + shift
    new = clip.with_positions(out)
    if return_log:
        return new, RigidTransformLog(start, stop, rot, pivot, shift)
    return new


# -- synthetic dataset -------------------------------------------------------------

# Rest pose, body frame: +Y up, the body faces +Z, the body's left is +X.
_REST_POSE = np.array([
    [0.00, 1.00, 0.00],   # SpineBase
    [0.00, 1.25, 0.00],   # SpineMid
    [0.00, 1.55, 0.00],   # Neck
    [0.00, 1.72, 0.02],   # Head
    [0.20, 1.48, 0.00],   # ShoulderLeft
    [0.24, 1.20, 0.00],   # ElbowLeft
    [0.26, 0.95, 0.02],   # WristLeft
    [0.27, 0.88, 0.03],   # HandLeft
    [-0.20, 1.48, 0.00],  # ShoulderRight
    [-0.24, 1.20, 0.00],  # ElbowRight
    [-0.26, 0.95, 0.02],  # WristRight
    [-0.27, 0.88, 0.03],  # HandRight
    [0.10, 0.95, 0.00],   # HipLeft
    [0.11, 0.52, 0.02],   # KneeLeft
    [0.11, 0.08, 0.00],   # AnkleLeft
    [0.12, 0.02, 0.10],   # FootLeft
    [-0.10, 0.95, 0.00],  # HipRight
    [-0.11, 0.52, 0.02],  # KneeRight
    [-0.11, 0.08, 0.00],  # AnkleRight
    [-0.12, 0.02, 0.10],  # FootRight
    [0.00, 1.48, 0.00],   # SpineShoulder
    [0.28, 0.80, 0.04],   # HandTipLeft
    [0.25, 0.87, 0.06],   # ThumbLeft
    [-0.28, 0.80, 0.04],  # HandTipRight
    [-0.25, 0.87, 0.06],  # ThumbRight
])

# limb group -> (pivot joint, joints moved); torso moves the upper body about SpineMid
LIMB_GROUPS = {
    "right_arm": (8, (9, 10, 11, 23, 24)),
    "left_arm": (4, (5, 6, 7, 21, 22)),
    "right_leg": (16, (17, 18, 19)),
    "left_leg": (12, (13, 14, 15)),
    "torso": (1, (2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 20, 21, 22, 23, 24)),
}

# rotation axes in the body frame; the sign picks the direction of motion
_AXES = {
    "sideways_left": np.array([0.0, 0.0, 1.0]),    # abduct a left limb outward
    "sideways_right": np.array([0.0, 0.0, -1.0]),  # abduct a right limb outward
    "forward": np.array([-1.0, 0.0, 0.0]),         # swing forward (+Z)
}


@dataclass(frozen=True)
class ActionClass:
    name: str
    groups: tuple[str, ...]
    axis: str
    profile: str
    amplitude: float  # radians


ACTION_CLASSES = (
    ActionClass("right_arm_raise_side", ("right_arm",), "sideways_right", "early", 2.2),
    ActionClass("right_arm_forward", ("right_arm",), "forward", "early", 1.6),
    ActionClass("left_arm_raise_side", ("left_arm",), "sideways_left", "late", 2.2),
    ActionClass("both_arms_forward", ("left_arm", "right_arm"), "forward", "double", 1.5),
    ActionClass("left_leg_kick", ("left_leg",), "forward", "early", 1.0),
    ActionClass("right_leg_side_kick", ("right_leg",), "sideways_right", "late", 0.8),
    ActionClass("torso_bend", ("torso",), "forward", "early", 0.8),
    ActionClass("right_arm_raise_side_late", ("right_arm",), "sideways_right", "late", 2.2),
    ActionClass("left_arm_forward_double", ("left_arm",), "forward", "double", 1.6),
    ActionClass("left_leg_side_kick", ("left_leg",), "sideways_left", "double", 0.8),
    ActionClass("torso_bend_side", ("torso",), "sideways_right", "late", 0.5),
    ActionClass("right_leg_kick_double", ("right_leg",), "forward", "double", 1.0),
)


def _bump(u: np.ndarray, center: float, width: float) -> np.ndarray:
    return np.exp(-0.5 * ((u - center) / width) ** 2)


def phase_envelope(profile: str, u: np.ndarray) -> np.ndarray:
    if profile == "early":
        return _bump(u, 0.3, 0.12)
    if profile == "late":
        return _bump(u, 0.7, 0.12)
    if profile == "double":
        return _bump(u, 0.25, 0.08) + _bump(u, 0.75, 0.08)
    raise ValueError(f"unknown phase profile {profile!r}")


def _axis_angle(axis: np.ndarray, angle: np.ndarray) -> np.ndarray:
    """Rodrigues rotation matrices ``[T, 3, 3]`` for a fixed unit axis."""
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    s = np.sin(angle)[:, None, None]
    c = np.cos(angle)[:, None, None]
    return np.eye(3) + s * k + (1 - c) * (k @ k)


def _synth_clip(topo: SkeletonTopology, cls: ActionClass, label: int, frames: int,
                rng: np.random.Generator) -> SkeletonClip:
    u = np.linspace(0.0, 1.0, frames)
    speed = rng.uniform(0.8, 1.2)
    shift = rng.uniform(-0.08, 0.08)
    warped = np.clip((u - 0.5) * speed + 0.5 + shift, 0.0, 1.0)
    env = phase_envelope(cls.profile, warped)
    pos = np.broadcast_to(_REST_POSE[:topo.num_joints], (frames, topo.num_joints, 3)).copy()
    pos *= rng.uniform(0.9, 1.1)  # body size
    # idle sway shared by every class
    sway = 0.05 * np.sin(2 * np.pi * (u * rng.uniform(0.5, 1.5) + rng.uniform()))
    for group in cls.groups:
        pivot, moved = LIMB_GROUPS[group]
        amp = cls.amplitude * rng.uniform(0.85, 1.15)
        rot = _axis_angle(_AXES[cls.axis], amp * env)
        rel = pos[:, moved, :] - pos[:, pivot:pivot + 1, :]
        pos[:, moved, :] = np.einsum("tij,tvj->tvi", rot, rel) + pos[:, pivot:pivot + 1, :]
    upper = LIMB_GROUPS["torso"][1]
    rel = pos[:, upper, :] - pos[:, 1:2, :]
    rot = _axis_angle(np.array([0.0, 0.0, 1.0]), sway)
    pos[:, upper, :] = np.einsum("tij,tvj->tvi", rot, rel) + pos[:, 1:2, :]
    pos += rng.normal(0.0, 0.005, pos.shape)
    yaw = rng.uniform(0.0, 2 * np.pi)
    offset = np.array([rng.uniform(-1, 1), 0.0, rng.uniform(2.0, 4.0)])
    pos = pos @ yaw_matrix(yaw).T + offset
    return SkeletonClip(topo, pos, label)


def generate_synthetic_dataset(class_count: int = 8, clips_per_class: int = 40,
                               num_joints: int = 25, seed: int = 0,
                               frames: int = 100) -> Dataset:
    """Procedural single-actor actions on the 25-joint NTU skeleton.

    Each class moves one limb group along a body-relative direction with an
    early, late or double-burst timing. Every clip gets a random global yaw in
    [0, 2pi), random translation, +-20% speed and +-15% amplitude jitter.
    Clip ``i`` of class ``k`` is seeded from ``(seed, k, i)`` only, so output
    does not depend on generation order.
    """
    if class_count < 2:
        raise ValueError(f"need at least 2 classes, got {class_count}")
    if class_count > len(ACTION_CLASSES):
        raise ValueError(f"at most {len(ACTION_CLASSES)} synthetic classes available")
    if num_joints != 25:
        raise ValueError("synthetic generator supports the 25-joint NTU skeleton only")
    topo = ntu_topology()
    clips, names = [], []
    for k in range(class_count):
        for i in range(clips_per_class):
            rng = np.random.default_rng([seed, k, i])
            clips.append(_synth_clip(topo, ACTION_CLASSES[k], k, frames, rng))
            names.append(f"c{k:02d}_{i:04d}")
    return Dataset(clips, class_count, "train", names)


def stratified_split(ds: Dataset, val_fraction: float = 0.25, seed: int = 0
                     ) -> tuple[Dataset, Dataset]:
    rng = np.random.default_rng(seed)
    labels = ds.labels
    train_idx, val_idx = [], []
    for k in range(ds.class_count):
        idx = np.flatnonzero(labels == k)
        idx = idx[rng.permutation(len(idx))]
        n_val = int(round(val_fraction * len(idx)))
        val_idx.extend(idx[:n_val].tolist())
        train_idx.extend(idx[n_val:].tolist())
    return ds.subset(sorted(train_idx), "train"), ds.subset(sorted(val_idx), "val")


def stratified_subsample(ds: Dataset, fraction: float, seed: int = 0) -> Dataset:
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1:
        return ds
    rng = np.random.default_rng(seed)
    labels = ds.labels
    keep = []
    for k in range(ds.class_count):
        idx = np.flatnonzero(labels == k)
        if len(idx) == 0:
            continue
        n = int(round(fraction * len(idx)))
        if n == 0:
            raise ValueError(f"fraction {fraction} leaves no samples of class {k}")
        keep.extend(idx[np.sort(rng.permutation(len(idx))[:n])].tolist())
    return ds.subset(sorted(keep))
