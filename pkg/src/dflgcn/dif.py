"""Direction-invariant features: joints expressed in a per-frame body frame.

The frame's origin is the spine joint. ``Y`` points from spine to chest,
``X = Y x (right_shoulder - left_shoulder)`` and ``Z = X x Y``. Rows of
``axes`` are ``X, Y, Z``, so ``axes @ (p - origin)`` gives local coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .skeleton import SkeletonClip, SkeletonTopology

DEGENERATE_NORM = 1e-8


@dataclass(frozen=True)
class LocalFrame:
    origin: np.ndarray  # (3,)
    axes: np.ndarray    # (3, 3), rows X, Y, Z

    def to_local(self, points: np.ndarray) -> np.ndarray:
        return (points - self.origin) @ self.axes.T


def _frame_or_none(frame: np.ndarray, topo: SkeletonTopology):
    spine = frame[topo.center]
    up = frame[topo.chest] - spine
    across = frame[topo.rshoulder] - frame[topo.lshoulder]
    n_up = np.linalg.norm(up)
    x = np.cross(up, across)
    n_x = np.linalg.norm(x)
    # thresholds apply to the un-normalized vectors
    if n_up < DEGENERATE_NORM or n_x < DEGENERATE_NORM:
        return None
    y = up / n_up
    x = x / n_x
    z = np.cross(x, y)
    return np.stack([x, y, z])


def compute_local_frame(frame_positions: np.ndarray, topology: SkeletonTopology,
                        previous: LocalFrame | None = None) -> LocalFrame:
    """Body frame of one ``[V, 3]`` pose.

    On a degenerate pose (collinear spine/chest/shoulders) the previous frame's
    axes are reused, or the identity if there is none; the origin is always
    this pose's spine joint.
    """
    frame_positions = np.asarray(frame_positions, dtype=np.float64)
    if not np.all(np.isfinite(frame_positions)):
        raise ValueError("non-finite joint positions")
    axes = _frame_or_none(frame_positions, topology)
    if axes is None:
        axes = previous.axes if previous is not None else np.eye(3)
    return LocalFrame(frame_positions[topology.center].copy(), axes)


def local_frames(positions: np.ndarray, topology: SkeletonTopology) -> list[LocalFrame]:
    """Body frame of every pose, frames processed in temporal order."""
    positions = np.asarray(positions, dtype=np.float64)
    if not np.all(np.isfinite(positions)):
        raise ValueError("non-finite joint positions")
    t = topology
    axes = kernels.dif_axes(positions, t.center, t.chest, t.lshoulder, t.rshoulder)
    return [LocalFrame(p[t.center].copy(), a) for p, a in zip(positions, axes)]


def apply_dif(clip: SkeletonClip) -> SkeletonClip:
    """``p' = axes_t @ (p - spine_t)`` for every joint of every frame."""
    t = clip.topology
    if not np.all(np.isfinite(clip.positions)):
        raise ValueError("non-finite joint positions")
    local, _ = kernels.dif_transform(clip.positions, t.center, t.chest, t.lshoulder,
                                     t.rshoulder)
    return clip.with_positions(local)
