import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from dflgcn import kernels
from dflgcn.dif import apply_dif, compute_local_frame, local_frames
from dflgcn.skeleton import SkeletonClip, generate_synthetic_dataset, ntu_topology


def worked_pose(topo):
    pose = np.zeros((topo.num_joints, 3))
    pose[topo.center] = (0, 0, 0)
    pose[topo.chest] = (0, 1, 0)
    pose[topo.lshoulder] = (0.2, 1.4, 0)
    pose[topo.rshoulder] = (-0.2, 1.4, 0)
    return pose


def random_rotation(seed):
    return Rotation.random(random_state=seed).as_matrix()


class TestLocalFrame:
    def test_worked_example(self, tiny_topology):
        f = compute_local_frame(worked_pose(tiny_topology), tiny_topology)
        np.testing.assert_allclose(f.axes, [[0, 0, 1], [0, 1, 0], [-1, 0, 0]], atol=1e-15)
        assert f.origin.tolist() == [0, 0, 0]

    def test_translation_moves_origin_only(self, tiny_topology, rng):
        pose = rng.standard_normal((8, 3))
        shift = np.array([0.3, -2.0, 5.0])
        a = compute_local_frame(pose, tiny_topology)
        b = compute_local_frame(pose + shift, tiny_topology)
        np.testing.assert_allclose(b.origin, a.origin + shift, atol=1e-12)
        np.testing.assert_allclose(b.axes, a.axes, atol=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    def test_rotation_oracle(self, tiny_topology, seed):
        rng = np.random.default_rng(seed)
        pose = rng.standard_normal((8, 3))
        r = random_rotation(seed)
        a = compute_local_frame(pose, tiny_topology).axes
        b = compute_local_frame(pose @ r.T, tiny_topology).axes
        np.testing.assert_allclose(b, a @ r.T, atol=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_orthonormal(self, seed):
        topo = ntu_topology()
        pose = np.random.default_rng(seed).standard_normal((25, 3))
        axes = compute_local_frame(pose, topo).axes
        np.testing.assert_allclose(axes @ axes.T, np.eye(3), atol=1e-9)
        assert np.linalg.det(axes) == pytest.approx(1.0, abs=1e-9)

    def test_degenerate_first_frame_is_identity(self, tiny_topology):
        pose = np.zeros((8, 3))
        assert compute_local_frame(pose, tiny_topology).axes.tolist() == np.eye(3).tolist()

    def test_degenerate_reuses_previous(self, tiny_topology):
        good = compute_local_frame(worked_pose(tiny_topology), tiny_topology)
        collinear = worked_pose(tiny_topology)
        collinear[tiny_topology.rshoulder] = (0, 2, 0)
        collinear[tiny_topology.lshoulder] = (0, 3, 0)
        f = compute_local_frame(collinear + 1.0, tiny_topology, previous=good)
        assert f.axes.tolist() == good.axes.tolist()
        assert f.origin.tolist() == [1.0, 1.0, 1.0]

    def test_non_finite(self, tiny_topology):
        pose = np.zeros((8, 3))
        pose[0, 0] = np.inf
        with pytest.raises(ValueError, match="non-finite"):
            compute_local_frame(pose, tiny_topology)

    def test_frame_sequence_matches_single_frames(self, tiny_clip):
        frames = local_frames(tiny_clip.positions, tiny_clip.topology)
        prev = None
        for pose, f in zip(tiny_clip.positions, frames):
            prev = compute_local_frame(pose, tiny_clip.topology, prev)
            np.testing.assert_allclose(f.axes, prev.axes, atol=1e-14)


class TestApplyDif:
    def test_spine_exactly_zero(self, tiny_clip):
        out = apply_dif(tiny_clip).positions
        assert not np.any(out[:, tiny_clip.topology.center])

    def test_chest_on_y_axis(self, tiny_clip):
        t = tiny_clip.topology
        out = apply_dif(tiny_clip).positions[:, t.chest]
        length = np.linalg.norm(tiny_clip.positions[:, t.chest] - tiny_clip.positions[:, t.center],
                                axis=1)
        np.testing.assert_allclose(out[:, 0], 0, atol=1e-9)
        np.testing.assert_allclose(out[:, 2], 0, atol=1e-9)
        np.testing.assert_allclose(out[:, 1], length, atol=1e-9)

    @pytest.mark.parametrize("seed", range(25))
    def test_rigid_motion_invariance(self, seed):
        rng = np.random.default_rng(seed)
        topo = ntu_topology()
        clip = SkeletonClip(topo, rng.standard_normal((6, 25, 3)))
        r, t = random_rotation(seed), rng.uniform(-5, 5, 3)
        moved = clip.with_positions(clip.positions @ r.T + t)
        np.testing.assert_allclose(apply_dif(moved).positions, apply_dif(clip).positions,
                                   atol=1e-9)

    def test_idempotent(self):
        clip = generate_synthetic_dataset(2, 1, seed=4).clips[0]
        once = apply_dif(clip)
        np.testing.assert_allclose(apply_dif(once).positions, once.positions, atol=1e-9)

    def test_input_not_mutated(self, tiny_clip):
        before = tiny_clip.positions.copy()
        apply_dif(tiny_clip)
        assert tiny_clip.positions.tobytes() == before.tobytes()

    def test_backends_agree(self, tiny_clip):
        pos = tiny_clip.positions.copy()
        pos[3, tiny_clip.topology.chest] = pos[3, tiny_clip.topology.center]  # degenerate
        clip = tiny_clip.with_positions(pos)
        outs = []
        for name in kernels.available_backends():
            with kernels.use_backend(name):
                outs.append(apply_dif(clip).positions)
        for other in outs[1:]:
            np.testing.assert_allclose(other, outs[0], atol=1e-13)
