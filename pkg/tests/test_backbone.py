import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dflgcn.backbone import (Backbone, BackboneConfig, EsaBlock, StgcnBlock, StgcnBlockConfig,
                             default_blocks)
from dflgcn.dif import apply_dif
from dflgcn.graph import build_graph, build_graph_from_edges
from dflgcn.nn import ShapeError, grad_check
from dflgcn.skeleton import SkeletonClip, ntu_topology


@pytest.fixture(scope="module")
def ntu_graph():
    return build_graph(ntu_topology())


@pytest.fixture
def chain5():
    return build_graph_from_edges(5, [(0, 1), (1, 2), (2, 3), (3, 4)], center=2)


class TestConfig:
    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            StgcnBlockConfig(3, 4, temporal_kernel=4)

    def test_channels_must_chain(self):
        with pytest.raises(ValueError, match="chain"):
            BackboneConfig([StgcnBlockConfig(3, 8), StgcnBlockConfig(4, 8)])

    def test_default_blocks(self):
        blocks = default_blocks()
        assert [(b.in_channels, b.out_channels, b.temporal_stride) for b in blocks] == [
            (3, 16, 1), (16, 16, 1), (16, 32, 2), (32, 64, 2)]
        assert not blocks[0].residual and all(b.residual for b in blocks[1:])


class TestStgcnBlock:
    def test_zero_convs_give_relu_of_input(self, chain5, rng):
        block = StgcnBlock(chain5, StgcnBlockConfig(4, 4), rng)
        block.gcn.params["weight"][:] = 0
        block.tcn.params["weight"][:] = 0
        x = rng.standard_normal((2, 4, 6, 5))
        np.testing.assert_array_equal(block.forward(x), np.maximum(x, 0))

    def test_stride_two_halves_length(self, ntu_graph, rng):
        block = StgcnBlock(ntu_graph, StgcnBlockConfig(3, 4, temporal_stride=2), rng)
        assert block.forward(rng.standard_normal((1, 3, 100, 25))).shape == (1, 4, 50, 25)

    def test_projection_residual_when_shape_changes(self, chain5, rng):
        assert StgcnBlock(chain5, StgcnBlockConfig(3, 4), rng).res_conv is not None
        assert StgcnBlock(chain5, StgcnBlockConfig(4, 4, temporal_stride=2), rng).res_conv \
            is not None
        assert StgcnBlock(chain5, StgcnBlockConfig(4, 4), rng).res_conv is None

    def test_gradient_check(self, chain5, rng, backend):
        block = StgcnBlock(chain5, StgcnBlockConfig(3, 4, temporal_kernel=3), rng)
        report = grad_check(block, rng.standard_normal((2, 3, 8, 5)), seed=3)
        assert report.kink_margin > 1e-5
        assert report.max_rel_error < 1e-5, report.format_table()

    def test_shape_error(self, chain5, rng):
        with pytest.raises(ShapeError):
            StgcnBlock(chain5, StgcnBlockConfig(3, 4), rng).forward(np.zeros((1, 2, 4, 5)))


class TestEsa:
    def test_zero_conv_scales_by_one_and_a_half(self, rng):
        esa = EsaBlock(3, 3, rng)
        esa.conv.params["weight"][:] = 0
        f = rng.standard_normal((2, 3, 4, 5))
        np.testing.assert_allclose(esa.forward(f), 1.5 * f, atol=1e-15)

    def test_output_magnitude_bounds(self, rng):
        esa = EsaBlock(3, 3, rng)
        f = rng.standard_normal((2, 3, 4, 5)) * 3
        out = esa.forward(f)
        assert np.all(np.abs(out) > np.abs(f)) and np.all(np.abs(out) < 2 * np.abs(f))

    def test_gradient_check(self, rng):
        assert grad_check(EsaBlock(4, 3, rng), rng.standard_normal((2, 4, 5, 6))
                          ).max_rel_error < 1e-5


class TestBackbone:
    def test_default_output_shape(self, ntu_graph):
        bb = Backbone(ntu_graph, BackboneConfig(), np.random.default_rng(0))
        assert bb.forward(np.zeros((2, 3, 100, 25))).shape == (2, 64, 25, 25)
        assert len(bb.activations) == 4

    @settings(max_examples=15, deadline=None)
    @given(st.lists(st.tuples(st.integers(1, 4), st.integers(1, 3)), min_size=1, max_size=3),
           st.integers(3, 20))
    def test_shape_chaining(self, spec, t):
        chain = build_graph_from_edges(3, [(0, 1), (1, 2)], 1)
        channels, strides = zip(*spec)
        cfg = BackboneConfig(default_blocks(2, channels, strides, kernel=3))
        out = Backbone(chain, cfg, np.random.default_rng(0)).forward(np.ones((1, 2, t, 3)))
        assert out.shape == (1, channels[-1], cfg.output_length(t), 3)

    def test_batch_independence_in_eval(self, chain5, rng):
        bb = Backbone(chain5, BackboneConfig(default_blocks(3, (4, 4), (1, 2), 3), True, 3), rng)
        bb.forward(rng.standard_normal((4, 3, 8, 5)))  # populate running stats
        bb.train(False)
        x = rng.standard_normal((1, 3, 8, 5))
        single = bb.forward(x)
        double = bb.forward(np.concatenate([x, x]))
        assert double[0].tobytes() == single[0].tobytes() == double[1].tobytes()

    def test_gradient_check(self, chain5, rng):
        bb = Backbone(chain5, BackboneConfig(default_blocks(3, (4, 4), (1, 2), 3)), rng)
        report = grad_check(bb, rng.standard_normal((3, 3, 8, 5)), seed=2)
        assert report.max_rel_error < 1e-4, report.format_table()

    def test_dif_makes_outputs_rigid_invariant(self, ntu_graph, rng):
        from scipy.spatial.transform import Rotation
        bb = Backbone(ntu_graph, BackboneConfig(default_blocks(3, (4, 4), (1, 2), 3)), rng)
        bb.train(False)
        clip = SkeletonClip(ntu_topology(), rng.standard_normal((8, 25, 3)))
        r = Rotation.random(random_state=3).as_matrix()
        moved = clip.with_positions(clip.positions @ r.T + [1.0, 2.0, -3.0])
        to_x = lambda c: apply_dif(c).positions.transpose(2, 0, 1)[None]
        np.testing.assert_allclose(bb.forward(to_x(moved)), bb.forward(to_x(clip)), atol=1e-9)

    def test_receptive_field_matches_gradient_support(self, chain5, rng):
        cfg = BackboneConfig(default_blocks(3, (4, 4, 4), (1, 2, 2), kernel=5))
        bb = Backbone(chain5, cfg, rng)
        t = 30
        x = rng.standard_normal((1, 3, t, 5))
        bb.train(False)
        out = bb.forward(x)
        for start, stop in [(0, 1), (3, 5), (out.shape[2] - 1, out.shape[2])]:
            dy = np.zeros_like(out)
            dy[:, :, start:stop] = 1.0
            dx = np.abs(bb.backward(dy)).sum(axis=(0, 1, 3))
            lo, hi = bb.receptive_field(start, stop, t)
            assert not dx[:lo].any() and not dx[hi:].any()
            assert dx[lo] > 0 and dx[hi - 1] > 0
