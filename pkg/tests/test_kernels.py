import numpy as np
import pytest

from dflgcn import _pykernels, kernels

pytestmark = pytest.mark.skipif("cython" not in kernels.available_backends(),
                                reason="compiled kernels not built")


def both(name, *args):
    with kernels.use_backend("python"):
        a = getattr(kernels, name)(*args)
    with kernels.use_backend("cython"):
        b = getattr(kernels, name)(*args)
    return a, b


def assert_close(a, b, atol):
    if isinstance(a, tuple):
        assert len(a) == len(b)
        for x, y in zip(a, b):
            np.testing.assert_allclose(y, x, rtol=0, atol=atol)
    else:
        np.testing.assert_allclose(b, a, rtol=0, atol=atol)


class TestBackendAgreement:
    @pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 4, 9), (3, 0, 1), (2, 2, 5)])
    def test_temporal_conv(self, rng, stride, pad, k):
        x = rng.standard_normal((2, 3, 17, 5))
        w = rng.standard_normal((k, 4, 3))
        ya, yb = both("temporal_conv_forward", x, w, stride, pad)
        assert_close(ya, yb, 1e-12)
        dy = rng.standard_normal(ya.shape)
        dwa, dwb = np.ones_like(w), np.ones_like(w)
        with kernels.use_backend("python"):
            dxa = kernels.temporal_conv_backward(dy, x, w, stride, pad, dwa)
        with kernels.use_backend("cython"):
            dxb = kernels.temporal_conv_backward(dy, x, w, stride, pad, dwb)
        assert_close(dxa, dxb, 1e-12)
        assert_close(dwa, dwb, 1e-11)

    def test_batchnorm(self, rng):
        x = rng.normal(2.0, 3.0, (4, 5, 30))
        gamma, beta = rng.standard_normal(5), rng.standard_normal(5)
        fa, fb = both("batchnorm_forward_train", x, gamma, beta, 1e-5)
        assert_close(fa, fb, 1e-12)
        dy = rng.standard_normal(x.shape)
        ba, bb = both("batchnorm_backward_train", dy, fa[1], gamma, fa[4])
        assert_close(ba, bb, 1e-11)

    def test_dif(self, rng):
        pos = rng.standard_normal((12, 8, 3))
        pos[0, 2] = pos[0, 1]            # degenerate first frame
        pos[5, 5] = pos[5, 4]            # zero shoulder line
        aa, ab = both("dif_axes", pos, 1, 2, 4, 5)
        assert_close(aa, ab, 1e-14)
        assert aa[0].tolist() == np.eye(3).tolist()
        assert ab[5].tolist() == ab[4].tolist()
        ta, tb = both("dif_transform", pos, 1, 2, 4, 5)
        assert_close(ta, tb, 1e-13)


class TestDispatch:
    def test_all_kernels_exported(self):
        for name in kernels.KERNEL_NAMES:
            assert callable(getattr(_pykernels, name))
            assert callable(getattr(kernels._ckernels, name))

    def test_unknown_backend(self):
        with pytest.raises(ValueError):
            kernels.set_backend("fortran")

    def test_context_restores(self):
        before = kernels.BACKEND
        with kernels.use_backend("python"):
            assert kernels.BACKEND == "python"
        assert kernels.BACKEND == before

    def test_non_contiguous_inputs(self, rng):
        x = rng.standard_normal((2, 5, 9, 3)).transpose(0, 1, 2, 3)[:, ::2]
        w = rng.standard_normal((3, 2, 3))
        ya, yb = both("temporal_conv_forward", x, w, 1, 1)
        assert_close(ya, yb, 1e-12)
