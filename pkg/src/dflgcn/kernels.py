"""Hot-kernel dispatch.

The compiled extension ``_ckernels`` is used when it was built and
``DFLGCN_PURE_PYTHON`` is unset; otherwise the numpy implementations in
``_pykernels`` are used. Both compute the same functions; results agree to
round-off, not bit for bit, so runs are reproducible per backend.
"""

from __future__ import annotations

import os
from contextlib import contextmanager

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

KERNEL_NAMES = ("temporal_conv_forward", "temporal_conv_backward", "batchnorm_forward_train",
                "batchnorm_backward_train", "dif_axes", "dif_transform")

_impl = _pykernels
BACKEND = "python"


def available_backends() -> list[str]:
    return ["python"] + (["cython"] if _ckernels is not None else [])


def set_backend(name: str) -> None:
    global _impl, BACKEND
    if name == "cython":
        if _ckernels is None:
            raise RuntimeError("compiled kernels are not built; run `pip install -e .`")
        _impl = _ckernels
    elif name == "python":
        _impl = _pykernels
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    BACKEND = name


@contextmanager
def use_backend(name: str):
    previous = BACKEND
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


if _ckernels is not None and os.environ.get("DFLGCN_PURE_PYTHON", "") in ("", "0"):
    set_backend("cython")


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def temporal_conv_forward(x, w, stride: int, pad: int):
    return _impl.temporal_conv_forward(_c(x), _c(w), stride, pad)


def temporal_conv_backward(dy, x, w, stride: int, pad: int, dw):
    return _impl.temporal_conv_backward(_c(dy), _c(x), _c(w), stride, pad, dw)


def batchnorm_forward_train(x, gamma, beta, eps: float):
    return _impl.batchnorm_forward_train(_c(x), _c(gamma), _c(beta), eps)


def batchnorm_backward_train(dy, xhat, gamma, inv_std):
    return _impl.batchnorm_backward_train(_c(dy), _c(xhat), _c(gamma), _c(inv_std))


def dif_axes(positions, center: int, chest: int, lshoulder: int, rshoulder: int):
    return _impl.dif_axes(_c(positions), center, chest, lshoulder, rshoulder)


def dif_transform(positions, center: int, chest: int, lshoulder: int, rshoulder: int):
    return _impl.dif_transform(_c(positions), center, chest, lshoulder, rshoulder)
