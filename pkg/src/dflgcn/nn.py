"""Dense float64 arithmetic, layers with explicit backward passes, SGD with
Nesterov momentum, and a central-difference gradient checker.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Every layer
follows the same contract: ``forward`` caches what ``backward`` needs,
``backward`` *adds* parameter gradients into ``grads`` and returns the
gradient with respect to its input.
"""

from __future__ import annotations

import math
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import kernels

DEBUG = os.environ.get("DFLGCN_DEBUG", "") not in ("", "0")


class ShapeError(ValueError):
    pass


class LayerStateError(RuntimeError):
    pass


def check_finite(x: np.ndarray, where: str = "") -> np.ndarray:
    if DEBUG and not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {where or 'tensor'}")
    return x


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = as_tensor(x)
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = as_tensor(x)
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the batch.

    Returns ``(loss, dloss/dlogits)``; the gradient is ``(softmax - onehot) / b``.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {b}")
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValueError(f"label out of range for {c} classes: {labels.tolist()}")
    logp = log_softmax(logits, axis=1)
    rows = np.arange(b)
    loss = float(-np.mean(logp[rows, labels]))
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad /= b
    return loss, grad


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    """Base layer: named params, matching grads, running statistics, mode."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.running_stats: dict[str, np.ndarray] = {}
        self.training = True
        self._cache = None

    def add_param(self, name: str, value: np.ndarray) -> np.ndarray:
        value = as_tensor(value).copy()
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def train(self, mode: bool = True):
        self.training = mode
        return self

    def eval(self):
        return self.train(False)

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _need_cache(self):
        if self._cache is None:
            raise LayerStateError(f"{type(self).__name__}.backward called before forward")
        return self._cache

    def __call__(self, x):
        return self.forward(x)


class Dense(Layer):
    """``y = x @ W + b`` on the last axis of a 2-D input."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None,
                 bias: bool = True):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.n_in, self.n_out = n_in, n_out
        self.add_param("weight", glorot_uniform(rng, (n_in, n_out), n_in, n_out))
        if bias:
            self.add_param("bias", np.zeros(n_out))

    def forward(self, x):
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"Dense({self.n_in}->{self.n_out}) got input {x.shape}")
        self._cache = x
        y = x @ self.params["weight"]
        if "bias" in self.params:
            y = y + self.params["bias"]
        return check_finite(y, "Dense")

    def backward(self, dy):
        x = self._need_cache()
        self.grads["weight"] += x.T @ dy
        if "bias" in self.params:
            self.grads["bias"] += dy.sum(axis=0)
        return dy @ self.params["weight"].T


class ReLU(Layer):
    """``max(x, 0)``. ``margin`` is the smallest ``|x|`` of the last forward,
    i.e. how far that input sits from the kink."""

    margin = float("inf")

    def forward(self, x):
        mask = x > 0
        self._cache = mask
        self.margin = float(np.min(np.abs(x))) if x.size else float("inf")
        return np.where(mask, x, 0.0)

    def backward(self, dy):
        return np.where(self._need_cache(), dy, 0.0)


class Sigmoid(Layer):
    def forward(self, x):
        y = 0.5 * (1.0 + np.tanh(0.5 * as_tensor(x)))
        self._cache = y
        return y

    def backward(self, dy):
        y = self._need_cache()
        return dy * y * (1.0 - y)


class BatchNorm(Layer):
    """Per-channel batch norm over every axis except axis 1.

    Running statistics follow ``r <- momentum * r + (1 - momentum) * batch``.
    Setting ``track_running_stats = False`` freezes them (used by gradient
    checks, which must evaluate the same function repeatedly).
    """

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.track_running_stats = True
        self.add_param("gamma", np.ones(channels))
        self.add_param("beta", np.zeros(channels))
        self.running_stats["mean"] = np.zeros(channels)
        self.running_stats["var"] = np.ones(channels)

    def _bshape(self, x):
        return (1, self.channels) + (1,) * (x.ndim - 2)

    def forward(self, x):
        x = as_tensor(x)
        if x.ndim < 2 or x.shape[1] != self.channels:
            raise ShapeError(f"BatchNorm({self.channels}) got input {x.shape}")
        shape = x.shape
        x3 = x.reshape(shape[0], self.channels, -1)
        gamma, beta = self.params["gamma"], self.params["beta"]
        if self.training:
            y, xhat, mean, var, inv_std = kernels.batchnorm_forward_train(x3, gamma, beta,
                                                                          self.eps)
            if self.track_running_stats:
                m = self.momentum
                rs = self.running_stats
                rs["mean"] *= m
                rs["mean"] += (1 - m) * mean
                rs["var"] *= m
                rs["var"] += (1 - m) * var
        else:
            inv_std = 1.0 / np.sqrt(self.running_stats["var"] + self.eps)
            xhat = (x3 - self.running_stats["mean"][None, :, None]) * inv_std[None, :, None]
            y = gamma[None, :, None] * xhat + beta[None, :, None]
        self._cache = (xhat, inv_std, self.training)
        return check_finite(y.reshape(shape), "BatchNorm")

    def backward(self, dy):
        xhat, inv_std, training = self._need_cache()
        shape = dy.shape
        dy3 = dy.reshape(shape[0], self.channels, -1)
        gamma = self.params["gamma"]
        if training:
            dx, dgamma, dbeta = kernels.batchnorm_backward_train(dy3, xhat, gamma, inv_std)
        else:
            dgamma = np.sum(dy3 * xhat, axis=(0, 2))
            dbeta = np.sum(dy3, axis=(0, 2))
            dx = dy3 * (gamma * inv_std)[None, :, None]
        self.grads["gamma"] += dgamma
        self.grads["beta"] += dbeta
        return dx.reshape(shape)


class TemporalConv(Layer):
    """1-D convolution along axis 2 of ``[B, C, T, V]``, independently per joint.

    Same padding ``(kernel - 1) // 2``; output length ``ceil(T / stride)``.
    Weight layout is ``[kernel, C_out, C_in]``.
    """

    def __init__(self, c_in: int, c_out: int, kernel: int = 9, stride: int = 1,
                 rng: np.random.Generator | None = None, bias: bool = False):
        super().__init__()
        if kernel % 2 != 1:
            raise ValueError(f"temporal kernel must be odd, got {kernel}")
        if stride < 1:
            raise ValueError(f"stride must be >= 1, got {stride}")
        rng = rng or np.random.default_rng(0)
        self.c_in, self.c_out, self.kernel, self.stride = c_in, c_out, kernel, stride
        self.pad = (kernel - 1) // 2
        self.add_param("weight", glorot_uniform(rng, (kernel, c_out, c_in),
                                                c_in * kernel, c_out * kernel))
        if bias:
            self.add_param("bias", np.zeros(c_out))

    def out_length(self, t: int) -> int:
        return (t + 2 * self.pad - self.kernel) // self.stride + 1

    def forward(self, x):
        x = as_tensor(x)
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ShapeError(f"TemporalConv({self.c_in}->{self.c_out}) got input {x.shape}")
        y = kernels.temporal_conv_forward(x, self.params["weight"], self.stride, self.pad)
        if "bias" in self.params:
            y += self.params["bias"].reshape(1, -1, 1, 1)
        self._cache = x
        return check_finite(y, "TemporalConv")

    def backward(self, dy):
        x = self._need_cache()
        dx = kernels.temporal_conv_backward(dy, x, self.params["weight"], self.stride, self.pad,
                                            self.grads["weight"])
        if "bias" in self.params:
            self.grads["bias"] += dy.sum(axis=(0, 2, 3))
        return dx


class JointConv1d(Layer):
    """1-D convolution along the joint axis of ``[B, C, V]`` with same padding."""

    def __init__(self, c_in: int, c_out: int, kernel: int = 9,
                 rng: np.random.Generator | None = None, bias: bool = True):
        super().__init__()
        if kernel % 2 != 1:
            raise ValueError(f"spatial kernel must be odd, got {kernel}")
        rng = rng or np.random.default_rng(0)
        self.c_in, self.c_out, self.kernel = c_in, c_out, kernel
        self.pad = (kernel - 1) // 2
        self.add_param("weight", glorot_uniform(rng, (kernel, c_out, c_in),
                                                c_in * kernel, c_out * kernel))
        if bias:
            self.add_param("bias", np.zeros(c_out))

    def forward(self, x):
        x = as_tensor(x)
        if x.ndim != 3 or x.shape[1] != self.c_in:
            raise ShapeError(f"JointConv1d({self.c_in}->{self.c_out}) got input {x.shape}")
        v = x.shape[2]
        xp = np.pad(x, ((0, 0), (0, 0), (self.pad, self.pad)))
        w = self.params["weight"]
        y = np.zeros((x.shape[0], self.c_out, v))
        for k in range(self.kernel):
            y += np.matmul(w[k], xp[:, :, k:k + v])
        if "bias" in self.params:
            y += self.params["bias"].reshape(1, -1, 1)
        self._cache = xp
        return y

    def backward(self, dy):
        xp = self._need_cache()
        v = dy.shape[2]
        w = self.params["weight"]
        dxp = np.zeros_like(xp)
        for k in range(self.kernel):
            self.grads["weight"][k] += np.einsum("bov,biv->oi", dy, xp[:, :, k:k + v])
            dxp[:, :, k:k + v] += np.matmul(w[k].T, dy)
        if "bias" in self.params:
            self.grads["bias"] += dy.sum(axis=(0, 2))
        return dxp[:, :, self.pad:self.pad + v]


class MeanPool(Layer):
    """Average over axes 2.. of ``[B, C, ...]`` giving ``[B, C]``."""

    def forward(self, x):
        x = as_tensor(x)
        self._cache = x.shape
        return x.reshape(x.shape[0], x.shape[1], -1).mean(axis=2)

    def backward(self, dy):
        shape = self._need_cache()
        n = int(np.prod(shape[2:]))
        return np.broadcast_to((dy / n).reshape(dy.shape + (1,) * (len(shape) - 2)), shape).copy()


def iter_batchnorms(layers) -> Iterator[BatchNorm]:
    for layer in layers:
        if isinstance(layer, BatchNorm):
            yield layer


@contextmanager
def frozen_running_stats(layers):
    """Temporarily stop batch-norm layers from updating running statistics."""
    bns = list(iter_batchnorms(layers))
    saved = [bn.track_running_stats for bn in bns]
    for bn in bns:
        bn.track_running_stats = False
    try:
        yield
    finally:
        for bn, s in zip(bns, saved):
            bn.track_running_stats = s


@dataclass
class OptimizerState:
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")


def sgd_nesterov_step(opt: OptimizerState, params: dict[str, np.ndarray],
                      grads: dict[str, np.ndarray]) -> None:
    """In-place Nesterov update of every entry of ``params``.

    g <- g + wd * p;  v <- mu * v - lr * g;  p <- p + mu * v - lr * g
    """
    lr, mu, wd = opt.learning_rate, opt.momentum, opt.weight_decay
    for name, p in params.items():
        g = grads[name]
        if wd:
            g = g + wd * p
        v = opt.velocity.get(name)
        if v is None:
            v = opt.velocity[name] = np.zeros_like(p)
        v *= mu
        v -= lr * g
        p += mu * v - lr * g


# -- gradient checking ------------------------------------------------------

@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    size: int


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    tolerance: float
    kink_margin: float = float("inf")  # min |ReLU input| at the check point

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    @property
    def param_entries(self) -> list[GradCheckEntry]:
        return [e for e in self.entries if e.name != "input"]

    def format_table(self) -> str:
        width = max([len(e.name) for e in self.entries] + [9])
        lines = [f"{'parameter':<{width}}  {'size':>7}  {'rel.err':>10}  ok"]
        for e in self.entries:
            ok = "yes" if e.max_rel_error < self.tolerance else "NO"
            lines.append(f"{e.name:<{width}}  {e.size:>7d}  {e.max_rel_error:10.3e}  {ok}")
        if np.isfinite(self.kink_margin):
            lines.append(f"min |ReLU input| = {self.kink_margin:.3e}")
        return "\n".join(lines)


def relu_margin(layers) -> float:
    """Smallest distance of any ReLU input to zero in the last forward pass.

    Central differences straddle the kink when this is below ``epsilon``,
    and the numeric gradient is then meaningless there.
    """
    return min((l.margin for l in layers if isinstance(l, ReLU)), default=float("inf"))


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)`` over the whole tensor."""
    diff = float(np.linalg.norm((analytic - numeric).ravel()))
    scale = max(float(np.linalg.norm(analytic.ravel())),
                float(np.linalg.norm(numeric.ravel())), floor)
    return diff / scale


def numeric_gradient(f: Callable[[], float], x: np.ndarray, epsilon: float) -> np.ndarray:
    """Central differences of ``f`` w.r.t. every entry of ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + epsilon
        fp = f()
        flat[i] = old - epsilon
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * epsilon)
    return grad


def check_gradients(objective: Callable[[], float], analytic: dict[str, np.ndarray],
                    arrays: dict[str, np.ndarray], epsilon: float = 1e-5,
                    tolerance: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients with central differences of ``objective``.

    ``arrays`` maps names to the live arrays ``objective`` reads; each is
    perturbed in place and restored.
    """
    entries = []
    for name, arr in arrays.items():
        num = numeric_gradient(objective, arr, epsilon)
        entries.append(GradCheckEntry(name, relative_error(analytic[name], num), arr.size))
    return GradCheckReport(entries, tolerance)


def grad_check(target, x: np.ndarray, labels=None, epsilon: float = 1e-5,
               tolerance: float = 1e-4, seed: int = 0) -> GradCheckReport:
    """Finite-difference check of a layer or a full model.

    A layer is checked on ``sum(R * layer(x))`` with a fixed random ``R``
    (a plain sum is constant under batch norm). A model (anything with a
    ``check_objective`` method) is checked on its own training loss with
    ``labels``. Batch-norm running statistics are frozen throughout.
    """
    x = as_tensor(x).copy()
    if hasattr(target, "check_objective"):
        with frozen_running_stats(target.layers()):
            objective, analytic, arrays = target.check_objective(x, labels)
            margin = relu_margin(target.layers())
            report = check_gradients(objective, analytic, arrays, epsilon, tolerance)
            report.kink_margin = margin
            return report

    layer = target
    # composite layers (blocks, backbones) expose their parts via named_layers()
    parts = [("", layer)] + (list(layer.named_layers()) if hasattr(layer, "named_layers") else [])
    layers = [l for _, l in parts]
    with frozen_running_stats(layers):
        y = layer.forward(x)
        margin = relu_margin(layers)
        r = np.random.default_rng(seed).standard_normal(y.shape)
        for l in layers:
            l.zero_grad()
        dx = layer.backward(r)
        analytic, arrays = {}, {}
        for prefix, l in parts:
            for k in l.params:
                name = f"{prefix}.{k}" if prefix else k
                analytic[name] = l.grads[k].copy()
                arrays[name] = l.params[k]
        analytic["input"] = dx
        arrays["input"] = x

        def objective():
            return float(np.sum(r * layer.forward(x)))

        report = check_gradients(objective, analytic, arrays, epsilon, tolerance)
        report.kink_margin = margin
        return report
