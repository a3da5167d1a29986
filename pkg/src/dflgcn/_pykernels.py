"""Pure-numpy implementations of the hot kernels (reference and fallback)."""

from __future__ import annotations

import numpy as np

DEGENERATE_NORM = 1e-8


def temporal_conv_forward(x, w, stride, pad):
    """``x[B, C, T, V]``, ``w[K, O, C]`` -> ``y[B, O, T', V]``, zero padded."""
    b, c, t, v = x.shape
    k_size, o, _ = w.shape
    t_out = (t + 2 * pad - k_size) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (0, 0)))
    span = stride * (t_out - 1) + 1
    y = np.zeros((b, o, t_out * v))
    for k in range(k_size):
        xs = xp[:, :, k:k + span:stride, :].reshape(b, c, t_out * v)
        y += np.matmul(w[k], xs)
    return y.reshape(b, o, t_out, v)


def temporal_conv_backward(dy, x, w, stride, pad, dw):
    """Returns ``dx`` and adds the weight gradient into ``dw`` in place."""
    b, c, t, v = x.shape
    k_size, o, _ = w.shape
    t_out = dy.shape[2]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (0, 0)))
    span = stride * (t_out - 1) + 1
    dy2 = dy.reshape(b, o, t_out * v)
    dy_flat = dy2.transpose(1, 0, 2).reshape(o, -1)
    dxp = np.zeros_like(xp)
    for k in range(k_size):
        xs = xp[:, :, k:k + span:stride, :].reshape(b, c, t_out * v)
        dw[k] += dy_flat @ xs.transpose(1, 0, 2).reshape(c, -1).T
        dxp[:, :, k:k + span:stride, :] += np.matmul(w[k].T, dy2).reshape(b, c, t_out, v)
    return dxp[:, :, pad:pad + t, :]


def batchnorm_forward_train(x, gamma, beta, eps):
    """``x[B, C, N]`` -> ``(y, xhat, mean, var, inv_std)`` with biased batch variance."""
    mean = x.mean(axis=(0, 2))
    var = x.var(axis=(0, 2))
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None]) * inv_std[None, :, None]
    y = gamma[None, :, None] * xhat + beta[None, :, None]
    return y, xhat, mean, var, inv_std


def batchnorm_backward_train(dy, xhat, gamma, inv_std):
    """Returns ``(dx, dgamma, dbeta)`` for training-mode batch norm on ``[B, C, N]``."""
    dgamma = np.sum(dy * xhat, axis=(0, 2))
    dbeta = np.sum(dy, axis=(0, 2))
    n = dy.shape[0] * dy.shape[2]
    dx = (gamma * inv_std)[None, :, None] * (
        dy - (dbeta / n)[None, :, None] - xhat * (dgamma / n)[None, :, None])
    return dx, dgamma, dbeta


def dif_axes(positions, center, chest, lshoulder, rshoulder):
    """Per-frame body axes ``[T, 3, 3]`` (rows X, Y, Z) for ``positions[T, V, 3]``.

    Degenerate frames reuse the most recent valid frame's axes, or the
    identity before the first valid frame.
    """
    up = positions[:, chest] - positions[:, center]
    across = positions[:, rshoulder] - positions[:, lshoulder]
    n_up = np.linalg.norm(up, axis=1)
    x = np.cross(up, across)
    n_x = np.linalg.norm(x, axis=1)
    valid = (n_up >= DEGENERATE_NORM) & (n_x >= DEGENERATE_NORM)
    y = up / np.where(valid, n_up, 1.0)[:, None]
    x = x / np.where(valid, n_x, 1.0)[:, None]
    z = np.cross(x, y)
    axes = np.stack([x, y, z], axis=1)
    t = len(positions)
    last = np.maximum.accumulate(np.where(valid, np.arange(t), -1))
    out = np.broadcast_to(np.eye(3), (t, 3, 3)).copy()
    has = last >= 0
    out[has] = axes[last[has]]
    return out


def dif_transform(positions, center, chest, lshoulder, rshoulder):
    axes = dif_axes(positions, center, chest, lshoulder, rshoulder)
    rel = positions - positions[:, center:center + 1, :]
    return np.einsum("tij,tvj->tvi", axes, rel), axes
