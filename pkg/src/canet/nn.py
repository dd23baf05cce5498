"""Backbone plumbing kernels: ReLU, batch norm, pooling, linear, cross-entropy.

These carry the residual network around the attention modules.  Like the
primitive kernels they come as forward/backward pairs operating on plain
numpy arrays; batch norm statistics reduce over (N, T, H, W) per channel.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

BN_EPS = 1e-5

_REDUCE = (0, 1, 2, 3)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * (x > 0)


def batchnorm_train(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray):
    """Normalize with batch statistics; returns (y, (mean, var, inv, centered))."""
    m = x.size // x.shape[-1]
    mean = x.mean(axis=_REDUCE)
    centered = x - mean
    var = np.einsum("nthwc,nthwc->c", centered, centered) / m
    inv = 1.0 / np.sqrt(var + BN_EPS)
    return centered * (inv * gamma) + beta, (mean, var, inv, centered)


def batchnorm_train_backward(gamma: np.ndarray, cache, dy: np.ndarray):
    _, _, inv, centered = cache
    m = dy.size // dy.shape[-1]
    proj = np.einsum("nthwc,nthwc->c", dy, centered)  # sum of dy * (x - mean)
    dbeta = dy.sum(axis=_REDUCE)
    dgamma = proj * inv
    # dx = gamma*inv * (dy - mean(dy) - centered * inv^2 * mean(dy*centered))
    dx = (gamma * inv) * (dy - dbeta / m - centered * (inv * inv * proj / m))
    return dx, dgamma, dbeta


def batchnorm_eval(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                   running_mean: np.ndarray, running_var: np.ndarray) -> np.ndarray:
    inv = 1.0 / np.sqrt(running_var + BN_EPS)
    return (x - running_mean) * inv * gamma + beta


def batchnorm_eval_backward(x, gamma, running_mean, running_var, dy):
    inv = 1.0 / np.sqrt(running_var + BN_EPS)
    xhat = (x - running_mean) * inv
    return dy * gamma * inv, (dy * xhat).sum(axis=_REDUCE), dy.sum(axis=_REDUCE)


def maxpool_spatial(x: np.ndarray, size: int = 3, stride: int = 2, padding: int = 1):
    """Spatial max pooling per frame; returns (y, argmax cache for backward)."""
    N, T, H, W, C = x.shape
    fill = np.finfo(x.dtype).min
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding), (0, 0)),
                constant_values=fill)
    win = sliding_window_view(xp, (size, size), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2], win.shape[3]
    flat = win.reshape(N, T, Ho, Wo, C, size * size)
    idx = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, idx[..., None], -1)[..., 0]
    return np.ascontiguousarray(y), (idx, (H, W), padding, size, stride)


def maxpool_spatial_backward(dy: np.ndarray, cache) -> np.ndarray:
    idx, (H, W), padding, size, stride = cache
    N, T, Ho, Wo, C = dy.shape
    dxp = np.zeros((N, T, H + 2 * padding, W + 2 * padding, C), dtype=dy.dtype)
    n = np.arange(N)[:, None, None, None, None]
    t = np.arange(T)[None, :, None, None, None]
    c = np.arange(C)[None, None, None, None, :]
    hh = (np.arange(Ho) * stride)[None, None, :, None, None] + idx // size
    ww = (np.arange(Wo) * stride)[None, None, None, :, None] + idx % size
    np.add.at(dxp, (n, t, hh, ww, c), dy)
    return np.ascontiguousarray(dxp[:, :, padding:padding + H, padding:padding + W])


def global_average_pool(x: np.ndarray) -> np.ndarray:
    """Mean over (T, H, W): the clip descriptor feeding the classifier."""
    return x.mean(axis=(1, 2, 3))


def global_average_pool_backward(dy: np.ndarray, dims) -> np.ndarray:
    N, T, H, W, C = dims
    return np.broadcast_to(dy[:, None, None, None, :] / (T * H * W), dims).copy()


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear expects (N, {w.shape[0]}), got {x.shape}")
    return x @ w + b


def linear_backward(x, w, dy):
    return dy @ w.T, x.T @ dy, dy.sum(axis=0)


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch; returns (loss, softmax cache)."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (N, K), got {logits.shape}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    picked = shifted[np.arange(n), labels] - np.log(e.sum(axis=1))
    loss = np.asarray(-picked.mean(), dtype=logits.dtype)
    return loss, probs


def cross_entropy_backward(probs: np.ndarray, labels: np.ndarray, dloss) -> np.ndarray:
    n = probs.shape[0]
    d = probs.copy()
    d[np.arange(n), labels] -= 1.0
    return d * (dloss / n)
