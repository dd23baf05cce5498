"""Reverse-mode differentiation over an explicit gradient tape.

Each traced operation runs its forward kernel and, when a tape is active on
the current thread, pushes a record holding the output and a pull closure
that maps the output adjoint onto input/parameter adjoints.  ``backward``
replays the records in reverse execution order; gradients accumulate keyed
by array identity, so parameter bundles are looked up with ``tape.grad``.

There is no expression graph: the op set is small and closed, and every
adjoint here is hand-written and certified against central differences by
``fd_check``.
"""

import math
import threading
from typing import Callable

import numpy as np

from . import kernels as K
from . import nn as NN
from .errors import NumericError, ShapeError, StateError

_LOCAL = threading.local()


def _active():
    stack = getattr(_LOCAL, "tapes", None)
    return stack[-1] if stack else None


class GradTape:
    """Ordered record of executed primitives for one forward pass.

    Use as a context manager around the forward computation, then call
    ``backward`` exactly once.  A second backward without a fresh tape is a
    state error; gradients for a given forward are deterministic and
    reproducible bit-for-bit.
    """

    def __init__(self):
        self._records: list[tuple[tuple, Callable]] = []
        self._grads: dict[int, np.ndarray] = {}
        self._spent = False

    def __enter__(self):
        stack = getattr(_LOCAL, "tapes", None)
        if stack is None:
            stack = _LOCAL.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _LOCAL.tapes.pop()
        return False

    def record(self, outputs: tuple, pull: Callable) -> None:
        self._records.append((outputs, pull))

    def accumulate(self, value: np.ndarray, grad: np.ndarray, *,
                   owned: bool = False) -> None:
        """Add ``grad`` into the slot for ``value``.

        ``owned`` marks a freshly allocated gradient that the tape may keep
        and mutate without copying; pass-through adjoints (e.g. the identity
        side of an add) must leave it False.
        """
        key = id(value)
        if key in self._grads:
            self._grads[key] += grad
        elif owned and grad.dtype == value.dtype:
            self._grads[key] = grad
        else:
            self._grads[key] = grad.astype(value.dtype, copy=True)

    def backward(self, output: np.ndarray, seed: np.ndarray | None = None) -> None:
        """Seed the output adjoint and replay all records in reverse."""
        if self._spent:
            raise StateError("tape already replayed; record a fresh forward pass")
        if seed is None:
            seed = np.ones_like(output)
        if seed.shape != output.shape:
            raise ShapeError(f"seed shape {seed.shape} != output shape {output.shape}")
        self._spent = True
        self._grads[id(output)] = seed.astype(output.dtype, copy=True)
        for outputs, pull in reversed(self._records):
            dys = tuple(self._grads.get(id(o)) for o in outputs)
            if all(d is None for d in dys):
                continue
            dys = tuple(np.zeros_like(o) if d is None else d
                        for o, d in zip(outputs, dys))
            pull(dys if len(outputs) > 1 else dys[0], self)

    def grad(self, value: np.ndarray) -> np.ndarray:
        """Accumulated adjoint of a value seen in forward (zeros if untouched)."""
        g = self._grads.get(id(value))
        return np.zeros_like(value) if g is None else g


def _trace(out, pull):
    tape = _active()
    if tape is not None:
        tape.record((out,) if isinstance(out, np.ndarray) else tuple(out), pull)
    return out


# --------------------------------------------------------------------------
# Traced primitives.  Forward math lives in kernels/nn; each wrapper only
# adds the pull closure.  Backward kernels are looked up through the module
# at call time so the gradcheck mutation hook can intercept them.
# --------------------------------------------------------------------------

def conv3d(x: np.ndarray, k: K.ConvKernel) -> np.ndarray:
    if _active() is None:
        return K.conv3d(x, k)
    y, cache = K.conv3d_with_cache(x, k)

    def pull(dy, sink):
        dx, dw, db = K.conv3d_backward(x, k, dy, cache)
        sink.accumulate(x, dx, owned=True)
        sink.accumulate(k.weights, dw, owned=True)
        if db is not None:
            sink.accumulate(k.bias, db)
    return _trace(y, pull)


def temporal_diff(x: np.ndarray) -> np.ndarray:
    y = K.temporal_diff(x)
    return _trace(y, lambda dy, sink: sink.accumulate(
        x, K.temporal_diff_backward(dy), owned=True))


def channel_pool(x: np.ndarray) -> np.ndarray:
    y = K.channel_pool(x)
    return _trace(y, lambda dy, sink: sink.accumulate(
        x, K.channel_pool_backward(x, dy), owned=True))


def spatial_pool(x: np.ndarray) -> np.ndarray:
    y = K.spatial_pool(x)
    spatial = (x.shape[2], x.shape[3])
    return _trace(y, lambda dy, sink: sink.accumulate(
        x, K.spatial_pool_backward(dy, spatial), owned=True))


def concat_channels(xs: list[np.ndarray]) -> np.ndarray:
    xs = list(xs)
    y = K.concat_channels(xs)

    def pull(dy, sink):
        lo = 0
        for x in xs:
            sink.accumulate(x, np.ascontiguousarray(dy[..., lo:lo + x.shape[-1]]),
                            owned=True)
            lo += x.shape[-1]
    return _trace(y, pull)


def split_channels(x: np.ndarray, parts: int = 4) -> list[np.ndarray]:
    ys = K.split_channels(x, parts)

    def pull(dys, sink):
        sink.accumulate(x, np.concatenate(dys, axis=-1), owned=True)
    _trace(ys, pull)
    return ys


def sigmoid(x: np.ndarray) -> np.ndarray:
    y = K.sigmoid(x)
    return _trace(y, lambda dy, sink: sink.accumulate(
        x, K.sigmoid_backward(y, dy), owned=True))


def softmax(v: np.ndarray) -> np.ndarray:
    w = K.softmax(v)
    return _trace(w, lambda dw, sink: sink.accumulate(
        v, K.softmax_backward(w, dw), owned=True))


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    y = K.hadamard(a, b)

    def pull(dy, sink):
        da, db = K.hadamard_backward(a, b, dy)
        sink.accumulate(a, da, owned=True)
        sink.accumulate(b, db, owned=True)
    return _trace(y, pull)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    y = K.add(a, b)

    def pull(dy, sink):
        da, db = K.add_backward(a, b, dy)
        sink.accumulate(a, da)
        sink.accumulate(b, db)
    return _trace(y, pull)


def scale(a: np.ndarray, s: float) -> np.ndarray:
    y = K.scale(a, s)
    return _trace(y, lambda dy, sink: sink.accumulate(a, dy * s))


def blend(xs: list[np.ndarray], w: np.ndarray) -> np.ndarray:
    xs = list(xs)
    y = K.blend(xs, w)

    def pull(dy, sink):
        dxs, dw = K.blend_backward(xs, w, dy)
        for x, dx in zip(xs, dxs):
            sink.accumulate(x, dx, owned=True)
        sink.accumulate(w, dw, owned=True)
    return _trace(y, pull)


def relu(x: np.ndarray) -> np.ndarray:
    y = NN.relu(x)
    return _trace(y, lambda dy, sink: sink.accumulate(
        x, NN.relu_backward(x, dy), owned=True))


def batchnorm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, *,
              training: bool,
              running_mean: np.ndarray | None = None,
              running_var: np.ndarray | None = None,
              stats_out: dict | None = None) -> np.ndarray:
    """Batch norm in train (batch stats) or eval (running stats) mode.

    Never mutates running statistics; in training mode the batch moments are
    reported through ``stats_out`` so the caller decides when to fold them in.
    """
    if training:
        y, cache = NN.batchnorm_train(x, gamma, beta)
        if stats_out is not None:
            stats_out["mean"], stats_out["var"] = cache[0], cache[1]

        def pull(dy, sink):
            dx, dgamma, dbeta = NN.batchnorm_train_backward(gamma, cache, dy)
            sink.accumulate(x, dx, owned=True)
            sink.accumulate(gamma, dgamma, owned=True)
            sink.accumulate(beta, dbeta, owned=True)
    else:
        y = NN.batchnorm_eval(x, gamma, beta, running_mean, running_var)

        def pull(dy, sink):
            dx, dgamma, dbeta = NN.batchnorm_eval_backward(
                x, gamma, running_mean, running_var, dy)
            sink.accumulate(x, dx, owned=True)
            sink.accumulate(gamma, dgamma, owned=True)
            sink.accumulate(beta, dbeta, owned=True)
    return _trace(y, pull)


def maxpool_spatial(x: np.ndarray, size: int = 3, stride: int = 2,
                    padding: int = 1) -> np.ndarray:
    y, cache = NN.maxpool_spatial(x, size, stride, padding)
    return _trace(y, lambda dy, sink: sink.accumulate(
        x, NN.maxpool_spatial_backward(dy, cache), owned=True))


def global_average_pool(x: np.ndarray) -> np.ndarray:
    y = NN.global_average_pool(x)
    dims = x.shape
    return _trace(y, lambda dy, sink: sink.accumulate(
        x, NN.global_average_pool_backward(dy, dims), owned=True))


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    y = NN.linear(x, w, b)

    def pull(dy, sink):
        dx, dw, db = NN.linear_backward(x, w, dy)
        sink.accumulate(x, dx, owned=True)
        sink.accumulate(w, dw, owned=True)
        sink.accumulate(b, db, owned=True)
    return _trace(y, pull)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    loss, probs = NN.cross_entropy(logits, labels)

    def pull(dloss, sink):
        sink.accumulate(logits, NN.cross_entropy_backward(probs, labels, dloss),
                        owned=True)
    return _trace(loss, pull)


# --------------------------------------------------------------------------
# Finite-difference certification.
# --------------------------------------------------------------------------

def fd_check(loss_and_grads: Callable[[], tuple[float, dict[str, np.ndarray]]],
             bundles: dict[str, np.ndarray],
             *,
             eps: float = 1e-5,
             rng: np.random.Generator | None = None,
             min_coords: int = 64,
             loss_only: Callable[[], float] | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_and_grads`` evaluates the block at the current bundle values and
    returns the scalar loss plus one gradient array per bundle name.  Every
    bundle is checked; bundles larger than ``min_coords`` are subsampled with
    a seeded uniform draw.  Error is |analytic - fd| / max(1, |analytic|).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    for name, arr in bundles.items():
        if arr.dtype != np.float64:
            raise NumericError(f"bundle {name!r} must be float64 for fd_check")
    if loss_only is None:
        loss_only = lambda: loss_and_grads()[0]
    rng = rng or np.random.default_rng(0)

    loss0, grads = loss_and_grads()
    if not math.isfinite(float(loss0)):
        raise NumericError("non-finite loss at the expansion point")

    worst = 0.0
    for name, arr in bundles.items():
        g = grads[name]
        if g.shape != arr.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, "
                             f"bundle has {arr.shape}")
        size = arr.size
        if size <= min_coords:
            coords = np.arange(size)
        else:
            coords = rng.choice(size, size=min_coords, replace=False)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            lp = float(loss_only())
            flat[i] = orig - eps
            lm = float(loss_only())
            flat[i] = orig
            if not (math.isfinite(lp) and math.isfinite(lm)):
                raise NumericError(f"non-finite loss while probing {name!r}")
            fd = (lp - lm) / (2.0 * eps)
            err = abs(gflat[i] - fd) / max(1.0, abs(gflat[i]))
            if err > worst:
                worst = err
    return worst
