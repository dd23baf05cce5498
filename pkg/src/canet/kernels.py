"""Dense video tensors and the primitive kernels all attention modules compose.

Feature maps are numpy arrays laid out as (N, T, H, W, C) in row-major order,
so the flat offset of element (n, t, h, w, c) is
``((((n*T + t)*H + h)*W + w)*C + c``.  Channels-last keeps the per-site
channel vector contiguous, which is what the grouped/recalibration paths
iterate over.  Kernels accept float32 or float64 and preserve the input
dtype; gradient certification runs in float64.

Every fast kernel has a naive-loop oracle twin (``conv3d_oracle`` for the
convolutions, one-line reductions for the rest) used by the test suite; the
oracle paths share no layout tricks with the optimized ones.
"""

import itertools
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ShapeError

Triple = tuple[int, int, int]


def video_dims(x: np.ndarray) -> tuple[int, int, int, int, int]:
    """Validate that ``x`` is a rank-5 (N, T, H, W, C) map and return its dims."""
    if x.ndim != 5:
        raise ShapeError(f"expected a (N, T, H, W, C) tensor, got rank {x.ndim}")
    if min(x.shape) < 1:
        raise ShapeError(f"all dims must be >= 1, got {x.shape}")
    return x.shape


def flat_index(dims: tuple[int, int, int, int, int], n: int, t: int, h: int, w: int, c: int) -> int:
    """Row-major flat offset of (n, t, h, w, c); pins the storage order."""
    _, T, H, W, C = dims
    return (((n * T + t) * H + h) * W + w) * C + c


@dataclass
class ConvKernel:
    """A 3-D convolution's learnable weights plus its geometry.

    ``weights`` is (out_channels, in_channels_per_group, kT, kH, kW);
    ``bias`` is (out_channels,) or None.  The depthwise case is
    groups == in_channels == out_channels with one input channel per group.
    """

    weights: np.ndarray
    bias: np.ndarray | None = None
    groups: int = 1
    stride: Triple = (1, 1, 1)
    dilation: Triple = (1, 1, 1)
    padding: Triple = (0, 0, 0)

    def __post_init__(self):
        if self.weights.ndim != 5:
            raise ShapeError(f"conv weights must be rank 5, got {self.weights.ndim}")
        if self.groups < 1:
            raise ShapeError("groups must be positive")
        if self.weights.shape[0] % self.groups != 0:
            raise ShapeError(
                f"out_channels {self.weights.shape[0]} not divisible by groups {self.groups}")
        if self.bias is not None and self.bias.shape != (self.weights.shape[0],):
            raise ShapeError("bias length must equal out_channels")
        for name, triple in (("stride", self.stride), ("dilation", self.dilation)):
            if len(triple) != 3 or min(triple) < 1:
                raise ShapeError(f"{name} must be three positive ints, got {triple}")
        if len(self.padding) != 3 or min(self.padding) < 0:
            raise ShapeError(f"padding must be three non-negative ints, got {self.padding}")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1] * self.groups

    @property
    def kernel_dims(self) -> Triple:
        return self.weights.shape[2:5]

    def param_count(self) -> int:
        return self.weights.size + (0 if self.bias is None else self.bias.size)


def conv_output_dims(in_dims: Triple, k: ConvKernel) -> Triple:
    """Output (T, H, W) under the standard dilated-conv size formula."""
    out = []
    for size, kk, s, d, p in zip(in_dims, k.kernel_dims, k.stride, k.dilation, k.padding):
        span = (kk - 1) * d + 1
        o = (size + 2 * p - span) // s + 1
        if o < 1:
            raise ShapeError(
                f"kernel span {span} with stride {s}, padding {p} leaves no output "
                f"positions on an axis of size {size}")
        out.append(o)
    return tuple(out)


def _pad_video(x: np.ndarray, padding: Triple) -> np.ndarray:
    pT, pH, pW = padding
    if pT == 0 and pH == 0 and pW == 0:
        return x
    N, T, H, W, C = x.shape
    xp = np.zeros((N, T + 2 * pT, H + 2 * pH, W + 2 * pW, C), dtype=x.dtype)
    xp[:, pT:pT + T, pH:pH + H, pW:pW + W] = x
    return xp


def _gather_windows(xp: np.ndarray, k: ConvKernel) -> np.ndarray:
    """Strided view (N, To, Ho, Wo, C, kT, kH, kW) of every kernel support."""
    kT, kH, kW = k.kernel_dims
    dT, dH, dW = k.dilation
    sT, sH, sW = k.stride
    span = ((kT - 1) * dT + 1, (kH - 1) * dH + 1, (kW - 1) * dW + 1)
    win = sliding_window_view(xp, span, axis=(1, 2, 3))
    return win[:, ::sT, ::sH, ::sW, :, ::dT, ::dH, ::dW]


def _is_depthwise_temporal(k: ConvKernel, channels: int) -> bool:
    kT, kH, kW = k.kernel_dims
    return (k.groups == channels == k.out_channels
            and k.weights.shape[1] == 1
            and kH == kW == 1
            and k.stride == (1, 1, 1)
            and k.padding[1] == 0 and k.padding[2] == 0)


def _is_pointwise(k: ConvKernel) -> bool:
    return (k.kernel_dims == (1, 1, 1) and k.groups == 1
            and k.stride == (1, 1, 1) and k.padding == (0, 0, 0))


def conv3d_with_cache(x: np.ndarray, k: ConvKernel):
    """conv3d that also returns the gathered column matrices for backward."""
    N, T, H, W, C = video_dims(x)
    if C != k.in_channels:
        raise ShapeError(f"input has {C} channels, kernel expects {k.in_channels}")
    To, Ho, Wo = conv_output_dims((T, H, W), k)
    O = k.out_channels

    if _is_pointwise(k):
        # Channel mixing only: one matmul over the flattened sites.
        y = x.reshape(-1, C) @ k.weights.reshape(O, C).T
        if k.bias is not None:
            y += k.bias
        return y.reshape(N, T, H, W, O), None

    if _is_depthwise_temporal(k, C):
        # Each channel convolved independently along T: a few shifted
        # multiply-adds instead of a gather + matmul.
        kT = k.kernel_dims[0]
        dT = k.dilation[0]
        xp = _pad_video(x, (k.padding[0], 0, 0))
        y = np.zeros((N, To, H, W, C), dtype=x.dtype)
        for j in range(kT):
            tap = k.weights[:, 0, j, 0, 0]
            y += xp[:, j * dT: j * dT + To] * tap
        if k.bias is not None:
            y += k.bias
        return y, None

    xp = _pad_video(x, k.padding)
    win = _gather_windows(xp, k)  # (N, To, Ho, Wo, C, kT, kH, kW)
    sites = N * To * Ho * Wo
    kvol = int(np.prod(k.kernel_dims))
    per_group_in = k.weights.shape[1]
    per_group_out = O // k.groups
    if k.groups == 1:
        cols = [win.reshape(sites, C * kvol)]
        y = cols[0] @ k.weights.reshape(O, C * kvol).T
    else:
        cols = []
        parts = []
        for g in range(k.groups):
            lo = g * per_group_in
            cols.append(win[..., lo:lo + per_group_in, :, :, :]
                        .reshape(sites, per_group_in * kvol))
            wmat = k.weights[g * per_group_out:(g + 1) * per_group_out]
            parts.append(cols[-1] @ wmat.reshape(per_group_out, -1).T)
        y = np.concatenate(parts, axis=1)
    y = y.reshape(N, To, Ho, Wo, O)
    if k.bias is not None:
        y += k.bias
    return y, cols


def conv3d(x: np.ndarray, k: ConvKernel) -> np.ndarray:
    """Grouped dilated 3-D convolution over (T, H, W) with zero padding.

    y(n,t,h,w,o) = bias(o) + sum over the kernel support of weights times x
    sampled at dilated offsets; samples outside the input read as zero.
    """
    return conv3d_with_cache(x, k)[0]


def _conv3d_input_grad(k: ConvKernel, dy: np.ndarray, in_shape) -> np.ndarray:
    """dx for stride 1 as a dilated convolution of dy with the flipped kernel."""
    N, T, H, W, C = in_shape
    O = k.out_channels
    kT, kH, kW = k.kernel_dims
    qT = (kT - 1) * k.dilation[0] - k.padding[0]
    qH = (kH - 1) * k.dilation[1] - k.padding[1]
    qW = (kW - 1) * k.dilation[2] - k.padding[2]
    dyp = _pad_video(dy, (qT, qH, qW))
    flip = ConvKernel(k.weights[:, :, ::-1, ::-1, ::-1], None,
                      dilation=k.dilation)
    win = _gather_windows(dyp, flip)  # (N, T, H, W, O, kT, kH, kW)
    sites = N * T * H * W
    kvol = kT * kH * kW
    per_group_in = k.weights.shape[1]
    per_group_out = O // k.groups
    if k.groups == 1:
        wmat = flip.weights.transpose(0, 2, 3, 4, 1).reshape(O * kvol, C)
        dx = win.reshape(sites, O * kvol) @ wmat
    else:
        parts = []
        for g in range(k.groups):
            rows = slice(g * per_group_out, (g + 1) * per_group_out)
            cols = win[..., rows, :, :, :].reshape(sites, per_group_out * kvol)
            wmat = flip.weights[rows].transpose(0, 2, 3, 4, 1) \
                .reshape(per_group_out * kvol, per_group_in)
            parts.append(cols @ wmat)
        dx = np.concatenate(parts, axis=1)
    return dx.reshape(in_shape)


def conv3d_backward(x: np.ndarray, k: ConvKernel, dy: np.ndarray, cache=None):
    """Adjoint of conv3d: returns (dx, dweights, dbias-or-None).

    ``cache`` may carry the forward's column matrices to skip the re-gather.
    """
    N, T, H, W, C = x.shape
    To, Ho, Wo = dy.shape[1:4]
    O = k.out_channels
    db = dy.sum(axis=(0, 1, 2, 3)) if k.bias is not None else None

    if _is_pointwise(k):
        dy2 = dy.reshape(-1, O)
        dx = (dy2 @ k.weights.reshape(O, C)).reshape(x.shape)
        dw = (dy2.T @ x.reshape(-1, C)).reshape(k.weights.shape)
        return dx, dw, db

    if _is_depthwise_temporal(k, C):
        kT = k.kernel_dims[0]
        dT = k.dilation[0]
        pT = k.padding[0]
        xp = _pad_video(x, (pT, 0, 0))
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(k.weights)
        for j in range(kT):
            sl = slice(j * dT, j * dT + To)
            dxp[:, sl] += dy * k.weights[:, 0, j, 0, 0]
            dw[:, 0, j, 0, 0] = np.einsum("nthwc,nthwc->c", dy, xp[:, sl])
        dx = dxp[:, pT:pT + T] if pT else dxp
        return np.ascontiguousarray(dx), dw, db

    kT, kH, kW = k.kernel_dims
    dT, dH, dW = k.dilation
    sT, sH, sW = k.stride
    pT, pH, pW = k.padding
    sites = N * To * Ho * Wo
    kvol = kT * kH * kW
    per_group_in = k.weights.shape[1]
    per_group_out = O // k.groups
    dy2 = dy.reshape(sites, O)

    if cache is None:
        win = _gather_windows(_pad_video(x, k.padding), k)
        if k.groups == 1:
            cache = [win.reshape(sites, C * kvol)]
        else:
            cache = [win[..., g * per_group_in:(g + 1) * per_group_in, :, :, :]
                     .reshape(sites, per_group_in * kvol)
                     for g in range(k.groups)]
    dw = np.empty_like(k.weights)
    for g in range(k.groups):
        rows = slice(g * per_group_out, (g + 1) * per_group_out)
        dw[rows] = (dy2[:, rows].T @ cache[g]) \
            .reshape(per_group_out, per_group_in, kT, kH, kW)

    transposable = (k.stride == (1, 1, 1)
                    and (kT - 1) * dT >= pT
                    and (kH - 1) * dH >= pH
                    and (kW - 1) * dW >= pW)
    if transposable:
        return _conv3d_input_grad(k, dy, x.shape), dw, db

    # Strided or over-padded case: accumulate one kernel tap at a time.
    xp_shape = (N, T + 2 * pT, H + 2 * pH, W + 2 * pW, C)
    dxp = np.zeros(xp_shape, dtype=x.dtype)
    for a, b, c in itertools.product(range(kT), range(kH), range(kW)):
        tap = k.weights[:, :, a, b, c]  # (O, per_group_in)
        if k.groups == 1:
            contrib = dy2 @ tap
        else:
            chunks = [dy2[:, g * per_group_out:(g + 1) * per_group_out]
                      @ tap[g * per_group_out:(g + 1) * per_group_out]
                      for g in range(k.groups)]
            contrib = np.concatenate(chunks, axis=1)
        dxp[:, a * dT: a * dT + sT * To: sT,
            b * dH: b * dH + sH * Ho: sH,
            c * dW: c * dW + sW * Wo: sW] += contrib.reshape(N, To, Ho, Wo, C)
    dx = dxp[:, pT:pT + T, pH:pH + H, pW:pW + W]
    return np.ascontiguousarray(dx), dw, db


def conv3d_oracle(x: np.ndarray, k: ConvKernel) -> np.ndarray:
    """Literal nested-loop convolution; same contract as conv3d, no layout tricks."""
    N, T, H, W, C = video_dims(x)
    if C != k.in_channels:
        raise ShapeError(f"input has {C} channels, kernel expects {k.in_channels}")
    To, Ho, Wo = conv_output_dims((T, H, W), k)
    kT, kH, kW = k.kernel_dims
    dT, dH, dW = k.dilation
    sT, sH, sW = k.stride
    pT, pH, pW = k.padding
    per_group_in = k.weights.shape[1]
    per_group_out = k.out_channels // k.groups
    y = np.zeros((N, To, Ho, Wo, k.out_channels), dtype=x.dtype)
    for n in range(N):
        for t in range(To):
            for h in range(Ho):
                for w in range(Wo):
                    for o in range(k.out_channels):
                        g = o // per_group_out
                        acc = 0.0 if k.bias is None else float(k.bias[o])
                        for a in range(kT):
                            tt = t * sT + a * dT - pT
                            if tt < 0 or tt >= T:
                                continue
                            for b in range(kH):
                                hh = h * sH + b * dH - pH
                                if hh < 0 or hh >= H:
                                    continue
                                for c in range(kW):
                                    ww = w * sW + c * dW - pW
                                    if ww < 0 or ww >= W:
                                        continue
                                    for i in range(per_group_in):
                                        acc += float(k.weights[o, i, a, b, c]) * \
                                            float(x[n, tt, hh, ww, g * per_group_in + i])
                        y[n, t, h, w, o] = acc
    return y


def temporal_diff(x: np.ndarray) -> np.ndarray:
    """Frame-to-frame forward difference; the last frame pads with zeros."""
    video_dims(x)
    out = np.zeros_like(x)
    out[:, :-1] = x[:, 1:] - x[:, :-1]
    return out


def temporal_diff_backward(dy: np.ndarray) -> np.ndarray:
    dx = np.zeros_like(dy)
    dx[:, 1:] += dy[:, :-1]
    dx[:, :-1] -= dy[:, :-1]
    return dx


def channel_pool(x: np.ndarray) -> np.ndarray:
    """Per-site mean and max over channels, stacked as a 2-channel map."""
    video_dims(x)
    return np.stack([x.mean(axis=-1), x.max(axis=-1)], axis=-1)


def channel_pool_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    C = x.shape[-1]
    dx = np.broadcast_to(dy[..., 0:1] / C, x.shape).copy()
    # Max routes to the first attaining channel, matching argmax.
    idx = np.argmax(x, axis=-1)[..., None]
    np.put_along_axis(dx, idx, np.take_along_axis(dx, idx, -1) + dy[..., 1:2], -1)
    return dx


def spatial_pool(x: np.ndarray) -> np.ndarray:
    """Mean over the spatial plane, keeping singleton H and W axes."""
    video_dims(x)
    return x.mean(axis=(2, 3), keepdims=True)


def spatial_pool_backward(dy: np.ndarray, spatial: tuple[int, int]) -> np.ndarray:
    H, W = spatial
    return np.broadcast_to(dy / (H * W), dy.shape[:2] + (H, W) + dy.shape[4:]).copy()


def concat_channels(xs: list[np.ndarray]) -> np.ndarray:
    """Append channels in list order; leading (N, T, H, W) must agree."""
    if not xs:
        raise ShapeError("concat_channels needs at least one input")
    lead = video_dims(xs[0])[:4]
    for x in xs[1:]:
        if video_dims(x)[:4] != lead:
            raise ShapeError(f"cannot concat {x.shape[:4]} with {lead}")
    return np.concatenate(xs, axis=-1)


def split_channels(x: np.ndarray, parts: int = 4) -> list[np.ndarray]:
    """Split into ``parts`` contiguous channel ranges; inverse of concat."""
    C = video_dims(x)[4]
    if C % parts != 0:
        raise ShapeError(f"{C} channels not divisible into {parts} groups")
    w = C // parts
    return [np.ascontiguousarray(x[..., i * w:(i + 1) * w]) for i in range(parts)]


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * y * (1.0 - y)


def softmax(v: np.ndarray) -> np.ndarray:
    """Probability vector from a 1-D logit vector (shift-invariant form)."""
    if v.ndim != 1:
        raise ShapeError(f"softmax expects a vector, got rank {v.ndim}")
    e = np.exp(v - v.max())
    return e / e.sum()


def softmax_backward(w: np.ndarray, dw: np.ndarray) -> np.ndarray:
    return w * (dw - np.dot(w, dw))


def _broadcast_axes(a_shape, b_shape):
    """Axes on which b is a singleton broadcast against a, or ShapeError.

    Allowed partners: equal shapes, a spatially-shared map (H = W = 1) or a
    channel-shared map (C = 1) against a full-rank tensor.
    """
    if a_shape == b_shape:
        return ()
    if len(a_shape) != 5 or len(b_shape) != 5:
        raise ShapeError(f"cannot combine shapes {a_shape} and {b_shape}")
    n, t, h, w, c = b_shape
    if h == w == 1 and (n, t, c) == (a_shape[0], a_shape[1], a_shape[4]):
        return (2, 3)
    if c == 1 and (n, t, h, w) == a_shape[:4]:
        return (4,)
    raise ShapeError(f"cannot combine shapes {a_shape} and {b_shape}")


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise product; b may be spatially- or channel-shared."""
    _broadcast_axes(a.shape, b.shape)
    return a * b


def hadamard_backward(a, b, dy):
    axes = _broadcast_axes(a.shape, b.shape)
    da = dy * b
    db = dy * a
    if axes:
        db = db.sum(axis=axes, keepdims=True)
    return da, db


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise sum under the same broadcast rule as hadamard."""
    _broadcast_axes(a.shape, b.shape)
    return a + b


def add_backward(a, b, dy):
    axes = _broadcast_axes(a.shape, b.shape)
    db = dy.sum(axis=axes, keepdims=True) if axes else dy
    return dy, db


def scale(a: np.ndarray, s: float) -> np.ndarray:
    return a * s


def blend(xs: list[np.ndarray], w: np.ndarray) -> np.ndarray:
    """Weighted sum of same-shaped tensors: sum_i w[i] * xs[i]."""
    if w.ndim != 1 or len(xs) != w.shape[0]:
        raise ShapeError(f"need one weight per tensor, got {w.shape} for {len(xs)} inputs")
    out = xs[0] * w[0]
    for xi, wi in zip(xs[1:], w[1:]):
        if xi.shape != xs[0].shape:
            raise ShapeError("blend inputs must share a shape")
        out += xi * wi
    return out


def blend_backward(xs, w, dy):
    dxs = [dy * wi for wi in w]
    dw = np.array([np.vdot(dy, xi) for xi in xs], dtype=w.dtype)
    return dxs, dw
