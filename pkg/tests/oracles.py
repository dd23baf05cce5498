"""Straight-line reference compositions used to cross-check the fast paths.

Everything here is built from the naive-loop convolution oracle and plain
numpy reductions; none of it shares layout tricks or code with the optimized
module forwards it verifies.
"""

import numpy as np

from canet.kernels import ConvKernel, conv3d_oracle


def sigmoid_ref(z):
    return 1.0 / (1.0 + np.exp(-z))


def softmax_ref(v):
    e = np.exp(v - v.max())
    return e / e.sum()


def temporal_diff_ref(x):
    out = np.zeros_like(x)
    for t in range(x.shape[1] - 1):
        out[:, t] = x[:, t + 1] - x[:, t]
    return out


def mtcm_ref(g, p):
    reduced = conv3d_oracle(g, p.reduce)
    branches = [conv3d_oracle(reduced, br) for br in p.branches]
    weights = softmax_ref(p.alpha)
    fused = sum(w * b for w, b in zip(weights, branches))
    attention = sigmoid_ref(conv3d_oracle(fused, p.expand))
    return attention * g + g


def pmm_ref(f2, p):
    appearance = conv3d_oracle(f2, p.reduce)
    paired = np.concatenate([appearance, temporal_diff_ref(appearance)], axis=-1)
    logits = conv3d_oracle(conv3d_oracle(paired, p.temporal), p.expand)
    return sigmoid_ref(logits) * f2 + f2


def lmm_ref(f3, p):
    pooled = np.stack([f3.mean(axis=-1), f3.max(axis=-1)], axis=-1)
    attention = sigmoid_ref(conv3d_oracle(pooled, p.conv))
    return f3 * attention + f3


def gmm_ref(f4, p):
    descriptor = f4.mean(axis=(2, 3), keepdims=True)
    reduced = conv3d_oracle(descriptor, p.reduce)
    paired = np.concatenate([reduced, temporal_diff_ref(reduced)], axis=-1)
    logits = conv3d_oracle(conv3d_oracle(paired, p.temporal), p.expand)
    return f4 * sigmoid_ref(logits) + f4


def gscm_ref(f, p):
    width = f.shape[-1] // 4
    f1, f2, f3, f4 = (f[..., i * width:(i + 1) * width] for i in range(4))
    return np.concatenate(
        [f1, pmm_ref(f2, p.pmm), lmm_ref(f3, p.lmm), gmm_ref(f4, p.gmm)], axis=-1)


def random_conv_case(rng, dtype=np.float64):
    """One random (x, kernel) pair exercising groups/dilation/stride/padding."""
    while True:
        n = int(rng.integers(1, 3))
        t = int(rng.integers(1, 6))
        h = int(rng.integers(1, 7))
        w = int(rng.integers(1, 7))
        group_mode = rng.integers(0, 3)
        if group_mode == 0:
            groups, cin = 1, int(rng.integers(1, 9))
        elif group_mode == 1:
            groups = 2
            cin = 2 * int(rng.integers(1, 5))
        else:
            cin = int(rng.integers(1, 9))
            groups = cin
        per_group = cin // groups
        out = groups * int(rng.integers(1, 4))
        kdims = tuple(int(rng.integers(1, 4)) for _ in range(3))
        dilation = tuple(int(rng.integers(1, 4)) for _ in range(3))
        stride = tuple(int(rng.integers(1, 3)) for _ in range(3))
        padding = tuple(int(rng.integers(0, 3)) for _ in range(3))
        spans = [(k - 1) * d + 1 for k, d in zip(kdims, dilation)]
        dims = (t, h, w)
        if any((dims[i] + 2 * padding[i] - spans[i]) < 0 for i in range(3)):
            continue
        x = (0.5 * rng.standard_normal((n, t, h, w, cin))).astype(dtype)
        weights = (0.5 * rng.standard_normal((out, per_group) + kdims)).astype(dtype)
        bias = None if rng.integers(0, 2) else \
            (0.5 * rng.standard_normal(out)).astype(dtype)
        return x, ConvKernel(weights, bias, groups=groups, stride=stride,
                             dilation=dilation, padding=padding)
