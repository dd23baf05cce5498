"""Multi-scale Temporal Cue Module (MTCM).

Pipeline: a 1x1x1 bottleneck projection (C -> C/r), N parallel depthwise
temporal convolutions with kernel 3 and dilation i for branch i (temporal
padding i keeps T), fused by softmax-normalized learnable branch logits,
a 1x1x1 expansion back to C, sigmoid attention, and residual recalibration:

    out = sigmoid(expand(sum_i softmax(alpha)_i * branch_i(reduce(x)))) * x + x

Branch logits start uniform so every temporal scale contributes equally at
initialization; wider dilations see longer motion context (kernel 3 with
dilation i spans 2i + 1 frames).
"""

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autograd as ag
from .errors import ShapeError
from .kernels import ConvKernel

DEFAULT_BRANCHES = 3
DEFAULT_REDUCTION = 2


@dataclass
class MtcmParams:
    reduce: ConvKernel              # 1x1x1, C -> C/r
    branches: tuple[ConvKernel, ...]  # depthwise 3x1x1, dilation i+1, no bias
    alpha: np.ndarray               # (N,) branch logits
    expand: ConvKernel              # 1x1x1, C/r -> C

    @property
    def branch_count(self) -> int:
        return len(self.branches)

    def bundles(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        yield prefix + "reduce.w", self.reduce.weights
        yield prefix + "reduce.b", self.reduce.bias
        for i, br in enumerate(self.branches):
            yield f"{prefix}branch{i + 1}.w", br.weights
        yield prefix + "alpha", self.alpha
        yield prefix + "expand.w", self.expand.weights
        yield prefix + "expand.b", self.expand.bias


def _he_conv(rng, out_ch, in_per_group, kdims, dtype, *, bias=True, **kw) -> ConvKernel:
    fan_in = in_per_group * int(np.prod(kdims))
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                   size=(out_ch, in_per_group) + tuple(kdims)).astype(dtype)
    b = np.zeros(out_ch, dtype=dtype) if bias else None
    return ConvKernel(w, b, **kw)


def init_mtcm(channels: int, rng: np.random.Generator,
              branches: int = DEFAULT_BRANCHES,
              reduction: int = DEFAULT_REDUCTION,
              dtype=np.float32) -> MtcmParams:
    if channels % reduction != 0:
        raise ShapeError(f"{channels} channels not divisible by reduction {reduction}")
    mid = channels // reduction
    reduce = _he_conv(rng, mid, channels, (1, 1, 1), dtype)
    branch_kernels = tuple(
        _he_conv(rng, mid, 1, (3, 1, 1), dtype, bias=False, groups=mid,
                 dilation=(i, 1, 1), padding=(i, 0, 0))
        for i in range(1, branches + 1))
    alpha = np.full(branches, 1.0 / branches, dtype=dtype)
    expand = _he_conv(rng, channels, mid, (1, 1, 1), dtype)
    return MtcmParams(reduce, branch_kernels, alpha, expand)


def mtcm_forward(g: np.ndarray, p: MtcmParams) -> np.ndarray:
    """Apply the module; output dims equal input dims."""
    reduced = ag.conv3d(g, p.reduce)
    branch_maps = [ag.conv3d(reduced, br) for br in p.branches]
    weights = ag.softmax(p.alpha)
    fused = ag.blend(branch_maps, weights)
    attention = ag.sigmoid(ag.conv3d(fused, p.expand))
    return ag.add(ag.hadamard(attention, g), g)


def mtcm_param_count(channels: int, branches: int = DEFAULT_BRANCHES,
                     reduction: int = DEFAULT_REDUCTION) -> int:
    """Learnable scalars for one insertion site of width ``channels``."""
    if channels % reduction != 0:
        raise ShapeError(f"{channels} channels not divisible by reduction {reduction}")
    mid = channels // reduction
    reduce = channels * mid + mid
    branch = branches * 3 * mid          # depthwise kernel 3, no bias
    expand = mid * channels + channels
    return reduce + branch + branches + expand


def mtcm_mac_count(sites: int, channels: int, branches: int = DEFAULT_BRANCHES,
                   reduction: int = DEFAULT_REDUCTION) -> int:
    """Multiply-accumulates for one forward over ``sites`` = T*H*W positions."""
    mid = channels // reduction
    reduce = sites * mid * channels
    branch = branches * sites * mid * 3  # depthwise: 3 taps per output value
    expand = sites * channels * mid
    return reduce + branch + expand


def suppress_attention(p: MtcmParams) -> None:
    """Drive the attention gate to ~0 so the module passes its input through."""
    p.expand.weights[:] = 0.0
    p.expand.bias[:] = -30.0
