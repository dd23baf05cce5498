"""Group Spatial Cue Module (GSCM) and its three motion paths.

The input splits into four equal channel groups.  Group 1 passes through
untouched (an identity anchor preserving backbone appearance features); the
others are recalibrated by attention maps of increasing spatial reach:

  PMM  pointwise: full-resolution attention from per-site temporal change
       (appearance concatenated with its frame difference, spatial
       receptive field 1x1);
  LMM  local: channel-pooled mean/max pair through a 3x3x3 convolution,
       one attention channel shared across all channels of the group;
  GMM  global: spatially squeezed descriptor through a temporal bottleneck,
       one attention vector per frame shared across the whole plane.

All paths gate residually, out = sigmoid(logits) * x + x, so disabling a
path's logits recovers the identity.  Outputs re-concatenate in group order.
"""

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autograd as ag
from .errors import ShapeError
from .kernels import ConvKernel
from .mtcm import DEFAULT_REDUCTION, _he_conv

GROUPS = 4


@dataclass
class PmmParams:
    reduce: ConvKernel    # 1x1x1, Cg -> Cg/r
    temporal: ConvKernel  # 3x1x1, 2*Cg/r -> Cg/r
    expand: ConvKernel    # 1x1x1, Cg/r -> Cg

    def bundles(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, k in (("reduce", self.reduce), ("temporal", self.temporal),
                        ("expand", self.expand)):
            yield f"{prefix}{name}.w", k.weights
            yield f"{prefix}{name}.b", k.bias


@dataclass
class LmmParams:
    conv: ConvKernel      # 3x3x3, 2 pooled channels -> 1 attention channel

    def bundles(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        yield prefix + "conv.w", self.conv.weights
        yield prefix + "conv.b", self.conv.bias


@dataclass
class GmmParams:
    reduce: ConvKernel    # temporal k=1, Cg -> Cg/r, on the squeezed descriptor
    temporal: ConvKernel  # temporal k=3, 2*Cg/r -> Cg/r
    expand: ConvKernel    # temporal k=1, Cg/r -> Cg

    def bundles(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, k in (("reduce", self.reduce), ("temporal", self.temporal),
                        ("expand", self.expand)):
            yield f"{prefix}{name}.w", k.weights
            yield f"{prefix}{name}.b", k.bias


@dataclass
class GscmParams:
    """Per-path parameters; a None path degrades to the identity (group 1 has none)."""
    pmm: PmmParams | None
    lmm: LmmParams | None
    gmm: GmmParams | None

    def bundles(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        if self.pmm is not None:
            yield from self.pmm.bundles(prefix + "pmm.")
        if self.lmm is not None:
            yield from self.lmm.bundles(prefix + "lmm.")
        if self.gmm is not None:
            yield from self.gmm.bundles(prefix + "gmm.")


def init_pmm(group_channels: int, rng, reduction: int = DEFAULT_REDUCTION,
             dtype=np.float32) -> PmmParams:
    if group_channels % reduction != 0:
        raise ShapeError(f"group width {group_channels} not divisible by r={reduction}")
    mid = group_channels // reduction
    return PmmParams(
        reduce=_he_conv(rng, mid, group_channels, (1, 1, 1), dtype),
        temporal=_he_conv(rng, mid, 2 * mid, (3, 1, 1), dtype, padding=(1, 0, 0)),
        expand=_he_conv(rng, group_channels, mid, (1, 1, 1), dtype))


def init_lmm(rng, dtype=np.float32) -> LmmParams:
    return LmmParams(_he_conv(rng, 1, 2, (3, 3, 3), dtype, padding=(1, 1, 1)))


def init_gmm(group_channels: int, rng, reduction: int = DEFAULT_REDUCTION,
             dtype=np.float32) -> GmmParams:
    if group_channels % reduction != 0:
        raise ShapeError(f"group width {group_channels} not divisible by r={reduction}")
    mid = group_channels // reduction
    return GmmParams(
        reduce=_he_conv(rng, mid, group_channels, (1, 1, 1), dtype),
        temporal=_he_conv(rng, mid, 2 * mid, (3, 1, 1), dtype, padding=(1, 0, 0)),
        expand=_he_conv(rng, group_channels, mid, (1, 1, 1), dtype))


def init_gscm(channels: int, rng, reduction: int = DEFAULT_REDUCTION,
              dtype=np.float32, *, pmm: bool = True, lmm: bool = True,
              gmm: bool = True) -> GscmParams:
    if channels % GROUPS != 0:
        raise ShapeError(f"{channels} channels not divisible into {GROUPS} groups")
    cg = channels // GROUPS
    return GscmParams(
        pmm=init_pmm(cg, rng, reduction, dtype) if pmm else None,
        lmm=init_lmm(rng, dtype) if lmm else None,
        gmm=init_gmm(cg, rng, reduction, dtype) if gmm else None)


def pmm_attention(f2: np.ndarray, p: PmmParams) -> np.ndarray:
    """Pointwise attention at full (N, T, H, W, Cg) resolution."""
    appearance = ag.conv3d(f2, p.reduce)
    paired = ag.concat_channels([appearance, ag.temporal_diff(appearance)])
    return ag.sigmoid(ag.conv3d(ag.conv3d(paired, p.temporal), p.expand))


def pmm_forward(f2: np.ndarray, p: PmmParams) -> np.ndarray:
    return ag.add(ag.hadamard(pmm_attention(f2, p), f2), f2)


def lmm_attention(f3: np.ndarray, p: LmmParams) -> np.ndarray:
    """Channel-shared attention, one map of shape (N, T, H, W, 1)."""
    return ag.sigmoid(ag.conv3d(ag.channel_pool(f3), p.conv))


def lmm_forward(f3: np.ndarray, p: LmmParams) -> np.ndarray:
    return ag.add(ag.hadamard(f3, lmm_attention(f3, p)), f3)


def gmm_attention(f4: np.ndarray, p: GmmParams) -> np.ndarray:
    """Spatially-shared attention, one vector per frame: (N, T, 1, 1, Cg)."""
    descriptor = ag.spatial_pool(f4)
    reduced = ag.conv3d(descriptor, p.reduce)
    paired = ag.concat_channels([reduced, ag.temporal_diff(reduced)])
    return ag.sigmoid(ag.conv3d(ag.conv3d(paired, p.temporal), p.expand))


def gmm_forward(f4: np.ndarray, p: GmmParams) -> np.ndarray:
    return ag.add(ag.hadamard(f4, gmm_attention(f4, p)), f4)


def gscm_forward(f: np.ndarray, p: GscmParams) -> np.ndarray:
    """Split into four groups, recalibrate groups 2-4, re-concatenate."""
    f1, f2, f3, f4 = ag.split_channels(f, GROUPS)
    g2 = pmm_forward(f2, p.pmm) if p.pmm is not None else f2
    g3 = lmm_forward(f3, p.lmm) if p.lmm is not None else f3
    g4 = gmm_forward(f4, p.gmm) if p.gmm is not None else f4
    return ag.concat_channels([f1, g2, g3, g4])


def _bottleneck_path_params(group_channels: int, reduction: int) -> int:
    mid = group_channels // reduction
    reduce = group_channels * mid + mid
    temporal = 3 * (2 * mid) * mid + mid
    expand = mid * group_channels + group_channels
    return reduce + temporal + expand


def gscm_param_count(channels: int, reduction: int = DEFAULT_REDUCTION, *,
                     pmm: bool = True, lmm: bool = True,
                     gmm: bool = True) -> dict[str, int]:
    """Exact learnable-scalar count per path and total for one insertion site."""
    if channels % GROUPS != 0:
        raise ShapeError(f"{channels} channels not divisible into {GROUPS} groups")
    cg = channels // GROUPS
    if cg % reduction != 0:
        raise ShapeError(f"group width {cg} not divisible by r={reduction}")
    counts = {
        "pmm": _bottleneck_path_params(cg, reduction) if pmm else 0,
        "lmm": (27 * 2 * 1 + 1) if lmm else 0,
        "gmm": _bottleneck_path_params(cg, reduction) if gmm else 0,
    }
    counts["total"] = sum(counts.values())
    return counts


def gscm_mac_count(sites: int, frames: int, channels: int,
                   reduction: int = DEFAULT_REDUCTION, *, pmm: bool = True,
                   lmm: bool = True, gmm: bool = True) -> dict[str, int]:
    """MACs per forward; ``sites`` = T*H*W, GMM works on the squeezed T axis."""
    cg = channels // GROUPS
    mid = cg // reduction
    counts = {
        "pmm": sites * (mid * cg + mid * (3 * 2 * mid) + cg * mid) if pmm else 0,
        "lmm": sites * (27 * 2) if lmm else 0,
        "gmm": frames * (mid * cg + mid * (3 * 2 * mid) + cg * mid) if gmm else 0,
    }
    counts["total"] = sum(counts.values())
    return counts


def suppress_attention(p: GscmParams) -> None:
    """Drive every path's attention gate to ~0 (pure identity behaviour)."""
    for path in (p.pmm, p.gmm):
        if path is not None:
            path.expand.weights[:] = 0.0
            path.expand.bias[:] = -30.0
    if p.lmm is not None:
        p.lmm.conv.weights[:] = 0.0
        p.lmm.conv.bias[:] = -30.0
