"""Declarative network assembly and the analytic parameter/MAC counter.

A NetSpec describes a residual video network: a per-frame 2-D stem, a run of
bottleneck blocks, and a classifier head (global average pooling over
(T, H, W) then a linear map).  Inside a block the layer order is

    1x1 reduce -> 3x3 spatial -> GSCM -> MTCM -> 1x1 expand

with the residual add wrapped around the whole block; backbone convolutions
are per-frame (temporal extent 1) so the attention modules are the only
temporal pathway.  Two named families are provided: ``tinycan`` for
desk-scale training on 32x32 clips, and ``resnet50can`` whose geometry
matches an 8/16-frame ResNet-50 and exists for cost accounting and shape
checks.  ``count_cost`` never instantiates parameters; it reproduces the
exact scalar counts from layer shapes (one reported FLOP = one
multiply-accumulate, the convention under which the standard 8-frame
ResNet-50 lands at about 33 G).
"""

import hashlib
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from . import autograd as ag
from . import gscm as gscm_mod
from . import mtcm as mtcm_mod
from .errors import ConfigError, ShapeError
from .gscm import GscmParams, gscm_forward, gscm_mac_count, gscm_param_count, init_gscm
from .kernels import ConvKernel
from .mtcm import MtcmParams, init_mtcm, mtcm_forward, mtcm_mac_count, mtcm_param_count
from .mtcm import _he_conv


@dataclass(frozen=True)
class StemSpec:
    in_channels: int
    out_channels: int
    kernel: int           # spatial; temporal extent is 1
    stride: int
    maxpool: bool


@dataclass(frozen=True)
class BlockSpec:
    in_channels: int
    bottleneck_channels: int
    out_channels: int
    spatial_stride: int
    insert_can: bool


@dataclass(frozen=True)
class CanSettings:
    mtcm: bool
    pmm: bool
    lmm: bool
    gmm: bool
    branches: int = mtcm_mod.DEFAULT_BRANCHES
    reduction: int = mtcm_mod.DEFAULT_REDUCTION

    @property
    def gscm(self) -> bool:
        return self.pmm or self.lmm or self.gmm


CAN_NONE = CanSettings(mtcm=False, pmm=False, lmm=False, gmm=False)
CAN_FULL = CanSettings(mtcm=True, pmm=True, lmm=True, gmm=True)


@dataclass(frozen=True)
class NetSpec:
    name: str
    stem: StemSpec
    blocks: tuple[BlockSpec, ...]
    frames: int
    resolution: int
    classes: int
    can: CanSettings


def tinycan_spec(*, classes: int = 5, frames: int = 8, resolution: int = 32,
                 can: CanSettings = CAN_FULL, name: str = "tinycan") -> NetSpec:
    """Three stages of two blocks at widths 16/32/64 on grayscale clips."""
    insert = can.mtcm or can.gscm
    blocks = []
    in_ch = 16
    for width, stride in ((16, 1), (32, 2), (64, 2)):
        for b in range(2):
            blocks.append(BlockSpec(in_ch, width, width,
                                    stride if b == 0 else 1, insert))
            in_ch = width
    return NetSpec(name, StemSpec(1, 16, 3, 1, False), tuple(blocks),
                   frames, resolution, classes, can)


def resnet50_spec(*, classes: int = 48, frames: int = 8, resolution: int = 224,
                  can: CanSettings = CAN_FULL, name: str = "resnet50can") -> NetSpec:
    """Standard 16-block bottleneck layout; attention in every block."""
    insert = can.mtcm or can.gscm
    blocks = []
    in_ch = 64
    for width, count, stride in ((64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)):
        for b in range(count):
            blocks.append(BlockSpec(in_ch, width, width * 4,
                                    stride if b == 0 else 1, insert))
            in_ch = width * 4
    return NetSpec(name, StemSpec(3, 64, 7, 2, True), tuple(blocks),
                   frames, resolution, classes, can)


_SPEC_BUILDERS = {
    "tinycan": lambda **kw: tinycan_spec(name="tinycan", can=CAN_FULL, **kw),
    "tinycan-baseline": lambda **kw: tinycan_spec(name="tinycan-baseline",
                                                  can=CAN_NONE, **kw),
    "resnet50can": lambda **kw: resnet50_spec(name="resnet50can", can=CAN_FULL, **kw),
    "resnet50": lambda **kw: resnet50_spec(name="resnet50", can=CAN_NONE, **kw),
    "resnet50can-mtcm": lambda **kw: resnet50_spec(
        name="resnet50can-mtcm",
        can=CanSettings(mtcm=True, pmm=False, lmm=False, gmm=False), **kw),
    "resnet50can-gscm": lambda **kw: resnet50_spec(
        name="resnet50can-gscm",
        can=CanSettings(mtcm=False, pmm=True, lmm=True, gmm=True), **kw),
    "resnet50can-pmm": lambda **kw: resnet50_spec(
        name="resnet50can-pmm",
        can=CanSettings(mtcm=False, pmm=True, lmm=False, gmm=False), **kw),
    "resnet50can-lmm": lambda **kw: resnet50_spec(
        name="resnet50can-lmm",
        can=CanSettings(mtcm=False, pmm=False, lmm=True, gmm=False), **kw),
    "resnet50can-gmm": lambda **kw: resnet50_spec(
        name="resnet50can-gmm",
        can=CanSettings(mtcm=False, pmm=False, lmm=False, gmm=True), **kw),
}


def spec_names() -> list[str]:
    return sorted(_SPEC_BUILDERS)


def get_spec(name: str, **overrides) -> NetSpec:
    try:
        builder = _SPEC_BUILDERS[name]
    except KeyError:
        raise ConfigError(f"unknown spec {name!r}; choose from {spec_names()}")
    return builder(**overrides)


def spec_text(spec: NetSpec) -> str:
    """Canonical serialization used for hashing and checkpoint validation."""
    lines = [f"name={spec.name}",
             f"stem={spec.stem.in_channels},{spec.stem.out_channels},"
             f"{spec.stem.kernel},{spec.stem.stride},{int(spec.stem.maxpool)}"]
    for i, b in enumerate(spec.blocks):
        lines.append(f"block{i:02d}={b.in_channels},{b.bottleneck_channels},"
                     f"{b.out_channels},{b.spatial_stride},{int(b.insert_can)}")
    c = spec.can
    lines.append(f"can={int(c.mtcm)},{int(c.pmm)},{int(c.lmm)},{int(c.gmm)},"
                 f"{c.branches},{c.reduction}")
    lines.append(f"frames={spec.frames}")
    lines.append(f"resolution={spec.resolution}")
    lines.append(f"classes={spec.classes}")
    return "\n".join(lines) + "\n"


def spec_hash(spec: NetSpec) -> bytes:
    return hashlib.sha256(spec_text(spec).encode()).digest()


# --------------------------------------------------------------------------
# Parameters.
# --------------------------------------------------------------------------

@dataclass
class ConvBnParams:
    conv: ConvKernel          # bias-free; batch norm provides the shift
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray

    def bundles(self, prefix: str) -> Iterator[tuple[str, np.ndarray]]:
        yield prefix + ".w", self.conv.weights
        yield prefix + ".bn.gamma", self.gamma
        yield prefix + ".bn.beta", self.beta

    def state(self, prefix: str) -> Iterator[tuple[str, np.ndarray]]:
        yield prefix + ".bn.mean", self.running_mean
        yield prefix + ".bn.var", self.running_var


@dataclass
class BlockParams:
    conv1: ConvBnParams
    conv2: ConvBnParams
    conv3: ConvBnParams
    downsample: ConvBnParams | None
    gscm: GscmParams | None
    mtcm: MtcmParams | None


@dataclass
class NetParams:
    stem: ConvBnParams
    blocks: list[BlockParams]
    fc_w: np.ndarray
    fc_b: np.ndarray

    def conv_bn_units(self) -> Iterator[tuple[str, ConvBnParams]]:
        yield "stem", self.stem
        for i, blk in enumerate(self.blocks):
            base = f"block{i:02d}"
            yield f"{base}.conv1", blk.conv1
            yield f"{base}.conv2", blk.conv2
            yield f"{base}.conv3", blk.conv3
            if blk.downsample is not None:
                yield f"{base}.downsample", blk.downsample

    def bundles(self) -> Iterator[tuple[str, np.ndarray]]:
        """All learnable arrays with stable names (excludes BN running stats)."""
        yield "stem.w", self.stem.conv.weights
        yield "stem.bn.gamma", self.stem.gamma
        yield "stem.bn.beta", self.stem.beta
        for i, blk in enumerate(self.blocks):
            base = f"block{i:02d}"
            for unit_name, unit in (("conv1", blk.conv1), ("conv2", blk.conv2),
                                    ("conv3", blk.conv3),
                                    ("downsample", blk.downsample)):
                if unit is not None:
                    yield from unit.bundles(f"{base}.{unit_name}")
            if blk.gscm is not None:
                yield from blk.gscm.bundles(f"{base}.gscm.")
            if blk.mtcm is not None:
                yield from blk.mtcm.bundles(f"{base}.mtcm.")
        yield "head.fc.w", self.fc_w
        yield "head.fc.b", self.fc_b

    def state_bundles(self) -> Iterator[tuple[str, np.ndarray]]:
        for name, unit in self.conv_bn_units():
            yield from unit.state(name)

    def scalar_count(self) -> int:
        return sum(arr.size for _, arr in self.bundles())


def _init_conv_bn(rng, in_ch, out_ch, kernel, stride, dtype,
                  temporal_kernel=1) -> ConvBnParams:
    pad = kernel // 2
    conv = _he_conv(rng, out_ch, in_ch, (temporal_kernel, kernel, kernel), dtype,
                    bias=False, stride=(1, stride, stride),
                    padding=(temporal_kernel // 2, pad, pad))
    return ConvBnParams(conv,
                        gamma=np.ones(out_ch, dtype=dtype),
                        beta=np.zeros(out_ch, dtype=dtype),
                        running_mean=np.zeros(out_ch, dtype=dtype),
                        running_var=np.ones(out_ch, dtype=dtype))


def init_net(spec: NetSpec, rng: np.random.Generator, dtype=np.float32) -> NetParams:
    stem = _init_conv_bn(rng, spec.stem.in_channels, spec.stem.out_channels,
                         spec.stem.kernel, spec.stem.stride, dtype)
    blocks = []
    for b in spec.blocks:
        conv1 = _init_conv_bn(rng, b.in_channels, b.bottleneck_channels, 1, 1, dtype)
        conv2 = _init_conv_bn(rng, b.bottleneck_channels, b.bottleneck_channels,
                              3, b.spatial_stride, dtype)
        conv3 = _init_conv_bn(rng, b.bottleneck_channels, b.out_channels, 1, 1, dtype)
        downsample = None
        if b.spatial_stride != 1 or b.in_channels != b.out_channels:
            downsample = _init_conv_bn(rng, b.in_channels, b.out_channels, 1,
                                       b.spatial_stride, dtype)
        use_can = b.insert_can
        gscm = init_gscm(b.bottleneck_channels, rng, spec.can.reduction, dtype,
                         pmm=spec.can.pmm, lmm=spec.can.lmm, gmm=spec.can.gmm) \
            if use_can and spec.can.gscm else None
        mtcm = init_mtcm(b.bottleneck_channels, rng, spec.can.branches,
                         spec.can.reduction, dtype) \
            if use_can and spec.can.mtcm else None
        blocks.append(BlockParams(conv1, conv2, conv3, downsample, gscm, mtcm))
    feat = spec.blocks[-1].out_channels
    fc_w = rng.normal(0.0, np.sqrt(1.0 / feat),
                      size=(feat, spec.classes)).astype(dtype)
    fc_b = np.zeros(spec.classes, dtype=dtype)
    return NetParams(stem, blocks, fc_w, fc_b)


# --------------------------------------------------------------------------
# Execution.
# --------------------------------------------------------------------------

def _conv_bn(x, unit: ConvBnParams, *, training, bn_sink, act=True):
    y = ag.conv3d(x, unit.conv)
    stats = {} if (training and bn_sink is not None) else None
    y = ag.batchnorm(y, unit.gamma, unit.beta, training=training,
                     running_mean=unit.running_mean,
                     running_var=unit.running_var, stats_out=stats)
    if stats is not None:
        bn_sink.append((unit, stats))
    return ag.relu(y) if act else y


def block_forward(x, blk: BlockParams, *, training=False, bn_sink=None):
    identity = x
    y = _conv_bn(x, blk.conv1, training=training, bn_sink=bn_sink)
    y = _conv_bn(y, blk.conv2, training=training, bn_sink=bn_sink)
    if blk.gscm is not None:
        y = gscm_forward(y, blk.gscm)
    if blk.mtcm is not None:
        y = mtcm_forward(y, blk.mtcm)
    y = _conv_bn(y, blk.conv3, training=training, bn_sink=bn_sink, act=False)
    if blk.downsample is not None:
        identity = _conv_bn(x, blk.downsample, training=training,
                            bn_sink=bn_sink, act=False)
    return ag.relu(ag.add(y, identity))


def net_forward(spec: NetSpec, params: NetParams, x: np.ndarray, *,
                training: bool = False, bn_sink: list | None = None) -> np.ndarray:
    """Class logits (N, K).  Batch rows are independent outside training mode."""
    if x.ndim != 5 or x.shape[4] != spec.stem.in_channels:
        raise ShapeError(f"expected (N, T, H, W, {spec.stem.in_channels}) input, "
                         f"got {x.shape}")
    y = _conv_bn(x, params.stem, training=training, bn_sink=bn_sink)
    if spec.stem.maxpool:
        y = ag.maxpool_spatial(y)
    for blk in params.blocks:
        y = block_forward(y, blk, training=training, bn_sink=bn_sink)
    feats = ag.global_average_pool(y)
    return ag.linear(feats, params.fc_w, params.fc_b)


def strip_can(spec: NetSpec, params: NetParams) -> tuple[NetSpec, NetParams]:
    """Baseline twin sharing the backbone weight arrays, attention removed."""
    base_spec = replace(
        spec, name=spec.name + "-stripped", can=CAN_NONE,
        blocks=tuple(replace(b, insert_can=False) for b in spec.blocks))
    base_blocks = [BlockParams(b.conv1, b.conv2, b.conv3, b.downsample, None, None)
                   for b in params.blocks]
    return base_spec, NetParams(params.stem, base_blocks, params.fc_w, params.fc_b)


def suppress_attention(params: NetParams) -> None:
    """Bias every attention gate to -30 so the network behaves as its baseline."""
    for blk in params.blocks:
        if blk.mtcm is not None:
            mtcm_mod.suppress_attention(blk.mtcm)
        if blk.gscm is not None:
            gscm_mod.suppress_attention(blk.gscm)


# --------------------------------------------------------------------------
# Analytic cost accounting.
# --------------------------------------------------------------------------

@dataclass
class CostEntry:
    name: str
    params: int
    macs: int


@dataclass
class CostReport:
    spec_name: str
    frames: int
    entries: list[CostEntry] = field(default_factory=list)

    def add(self, name: str, params: int, macs: int) -> None:
        self.entries.append(CostEntry(name, int(params), int(macs)))

    @property
    def total_params(self) -> int:
        return sum(e.params for e in self.entries)

    @property
    def total_macs(self) -> int:
        return sum(e.macs for e in self.entries)


def _conv_cost(report, name, out_elems, in_per_group, kvol, out_ch, *, bias):
    params = out_ch * in_per_group * kvol + (out_ch if bias else 0)
    report.add(name, params, out_elems * in_per_group * kvol)


def _bn_cost(report, name, channels):
    report.add(name, 2 * channels, 0)


def count_cost(spec: NetSpec) -> CostReport:
    """Per-layer parameter and MAC counts for one clip of ``spec.frames`` frames.

    MACs follow the multiply-accumulate convention: a convolution producing E
    output elements costs E * kernel_volume * in_channels_per_group; batch
    norm, activations, pooling, and elementwise recalibration count zero.
    """
    report = CostReport(spec.name, spec.frames)
    T = spec.frames
    size = spec.resolution
    s = spec.stem

    size = (size + 2 * (s.kernel // 2) - s.kernel) // s.stride + 1
    stem_elems = T * size * size * s.out_channels
    _conv_cost(report, "stem.conv", stem_elems, s.in_channels, s.kernel ** 2,
               s.out_channels, bias=False)
    _bn_cost(report, "stem.bn", s.out_channels)
    if s.maxpool:
        size = (size + 2 - 3) // 2 + 1
        report.add("stem.maxpool", 0, 0)

    for i, b in enumerate(spec.blocks):
        base = f"block{i:02d}"
        in_size = size
        elems = T * in_size * in_size * b.bottleneck_channels
        _conv_cost(report, f"{base}.conv1", elems, b.in_channels, 1,
                   b.bottleneck_channels, bias=False)
        _bn_cost(report, f"{base}.conv1.bn", b.bottleneck_channels)

        size = (size + 2 - 3) // b.spatial_stride + 1
        elems = T * size * size * b.bottleneck_channels
        _conv_cost(report, f"{base}.conv2", elems, b.bottleneck_channels, 9,
                   b.bottleneck_channels, bias=False)
        _bn_cost(report, f"{base}.conv2.bn", b.bottleneck_channels)

        if b.insert_can:
            sites = T * size * size
            c = spec.can
            if c.gscm:
                gparams = gscm_param_count(b.bottleneck_channels, c.reduction,
                                           pmm=c.pmm, lmm=c.lmm, gmm=c.gmm)
                gmacs = gscm_mac_count(sites, T, b.bottleneck_channels, c.reduction,
                                       pmm=c.pmm, lmm=c.lmm, gmm=c.gmm)
                for path in ("pmm", "lmm", "gmm"):
                    if gparams[path]:
                        report.add(f"{base}.gscm.{path}", gparams[path], gmacs[path])
            if c.mtcm:
                report.add(f"{base}.mtcm",
                           mtcm_param_count(b.bottleneck_channels, c.branches,
                                            c.reduction),
                           mtcm_mac_count(sites, b.bottleneck_channels, c.branches,
                                          c.reduction))

        elems = T * size * size * b.out_channels
        _conv_cost(report, f"{base}.conv3", elems, b.bottleneck_channels, 1,
                   b.out_channels, bias=False)
        _bn_cost(report, f"{base}.conv3.bn", b.out_channels)

        if b.spatial_stride != 1 or b.in_channels != b.out_channels:
            _conv_cost(report, f"{base}.downsample", elems, b.in_channels, 1,
                       b.out_channels, bias=False)
            _bn_cost(report, f"{base}.downsample.bn", b.out_channels)

    feat = spec.blocks[-1].out_channels
    report.add("head.fc", feat * spec.classes + spec.classes, feat * spec.classes)
    return report
