"""Finite-difference certification harnesses for every differentiable piece.

Each named check builds a small float64 problem from a seed, runs the traced
forward, and compares analytic gradients against central differences through
``fd_check``.  A random fixed projection turns tensor outputs into a scalar
loss; the end-to-end check uses the real cross-entropy loss.  The CLI's
gradcheck subcommand and the acceptance suite both call ``run_checks``.
"""

from typing import Callable

import numpy as np

from . import autograd as ag
from . import gscm as gscm_mod
from . import kernels as K
from . import mtcm as mtcm_mod
from . import network as net_mod
from .errors import ConfigError
from .kernels import ConvKernel

_F64 = np.float64


def _projected(make_out: Callable[[], np.ndarray], bundles: dict[str, np.ndarray],
               rng: np.random.Generator, *, eps: float = 1e-5,
               min_coords: int = 64) -> float:
    """fd_check of loss = <R, out> for a fixed random projection R."""
    out0 = make_out()
    proj = rng.standard_normal(out0.shape)

    def loss_and_grads():
        with ag.GradTape() as tape:
            out = make_out()
        tape.backward(out, proj)
        return float(np.vdot(proj, out)), {n: tape.grad(a) for n, a in bundles.items()}

    def loss_only():
        return float(np.vdot(proj, make_out()))

    return ag.fd_check(loss_and_grads, bundles, eps=eps, rng=rng,
                       min_coords=min_coords, loss_only=loss_only)


def _rand(rng, *shape):
    return rng.standard_normal(shape)


def _rand_kernel(rng, out_ch, in_per_group, kdims, *, bias=True, **kw) -> ConvKernel:
    w = 0.5 * rng.standard_normal((out_ch, in_per_group) + kdims)
    b = 0.5 * rng.standard_normal(out_ch) if bias else None
    return ConvKernel(w, b, **kw)


def check_conv3d(seed: int) -> float:
    """Covers every geometry the modules use: dense, dilated depthwise,
    grouped, spatially strided, and pointwise."""
    rng = np.random.default_rng(seed)
    cases = [
        ((2, 4, 5, 5, 6), _rand_kernel(rng, 4, 6, (3, 3, 3), padding=(1, 1, 1))),
        ((1, 6, 3, 3, 8), _rand_kernel(rng, 8, 1, (3, 1, 1), bias=False, groups=8,
                                       dilation=(3, 1, 1), padding=(3, 0, 0))),
        ((1, 3, 4, 4, 6), _rand_kernel(rng, 4, 3, (1, 3, 3), groups=2,
                                       padding=(0, 1, 1))),
        ((1, 4, 8, 8, 4), _rand_kernel(rng, 8, 4, (3, 3, 3), stride=(1, 2, 2),
                                       padding=(1, 1, 1))),
        ((2, 2, 3, 3, 5), _rand_kernel(rng, 7, 5, (1, 1, 1))),
    ]
    worst = 0.0
    for shape, k in cases:
        x = _rand(rng, *shape)
        bundles = {"x": x, "w": k.weights}
        if k.bias is not None:
            bundles["b"] = k.bias
        worst = max(worst, _projected(lambda: ag.conv3d(x, k), bundles, rng))
    return worst


def check_temporal_diff(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = _rand(rng, 2, 5, 3, 3, 4)
    return _projected(lambda: ag.temporal_diff(x), {"x": x}, rng)


def check_channel_pool(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = _rand(rng, 2, 3, 4, 4, 6)
    return _projected(lambda: ag.channel_pool(x), {"x": x}, rng)


def check_spatial_pool(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = _rand(rng, 2, 3, 4, 4, 6)
    return _projected(lambda: ag.spatial_pool(x), {"x": x}, rng)


def check_sigmoid(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = _rand(rng, 2, 3, 4, 4, 5)
    return _projected(lambda: ag.sigmoid(x), {"x": x}, rng)


def check_softmax(seed: int) -> float:
    """Plain softmax and the softmax-weighted branch blend (logits as leaf)."""
    rng = np.random.default_rng(seed)
    v = _rand(rng, 7)
    err = _projected(lambda: ag.softmax(v), {"v": v}, rng)
    alpha = _rand(rng, 3)
    branches = [_rand(rng, 1, 4, 3, 3, 2) for _ in range(3)]
    err = max(err, _projected(
        lambda: ag.blend(branches, ag.softmax(alpha)), {"alpha": alpha}, rng))
    return err


def check_hadamard(seed: int) -> float:
    """Elementwise product under both broadcast patterns plus the residual add."""
    rng = np.random.default_rng(seed)
    a = _rand(rng, 2, 3, 4, 4, 5)
    spatial_shared = _rand(rng, 2, 3, 1, 1, 5)
    channel_shared = _rand(rng, 2, 3, 4, 4, 1)
    worst = _projected(lambda: ag.hadamard(a, spatial_shared),
                       {"a": a, "b": spatial_shared}, rng)
    worst = max(worst, _projected(lambda: ag.hadamard(a, channel_shared),
                                  {"a": a, "b": channel_shared}, rng))
    worst = max(worst, _projected(lambda: ag.add(ag.hadamard(a, channel_shared), a),
                                  {"a": a, "b": channel_shared}, rng))
    return worst


def check_batchnorm(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = _rand(rng, 2, 3, 4, 4, 5)
    gamma = 1.0 + 0.1 * _rand(rng, 5)
    beta = 0.1 * _rand(rng, 5)
    return _projected(lambda: ag.batchnorm(x, gamma, beta, training=True),
                      {"x": x, "gamma": gamma, "beta": beta}, rng)


def check_pmm(seed: int) -> float:
    rng = np.random.default_rng(seed)
    p = gscm_mod.init_pmm(8, rng, dtype=_F64)
    x = _rand(rng, 1, 4, 5, 5, 8)
    bundles = dict(p.bundles())
    bundles["x"] = x
    return _projected(lambda: gscm_mod.pmm_forward(x, p), bundles, rng)


def check_lmm(seed: int) -> float:
    rng = np.random.default_rng(seed)
    p = gscm_mod.init_lmm(rng, dtype=_F64)
    x = _rand(rng, 1, 4, 6, 6, 8)
    bundles = dict(p.bundles())
    bundles["x"] = x
    return _projected(lambda: gscm_mod.lmm_forward(x, p), bundles, rng)


def check_gmm(seed: int) -> float:
    rng = np.random.default_rng(seed)
    p = gscm_mod.init_gmm(8, rng, dtype=_F64)
    x = _rand(rng, 1, 6, 4, 4, 8)
    bundles = dict(p.bundles())
    bundles["x"] = x
    return _projected(lambda: gscm_mod.gmm_forward(x, p), bundles, rng)


def check_gscm(seed: int) -> float:
    rng = np.random.default_rng(seed)
    p = gscm_mod.init_gscm(16, rng, dtype=_F64)
    x = _rand(rng, 1, 4, 5, 5, 16)
    bundles = dict(p.bundles())
    bundles["x"] = x
    return _projected(lambda: gscm_mod.gscm_forward(x, p), bundles, rng)


def check_mtcm(seed: int) -> float:
    rng = np.random.default_rng(seed)
    p = mtcm_mod.init_mtcm(8, rng, dtype=_F64)
    x = _rand(rng, 1, 4, 3, 3, 8)
    bundles = dict(p.bundles())
    bundles["x"] = x
    return _projected(lambda: mtcm_mod.mtcm_forward(x, p), bundles, rng)


def _clear_relu_kinks(forward_fn: Callable[[], None], betas: list[np.ndarray],
                      margin: float = 1e-2) -> None:
    """Nudge BN shifts so no ReLU input sits within ``margin`` of its kink.

    Central differences certify gradients only where the block is
    differentiable across the probed ball; a preactivation within reach of
    zero makes the fd estimate cross the kink and disagree with the (correct)
    analytic gradient.  Each ReLU input is offset exactly by the beta of the
    batch norm feeding it (the residual ReLU by the last BN of its block), so
    shifting betas channel-wise moves the operating point off every kink.
    Processing ReLUs in execution order converges in one pass: a shift only
    affects its own and later activations.
    """
    from . import nn as nn_mod
    steps = np.concatenate([[0.0], np.repeat(np.arange(1, 64), 2)
                            * np.tile([margin, -margin], 63)])
    for k, beta in enumerate(betas):
        records: list[np.ndarray] = []
        original = nn_mod.relu

        def spy(z, _records=records, _orig=original):
            _records.append(z)
            return _orig(z)

        nn_mod.relu = spy
        try:
            forward_fn()
        finally:
            nn_mod.relu = original
        z = records[k]
        for c in range(beta.size):
            values = z[..., c].ravel()
            for step in steps:
                if np.abs(values + step).min() >= margin:
                    beta[c] += step
                    break
            else:
                raise RuntimeError(f"could not clear ReLU {k} channel {c} "
                                   f"away from its kink")


def _block_fixture(rng):
    blk = net_mod.BlockParams(
        conv1=net_mod._init_conv_bn(rng, 16, 16, 1, 1, _F64),
        conv2=net_mod._init_conv_bn(rng, 16, 16, 3, 1, _F64),
        conv3=net_mod._init_conv_bn(rng, 16, 16, 1, 1, _F64),
        downsample=None,
        gscm=gscm_mod.init_gscm(16, rng, dtype=_F64),
        mtcm=mtcm_mod.init_mtcm(16, rng, dtype=_F64))
    bundles = {}
    for unit_name, unit in (("conv1", blk.conv1), ("conv2", blk.conv2),
                            ("conv3", blk.conv3)):
        bundles.update(dict(unit.bundles(unit_name)))
    bundles.update(dict(blk.gscm.bundles("gscm.")))
    bundles.update(dict(blk.mtcm.bundles("mtcm.")))
    return blk, bundles


def check_block(seed: int) -> float:
    """One full residual block with both attention modules, train-mode BN."""
    rng = np.random.default_rng(seed)
    blk, bundles = _block_fixture(rng)
    x = _rand(rng, 1, 3, 6, 6, 16)
    bundles["x"] = x
    _clear_relu_kinks(lambda: net_mod.block_forward(x, blk, training=True),
                      [blk.conv1.beta, blk.conv2.beta, blk.conv3.beta])
    return _projected(
        lambda: net_mod.block_forward(x, blk, training=True), bundles, rng)


def check_tinycan(seed: int) -> float:
    """End-to-end cross-entropy gradient of the full TinyCAN graph."""
    rng = np.random.default_rng(seed)
    spec = net_mod.get_spec("tinycan")
    params = net_mod.init_net(spec, rng, _F64)
    x = _rand(rng, 2, 2, 8, 8, 1)
    labels = rng.integers(0, spec.classes, size=2)
    bundles = dict(params.bundles())
    betas = [params.stem.beta]
    for blk in params.blocks:
        betas += [blk.conv1.beta, blk.conv2.beta, blk.conv3.beta]
    _clear_relu_kinks(
        lambda: net_mod.net_forward(spec, params, x, training=True), betas)

    def loss_and_grads():
        with ag.GradTape() as tape:
            logits = net_mod.net_forward(spec, params, x, training=True)
            loss = ag.cross_entropy(logits, labels)
        tape.backward(loss)
        return float(loss), {n: tape.grad(a) for n, a in bundles.items()}

    def loss_only():
        logits = net_mod.net_forward(spec, params, x, training=True)
        return float(ag.cross_entropy(logits, labels))

    return ag.fd_check(loss_and_grads, bundles, rng=np.random.default_rng(seed),
                       loss_only=loss_only)


CHECKS: dict[str, Callable[[int], float]] = {
    "conv3d": check_conv3d,
    "temporal_diff": check_temporal_diff,
    "channel_pool": check_channel_pool,
    "spatial_pool": check_spatial_pool,
    "sigmoid": check_sigmoid,
    "softmax": check_softmax,
    "hadamard": check_hadamard,
    "batchnorm": check_batchnorm,
    "pmm": check_pmm,
    "lmm": check_lmm,
    "gmm": check_gmm,
    "gscm": check_gscm,
    "mtcm": check_mtcm,
    "block": check_block,
    "tinycan": check_tinycan,
}

TOLERANCE = 1e-4


def run_checks(modules: list[str] | None = None,
               seeds: tuple[int, ...] = (0,)) -> dict[str, float]:
    """Max relative error per module over the given seeds."""
    if modules is None:
        modules = list(CHECKS)
    results = {}
    for name in modules:
        if name not in CHECKS:
            raise ConfigError(f"unknown gradcheck module {name!r}; "
                              f"choose from {sorted(CHECKS)}")
        results[name] = max(CHECKS[name](seed) for seed in seeds)
    return results


# Adjoints that the mutation hook below can deliberately corrupt; keyed by the
# op name, each patches the kernel-level backward with a 1% scale error.
_CORRUPTABLE = {
    "sigmoid": (K, "sigmoid_backward"),
    "softmax": (K, "softmax_backward"),
    "temporal_diff": (K, "temporal_diff_backward"),
}


def corrupt_adjoint(name: str) -> None:
    """Test hook: make one op's backward wrong so gradcheck must flag it."""
    if name not in _CORRUPTABLE:
        raise ConfigError(f"no corruptible adjoint named {name!r}; "
                          f"choose from {sorted(_CORRUPTABLE)}")
    mod, attr = _CORRUPTABLE[name]
    original = getattr(mod, attr)
    setattr(mod, attr, lambda *a, **kw: original(*a, **kw) * 1.01)
