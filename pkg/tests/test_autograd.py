"""Tape mechanics and finite-difference certification of the hand adjoints."""

import numpy as np
import pytest

from canet import autograd as ag
from canet import gradcheck as gc
from canet import kernels as K
from canet.errors import NumericError, ShapeError, StateError

rng = np.random.default_rng(42)


def test_identity_loss_gradient_is_ones():
    x = rng.standard_normal((1, 2, 3, 3, 4))
    with ag.GradTape() as tape:
        y = ag.scale(x, 1.0)
    tape.backward(y)  # seed defaults to ones: loss = sum(y)
    np.testing.assert_array_equal(tape.grad(x), np.ones_like(x))


def test_sum_of_sigmoid_at_zero_gives_quarter():
    x = np.zeros((1, 1, 2, 2, 3))
    with ag.GradTape() as tape:
        y = ag.sigmoid(x)
    tape.backward(y)
    np.testing.assert_allclose(tape.grad(x), 0.25, rtol=1e-15)


def test_double_backward_is_a_state_error():
    x = rng.standard_normal((1, 1, 2, 2, 2))
    with ag.GradTape() as tape:
        y = ag.sigmoid(x)
    tape.backward(y)
    with pytest.raises(StateError):
        tape.backward(y)


def test_seed_shape_mismatch_raises():
    x = rng.standard_normal((1, 1, 2, 2, 2))
    with ag.GradTape() as tape:
        y = ag.sigmoid(x)
    with pytest.raises(ShapeError):
        tape.backward(y, np.ones((1, 1, 2, 2, 3)))


def test_gradients_are_bit_deterministic():
    x = rng.standard_normal((1, 3, 4, 4, 8))
    k = K.ConvKernel(rng.standard_normal((8, 8, 1, 3, 3)),
                     rng.standard_normal(8), padding=(0, 1, 1))
    grads = []
    for _ in range(2):
        with ag.GradTape() as tape:
            y = ag.sigmoid(ag.conv3d(x, k))
        tape.backward(y)
        grads.append((tape.grad(x), tape.grad(k.weights), tape.grad(k.bias)))
    for a, b in zip(*grads):
        np.testing.assert_array_equal(a, b)


def test_multiple_consumers_accumulate():
    x = rng.standard_normal((1, 1, 2, 2, 2))
    with ag.GradTape() as tape:
        y = ag.add(ag.scale(x, 2.0), x)  # dy/dx = 3
    tape.backward(y)
    np.testing.assert_allclose(tape.grad(x), 3.0, rtol=1e-15)


def test_untouched_value_gets_zero_gradient():
    x = rng.standard_normal((1, 1, 2, 2, 2))
    other = rng.standard_normal(3)
    with ag.GradTape() as tape:
        y = ag.sigmoid(x)
    tape.backward(y)
    np.testing.assert_array_equal(tape.grad(other), np.zeros(3))


def test_split_routes_gradients_per_group():
    x = rng.standard_normal((1, 2, 2, 2, 8))
    with ag.GradTape() as tape:
        parts = ag.split_channels(x, 4)
        y = ag.scale(parts[2], 5.0)  # only group 3 contributes
    tape.backward(y)
    dx = tape.grad(x)
    assert (dx[..., 4:6] == 5.0).all()
    assert not dx[..., :4].any() and not dx[..., 6:].any()


def test_identity_group_gradient_passes_through_bit_exact():
    from canet.gscm import gscm_forward, init_gscm
    p = init_gscm(16, np.random.default_rng(5), dtype=np.float64)
    f = rng.standard_normal((1, 3, 4, 4, 16))
    seed = rng.standard_normal((1, 3, 4, 4, 16))
    with ag.GradTape() as tape:
        out = gscm_forward(f, p)
    tape.backward(out, seed)
    np.testing.assert_array_equal(tape.grad(f)[..., :4], seed[..., :4])


class TestFdCheck:
    def test_linear_map_is_exact_to_rounding(self):
        w = rng.standard_normal((6, 4))
        b = rng.standard_normal(4)
        x = rng.standard_normal((3, 6))
        bundles = {"w": w, "b": b, "x": x}

        def loss_and_grads():
            with ag.GradTape() as tape:
                y = ag.linear(x, w, b)
            tape.backward(y)
            return float(y.sum()), {n: tape.grad(a) for n, a in bundles.items()}

        assert ag.fd_check(loss_and_grads, bundles) <= 1e-10

    def test_dilated_conv_certifies(self):
        x = rng.standard_normal((1, 7, 2, 2, 4))
        k = K.ConvKernel(rng.standard_normal((4, 1, 3, 1, 1)), None, groups=4,
                         dilation=(3, 1, 1), padding=(3, 0, 0))
        proj = rng.standard_normal((1, 7, 2, 2, 4))
        bundles = {"x": x, "w": k.weights}

        def loss_and_grads():
            with ag.GradTape() as tape:
                y = ag.conv3d(x, k)
            tape.backward(y, proj)
            return float(np.vdot(proj, y)), {n: tape.grad(a)
                                             for n, a in bundles.items()}

        assert ag.fd_check(loss_and_grads, bundles) <= 1e-6

    def test_softmax_weighted_branch_sum_certifies_through_logits(self):
        alpha = rng.standard_normal(3)
        branches = [rng.standard_normal((1, 4, 2, 2, 3)) for _ in range(3)]
        proj = rng.standard_normal((1, 4, 2, 2, 3))
        bundles = {"alpha": alpha}

        def loss_and_grads():
            with ag.GradTape() as tape:
                y = ag.blend(branches, ag.softmax(alpha))
            tape.backward(y, proj)
            return float(np.vdot(proj, y)), {"alpha": tape.grad(alpha)}

        assert ag.fd_check(loss_and_grads, bundles) <= 1e-6

    def test_rejects_eps_outside_contract(self):
        bundles = {"x": np.zeros(2)}
        with pytest.raises(ValueError):
            ag.fd_check(lambda: (0.0, {"x": np.zeros(2)}), bundles, eps=1e-2)

    def test_rejects_float32_bundles(self):
        bundles = {"x": np.zeros(2, dtype=np.float32)}
        with pytest.raises(NumericError):
            ag.fd_check(lambda: (0.0, {"x": np.zeros(2)}), bundles)

    def test_non_finite_loss_is_a_numeric_error(self):
        x = np.zeros(2)
        with pytest.raises(NumericError):
            ag.fd_check(lambda: (float("nan"), {"x": np.zeros(2)}), {"x": x})


@pytest.mark.parametrize("name", ["conv3d", "temporal_diff", "channel_pool",
                                  "spatial_pool", "sigmoid", "softmax",
                                  "hadamard", "batchnorm"])
def test_primitive_adjoints_certify(name):
    assert gc.CHECKS[name](0) <= gc.TOLERANCE


def test_corrupted_adjoint_is_detected():
    original = K.sigmoid_backward
    try:
        gc.corrupt_adjoint("sigmoid")
        assert gc.check_sigmoid(0) > gc.TOLERANCE
    finally:
        K.sigmoid_backward = original
