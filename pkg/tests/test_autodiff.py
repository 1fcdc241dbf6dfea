"""Tests for the reverse-mode core: primitives, fused ops, optimizer, RNG."""

import math
import warnings

import numpy as np
import pytest

from longrep.autodiff import (
    AdamWState,
    DiffTensor,
    SeededRng,
    Tape,
    adamw_step,
    backward,
    concat,
    cross_entropy_loss,
    finite_diff_check,
    gelu,
    layer_norm,
    masked_softmax,
    matmul,
    slice_rows,
    take_rows,
    tmean,
    transpose,
    tsum,
)
from longrep.errors import (
    ContractViolation,
    EmptyAttentionError,
    NumericError,
    UnknownNodeError,
)


def grad_of(build):
    """Run `build` under a fresh tape; returns (loss, tape) after backward."""
    tape = Tape()
    with tape:
        loss, leaves = build()
    backward(tape, loss)
    return loss, leaves


class TestBasics:
    def test_square_gradient(self):
        x = DiffTensor([3.0], requires_grad=True)
        _, _ = grad_of(lambda: (tsum(x * x), [x]))
        assert x.grad == pytest.approx([6.0])

    def test_sum_gradient_is_ones(self):
        x = DiffTensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
        grad_of(lambda: (tsum(x), [x]))
        assert np.array_equal(x.grad, np.ones((3, 4)))

    def test_full_reduction_is_shape_one(self):
        x = DiffTensor(np.ones((2, 3)))
        assert tsum(x).shape == (1,)
        assert tmean(x).shape == (1,)
        assert tmean(x).item() == pytest.approx(1.0)

    def test_mean_axis_gradient(self):
        x = DiffTensor(np.ones((4, 5)), requires_grad=True)
        grad_of(lambda: (tsum(tmean(x, axis=0)), [x]))
        assert np.allclose(x.grad, 0.25)

    def test_broadcast_add_unbroadcasts(self):
        a = DiffTensor(np.zeros((3, 4)), requires_grad=True)
        b = DiffTensor(np.zeros(4), requires_grad=True)
        grad_of(lambda: (tsum(a + b), [a, b]))
        assert a.grad.shape == (3, 4)
        assert np.array_equal(b.grad, np.full(4, 3.0))

    def test_matmul_gradients(self):
        a = DiffTensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
        b = DiffTensor([[5.0, 6.0], [7.0, 8.0]], requires_grad=True)
        grad_of(lambda: (tsum(matmul(a, b)), [a, b]))
        assert np.allclose(a.grad, np.ones((2, 2)) @ b.data.T)
        assert np.allclose(b.grad, a.data.T @ np.ones((2, 2)))

    def test_matmul_rejects_1d(self):
        a = DiffTensor(np.ones(3))
        with pytest.raises(ContractViolation):
            matmul(a, a)

    def test_transpose_roundtrip_grad(self):
        a = DiffTensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        grad_of(lambda: (tsum(transpose(a) * transpose(a)), [a]))
        assert np.allclose(a.grad, 2.0 * a.data)

    def test_div_gradient(self):
        a = DiffTensor([8.0], requires_grad=True)
        b = DiffTensor([2.0], requires_grad=True)
        grad_of(lambda: (tsum(a / b), [a, b]))
        assert a.grad == pytest.approx([0.5])
        assert b.grad == pytest.approx([-2.0])

    def test_reused_tensor_accumulates(self):
        x = DiffTensor([2.0], requires_grad=True)
        grad_of(lambda: (tsum((x * x) + x), [x]))
        assert x.grad == pytest.approx([5.0])

    def test_concat_splits_gradient(self):
        a = DiffTensor(np.zeros((2, 3)), requires_grad=True)
        b = DiffTensor(np.zeros((4, 3)), requires_grad=True)
        c = DiffTensor(np.arange(18.0).reshape(6, 3))
        grad_of(lambda: (tsum(concat([a, b], axis=0) * c), [a, b]))
        assert np.array_equal(a.grad, c.data[:2])
        assert np.array_equal(b.grad, c.data[2:])

    def test_slice_rows_scatters(self):
        a = DiffTensor(np.zeros((5, 2)), requires_grad=True)
        grad_of(lambda: (tsum(slice_rows(a, 1, 3)), [a]))
        expected = np.zeros((5, 2))
        expected[1:3] = 1.0
        assert np.array_equal(a.grad, expected)

    def test_take_rows_accumulates_duplicates(self):
        table = DiffTensor(np.zeros((4, 3)), requires_grad=True)
        grad_of(lambda: (tsum(take_rows(table, [1, 1, 2])), [table]))
        assert np.array_equal(table.grad[1], np.full(3, 2.0))
        assert np.array_equal(table.grad[2], np.ones(3))
        assert np.array_equal(table.grad[0], np.zeros(3))

    def test_gelu_known_values(self):
        x = DiffTensor([0.0, 1.0, -1.0])
        y = gelu(x)
        assert y.data[0] == pytest.approx(0.0)
        assert y.data[1] == pytest.approx(0.8413447, abs=1e-6)
        assert y.data[2] == pytest.approx(-0.1586553, abs=1e-6)

    def test_no_grad_outside_tape(self):
        x = DiffTensor([1.0], requires_grad=True)
        y = x * x
        tape = Tape()
        with tape:
            pass
        with pytest.raises(UnknownNodeError):
            backward(tape, y)


class TestBackwardContract:
    def test_non_scalar_loss_rejected(self):
        x = DiffTensor(np.ones(3), requires_grad=True)
        tape = Tape()
        with tape:
            y = x * x
        with pytest.raises(ContractViolation):
            backward(tape, y)

    def test_unreachable_leaf_gets_zero(self):
        x = DiffTensor([1.0], requires_grad=True)
        z = DiffTensor([1.0], requires_grad=True)
        tape = Tape()
        with tape:
            loss = tsum(x * x)
            _ = z * z  # on the tape but not feeding the loss
        backward(tape, loss)
        assert np.array_equal(z.grad, np.zeros(1))

    def test_frozen_leaf_never_gets_grad(self):
        x = DiffTensor([1.0], requires_grad=True)
        c = DiffTensor([2.0], requires_grad=False)
        tape = Tape()
        with tape:
            loss = tsum(x * c)
        backward(tape, loss)
        assert c.grad is None


class TestMaskedSoftmax:
    def test_unmasked_matches_reference(self):
        x = DiffTensor([[1.0, 2.0, 3.0]])
        y = masked_softmax(x, np.ones((1, 3), dtype=bool))
        assert np.allclose(y.data, [[0.09003057, 0.24472847, 0.66524096]], atol=1e-7)

    def test_disallowed_positions_exactly_zero(self):
        x = DiffTensor([[5.0, 1.0, -2.0, 0.0]])
        allow = np.array([[True, False, True, False]])
        y = masked_softmax(x, allow)
        assert y.data[0, 1] == 0.0
        assert y.data[0, 3] == 0.0
        assert y.data.sum() == pytest.approx(1.0)

    def test_shift_invariance_under_mask(self):
        rng = SeededRng(7)
        logits = rng.normal((4, 6))
        allow = rng.uniform(0, 1, (4, 6)) > 0.4
        allow[:, 0] = True  # keep every row non-empty
        a = masked_softmax(DiffTensor(logits), allow).data
        b = masked_softmax(DiffTensor(logits + 1000.0), allow).data
        assert np.abs(a - b).max() < 1e-9

    def test_huge_logits_stay_finite(self):
        x = DiffTensor([[1e4, -1e4, 0.0]])
        y = masked_softmax(x, np.ones((1, 3), dtype=bool))
        assert np.isfinite(y.data).all()
        assert y.data[0, 0] == pytest.approx(1.0)

    def test_all_false_row_raises(self):
        x = DiffTensor(np.zeros((2, 3)))
        allow = np.ones((2, 3), dtype=bool)
        allow[1] = False
        with pytest.raises(EmptyAttentionError):
            masked_softmax(x, allow)

    def test_gradient_matches_finite_difference(self):
        rng = SeededRng(11)
        x = DiffTensor(rng.normal((3, 5)), requires_grad=True)
        w = DiffTensor(rng.normal((3, 5)))
        allow = rng.uniform(0, 1, (3, 5)) > 0.3
        allow[:, 2] = True

        def f():
            return tsum(masked_softmax(x, allow) * w)

        assert finite_diff_check(f, {"x": x}) < 1e-6


class TestLayerNorm:
    def test_normalizes_to_unit_stats(self):
        x = DiffTensor([[1.0, -1.0]])
        g = DiffTensor(np.ones(2))
        b = DiffTensor(np.zeros(2))
        y = layer_norm(x, g, b)
        assert y.data[0, 0] == pytest.approx(1.0, abs=1e-2)
        assert y.data[0, 1] == pytest.approx(-1.0, abs=1e-2)

    def test_gamma_beta_passthrough(self):
        rng = SeededRng(3)
        x = DiffTensor(rng.normal((4, 8)))
        g = DiffTensor(np.full(8, 2.0))
        b = DiffTensor(np.full(8, 0.5))
        y = layer_norm(x, g, b)
        assert y.data.mean(axis=1) == pytest.approx(np.full(4, 0.5), abs=1e-6)

    def test_shape_mismatch_rejected(self):
        x = DiffTensor(np.ones((2, 4)))
        g = DiffTensor(np.ones(3))
        b = DiffTensor(np.ones(4))
        with pytest.raises(ContractViolation):
            layer_norm(x, g, b)

    def test_gradient_matches_finite_difference(self):
        rng = SeededRng(5)
        x = DiffTensor(rng.normal((3, 6)), requires_grad=True)
        g = DiffTensor(rng.normal((6,)) + 1.0, requires_grad=True)
        b = DiffTensor(rng.normal((6,)), requires_grad=True)
        w = DiffTensor(rng.normal((3, 6)))

        def f():
            return tsum(layer_norm(x, g, b) * w)

        assert finite_diff_check(f, {"x": x, "g": g, "b": b}) < 1e-6


class TestCrossEntropy:
    def test_two_class_closed_form(self):
        # -log(sigmoid(2)) = log(1 + exp(-2))
        logits = DiffTensor([[2.0, 0.0]])
        loss = cross_entropy_loss(logits, [0])
        assert loss.item() == pytest.approx(math.log(1 + math.exp(-2)), abs=1e-9)

    def test_uniform_logits_give_log_vocab(self):
        logits = DiffTensor(np.zeros((5, 8)))
        loss = cross_entropy_loss(logits, [0, 1, 2, 3, 4])
        assert loss.item() == pytest.approx(math.log(8), abs=1e-12)

    def test_ignored_positions_contribute_nothing(self):
        logits = DiffTensor(np.array([[4.0, 0.0], [-50.0, 50.0]]))
        full = cross_entropy_loss(logits, [0, -1])
        only = cross_entropy_loss(DiffTensor(logits.data[:1]), [0])
        assert full.item() == pytest.approx(only.item(), abs=1e-12)

    def test_ignored_positions_get_zero_gradient(self):
        logits = DiffTensor(np.zeros((3, 4)), requires_grad=True)
        tape = Tape()
        with tape:
            loss = cross_entropy_loss(logits, [1, -1, 2])
        backward(tape, loss)
        assert np.array_equal(logits.grad[1], np.zeros(4))
        assert logits.grad[0] @ np.ones(4) == pytest.approx(0.0, abs=1e-12)

    def test_all_ignored_warns_and_returns_zero(self):
        logits = DiffTensor(np.ones((2, 3)))
        with pytest.warns(RuntimeWarning):
            loss = cross_entropy_loss(logits, [-1, -1])
        assert loss.item() == 0.0

    def test_out_of_range_target_rejected(self):
        logits = DiffTensor(np.zeros((1, 4)))
        with pytest.raises(ContractViolation):
            cross_entropy_loss(logits, [4])

    def test_gradient_matches_finite_difference(self):
        rng = SeededRng(13)
        x = DiffTensor(rng.normal((4, 7)), requires_grad=True)

        def f():
            return cross_entropy_loss(x, [0, 3, -1, 6])

        assert finite_diff_check(f, {"x": x}) < 1e-6


class TestAdamW:
    def test_first_step_moves_by_lr(self):
        # With fresh moments, m_hat/sqrt(v_hat) is sign(g) up to eps.
        p = DiffTensor([1.0], requires_grad=True)
        state = AdamWState(lr=0.1)
        adamw_step({"p": p}, {"p": np.array([4.0])}, state)
        assert p.data[0] == pytest.approx(0.9, abs=1e-6)
        assert state.t == 1

    def test_decay_only_shrinks(self):
        p = DiffTensor([1.0], requires_grad=True)
        state = AdamWState(lr=0.001, weight_decay=1.0)
        adamw_step({"p": p}, {"p": np.array([0.0])}, state)
        assert p.data[0] == pytest.approx(0.999, abs=1e-12)

    def test_nan_gradient_names_parameter(self):
        p = DiffTensor([1.0], requires_grad=True)
        state = AdamWState()
        with pytest.raises(NumericError, match="w_bad"):
            adamw_step({"w_bad": p}, {"w_bad": np.array([np.nan])}, state)

    def test_converges_on_quadratic(self):
        p = DiffTensor([5.0], requires_grad=True)
        state = AdamWState(lr=0.1)
        for _ in range(300):
            adamw_step({"p": p}, {"p": 2.0 * p.data}, state)
        assert abs(p.data[0]) < 1e-3

    def test_missing_grad_is_skipped(self):
        p = DiffTensor([1.0], requires_grad=True)
        q = DiffTensor([1.0], requires_grad=True)
        state = AdamWState(lr=0.1)
        adamw_step({"p": p, "q": q}, {"p": np.array([1.0])}, state)
        assert q.data[0] == 1.0


class TestFiniteDiff:
    def test_small_mlp_checks_out(self):
        rng = SeededRng(21)
        w1 = DiffTensor(rng.normal((4, 8), std=0.5), requires_grad=True)
        w2 = DiffTensor(rng.normal((8, 3), std=0.5), requires_grad=True)
        x = DiffTensor(rng.normal((5, 4)))

        def f():
            return cross_entropy_loss(matmul(gelu(matmul(x, w1)), w2), [0, 1, 2, 0, 1])

        assert finite_diff_check(f, {"w1": w1, "w2": w2}) < 1e-6

    def test_bad_eps_rejected(self):
        x = DiffTensor([1.0], requires_grad=True)
        with pytest.raises(ContractViolation):
            finite_diff_check(lambda: tsum(x * x), {"x": x}, eps=0.5)

    def test_params_restored_after_check(self):
        x = DiffTensor([1.5, -2.5], requires_grad=True)
        before = x.data.copy()
        finite_diff_check(lambda: tsum(x * x), {"x": x})
        assert np.array_equal(x.data, before)


class TestSeededRng:
    def test_same_seed_same_draws(self):
        a = SeededRng(42).normal((3, 3))
        b = SeededRng(42).normal((3, 3))
        assert np.array_equal(a, b)

    def test_different_seeds_differ(self):
        a = SeededRng(1).normal((16,))
        b = SeededRng(2).normal((16,))
        assert not np.array_equal(a, b)

    def test_spawn_independent_of_parent_draws(self):
        r1 = SeededRng(9)
        r2 = SeededRng(9)
        r2.normal((100,))  # burn draws on one parent only
        assert np.array_equal(r1.spawn(5).normal((4,)), r2.spawn(5).normal((4,)))

    def test_spawn_keys_differ(self):
        r = SeededRng(9)
        assert not np.array_equal(r.spawn(0).normal((8,)), r.spawn(1).normal((8,)))

    def test_state_roundtrip(self):
        r = SeededRng(3)
        r.normal((10,))
        saved = r.get_state()
        a = r.normal((5,))
        r.set_state(saved)
        assert np.array_equal(r.normal((5,)), a)

    def test_integers_inclusive(self):
        r = SeededRng(0)
        draws = {r.integers(1, 3) for _ in range(200)}
        assert draws == {1, 2, 3}
