"""Kernel-level checks against hand values and independent oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import fd_grad, naive_matmul, rel_err, scalar_cross_entropy, scalar_swiglu
from sysanchor import kernels

NEG = float("-inf")


class TestMatmul:
    def test_identity(self):
        eye = np.eye(2, dtype=np.float32)
        b = np.array([[3.0, 4.0], [5.0, 6.0]], dtype=np.float32)
        np.testing.assert_array_equal(kernels.matmul(eye, b), b)

    def test_hand_case(self):
        out = kernels.matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]]))
        np.testing.assert_allclose(out, [[11.0]])

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(7, 5))
        b = rng.normal(size=(5, 3))
        assert rel_err(kernels.matmul(a, b), naive_matmul(a, b)) <= 1e-6

    def test_shape_mismatch_reports_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
            kernels.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


class TestMaskedSoftmax:
    def test_symmetric_pair(self):
        out = kernels.masked_softmax(np.zeros((1, 2), np.float32), np.zeros((1, 2), np.float32))
        np.testing.assert_allclose(out, [[0.5, 0.5]], atol=1e-7)

    def test_hand_masked_row(self):
        logits = np.array([[1.0, 2.0, 3.0]], dtype=np.float32)
        mask = np.array([[0.0, NEG, 0.0]], dtype=np.float32)
        out = kernels.masked_softmax(logits, mask)
        expected = np.array([1.0 / (1.0 + np.e**2), 0.0, np.e**2 / (1.0 + np.e**2)])
        np.testing.assert_allclose(out[0], expected, atol=1e-6)

    def test_fully_masked_row_is_zero_not_nan(self):
        logits = np.array([[5.0, -2.0, 0.3]], dtype=np.float32)
        out = kernels.masked_softmax(logits, np.full((1, 3), NEG, np.float32))
        np.testing.assert_array_equal(out, np.zeros((1, 3), np.float32))

    def test_mask_broadcasts(self):
        logits = np.zeros((2, 3, 4, 4), dtype=np.float32)
        mask = np.zeros((4, 4), dtype=np.float32)
        mask[0, 1:] = NEG
        out = kernels.masked_softmax(logits, mask)
        np.testing.assert_allclose(out[:, :, 0, 0], 1.0)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
    def test_rows_sum_to_one_over_allowed(self, rows, cols, seed):
        rng = np.random.default_rng(seed)
        logits = rng.normal(size=(rows, cols)).astype(np.float32) * 3
        mask = np.where(rng.random((rows, cols)) < 0.4, NEG, 0.0).astype(np.float32)
        out = kernels.masked_softmax(logits, mask)
        sums = out.sum(axis=-1)
        dead = np.isneginf(mask).all(axis=-1)
        assert np.all(np.abs(sums[~dead] - 1.0) <= 1e-6)
        assert np.all(out[dead] == 0.0)
        assert np.all(out[np.isneginf(mask)] == 0.0)


class TestRmsnorm:
    def test_unit_rms_passthrough(self):
        x = np.ones((1, 4), dtype=np.float32)
        np.testing.assert_allclose(kernels.rmsnorm(x, np.ones(4, np.float32), 0.0), x)

    def test_hand_value(self):
        out = kernels.rmsnorm(np.array([[2.0, 0.0]], np.float32), np.ones(2, np.float32), 0.0)
        np.testing.assert_allclose(out, [[np.sqrt(2.0), 0.0]], rtol=1e-6)

    def test_zero_input(self):
        x = np.zeros((1, 2), dtype=np.float32)
        np.testing.assert_array_equal(kernels.rmsnorm(x, np.ones(2, np.float32), 1e-6), x)

    def test_gain_shape_error(self):
        with pytest.raises(ValueError, match="gain"):
            kernels.rmsnorm(np.zeros((2, 4)), np.ones(3), 1e-6)

    @settings(max_examples=50, deadline=None)
    @given(
        st.floats(min_value=1e-3, max_value=1e3),
        st.integers(2, 8),
        st.integers(0, 2**31 - 1),
    )
    def test_scale_invariance(self, c, d, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(3, d)) + 0.1
        gain = rng.normal(size=d)
        a = kernels.rmsnorm(x, gain, 0.0)
        b = kernels.rmsnorm(c * x, gain, 0.0)
        assert rel_err(a, b) <= 1e-6


class TestSwigluFfn:
    def test_zero_down_projection_yields_zero(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(3, 4)).astype(np.float32)
        gate = rng.normal(size=(4, 16)).astype(np.float32)
        up = rng.normal(size=(4, 16)).astype(np.float32)
        out = kernels.swiglu_ffn(x, gate, up, np.zeros((16, 4), np.float32))
        np.testing.assert_array_equal(out, np.zeros_like(x))

    def test_zero_input_yields_zero(self):
        rng = np.random.default_rng(2)
        gate = rng.normal(size=(4, 16)).astype(np.float32)
        up = rng.normal(size=(4, 16)).astype(np.float32)
        down = rng.normal(size=(16, 4)).astype(np.float32)
        out = kernels.swiglu_ffn(np.zeros((2, 4), np.float32), gate, up, down)
        np.testing.assert_array_equal(out, np.zeros((2, 4), np.float32))

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=4)
        gate = rng.normal(size=(4, 16))
        up = rng.normal(size=(4, 16))
        down = rng.normal(size=(16, 4))
        ours = kernels.swiglu_ffn(x[None, :], gate, up, down)[0]
        assert rel_err(ours, scalar_swiglu(x, gate, up, down)) <= 1e-6


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss, _, count = kernels.cross_entropy(np.zeros((2, 4)), np.array([1, 3]))
        assert count == 2
        assert abs(loss - np.log(4.0)) <= 1e-7

    def test_confident_correct_logit_drives_loss_to_zero(self):
        prev = np.inf
        for scale in (2.0, 8.0, 20.0):
            logits = np.zeros((1, 5))
            logits[0, 2] = scale
            loss, _, _ = kernels.cross_entropy(logits, np.array([2]))
            assert loss < prev
            prev = loss
        assert prev < 1e-6

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(4)
        logits = rng.normal(size=(6, 9))
        targets = rng.integers(0, 9, size=6)
        mask = np.array([1, 1, 0, 1, 0, 1])
        loss, _, _ = kernels.cross_entropy(logits, targets, mask)
        assert abs(loss - scalar_cross_entropy(logits, targets, mask)) <= 1e-6

    def test_target_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            kernels.cross_entropy(np.zeros((1, 4)), np.array([4]))

    def test_all_masked_rows_give_zero_loss(self):
        loss, _, count = kernels.cross_entropy(np.ones((2, 3)), np.array([0, 1]), np.zeros(2))
        assert loss == 0.0 and count == 0


class TestKernelGradients:
    """Analytic backward passes against central finite differences (float64)."""

    def test_rmsnorm_backward(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(3, 6))
        gain = rng.normal(size=6)
        w = rng.normal(size=(3, 6))
        gx, ggain = kernels.rmsnorm_backward(x, gain, 1e-6, w)
        assert rel_err(gx, fd_grad(lambda v: np.sum(kernels.rmsnorm(v, gain, 1e-6) * w), x)) <= 1e-4
        assert rel_err(ggain, fd_grad(lambda v: np.sum(kernels.rmsnorm(x, v, 1e-6) * w), gain)) <= 1e-4

    def test_masked_softmax_backward(self):
        rng = np.random.default_rng(6)
        logits = rng.normal(size=(4, 5))
        mask = np.where(rng.random((4, 5)) < 0.3, NEG, 0.0)
        mask[2] = NEG  # one fully dead row
        w = rng.normal(size=(4, 5))
        probs = kernels.masked_softmax(logits, mask)
        gl = kernels.masked_softmax_backward(probs, w)
        fd = fd_grad(lambda v: np.sum(kernels.masked_softmax(v, mask) * w), logits)
        assert rel_err(gl, fd) <= 1e-4

    def test_silu_gate_backward(self):
        rng = np.random.default_rng(7)
        g = rng.normal(size=(3, 4))
        u = rng.normal(size=(3, 4))
        w = rng.normal(size=(3, 4))
        dg, du = kernels.silu_gate_backward(g, u, w)
        assert rel_err(dg, fd_grad(lambda v: np.sum(kernels.silu_gate(v, u) * w), g)) <= 1e-4
        assert rel_err(du, fd_grad(lambda v: np.sum(kernels.silu_gate(g, v) * w), u)) <= 1e-4

    def test_cross_entropy_backward(self):
        rng = np.random.default_rng(8)
        logits = rng.normal(size=(5, 7))
        targets = rng.integers(0, 7, size=5)
        mask = np.array([1, 0, 1, 1, 0])
        _, probs, count = kernels.cross_entropy(logits, targets, mask)
        gl = kernels.cross_entropy_backward(probs, targets, mask, count, 1.0)
        fd = fd_grad(lambda v: kernels.cross_entropy(v, targets, mask)[0], logits)
        assert rel_err(gl, fd) <= 1e-4
