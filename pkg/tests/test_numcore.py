import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedamole import numcore as nc
from conftest import analytic_grads, finite_difference, relative_error

finite_rows = arrays(
    np.float64,
    st.tuples(st.integers(1, 4), st.integers(1, 5)),
    elements=st.floats(-50, 50, allow_nan=False),
)


class TestTensor:
    def test_data_is_float64(self):
        t = nc.Tensor([[1, 2], [3, 4]])
        assert t.data.dtype == np.float64
        assert t.shape == (2, 2)

    def test_parameter_grad_matches_shape(self):
        p = nc.Parameter(np.ones((3, 2)))
        assert p.grad.shape == p.data.shape
        assert not p.grad.any()

    def test_no_tape_means_no_recording(self):
        a = nc.Parameter(np.ones((2, 2)))
        out = a @ a
        assert out._parents == ()


class TestMatmul:
    def test_identity(self):
        out = nc.matmul(nc.Tensor(np.eye(2)), nc.Tensor([[1, 2], [3, 4]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_projector(self):
        out = nc.matmul(nc.Tensor([[1, 0], [0, 0]]), nc.Tensor([[5], [7]]))
        np.testing.assert_array_equal(out.data, [[5], [0]])

    def test_hand_case(self):
        out = nc.matmul(nc.Tensor([[1, 2], [3, 4]]), nc.Tensor([[1], [1]]))
        np.testing.assert_array_equal(out.data, [[3], [7]])

    def test_shape_mismatch(self):
        with pytest.raises(nc.ShapeError):
            nc.matmul(nc.Tensor(np.ones((2, 3))), nc.Tensor(np.ones((2, 3))))


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(nc.softmax_rows(nc.Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])

    def test_log_three(self):
        out = nc.softmax_rows(nc.Tensor([[0.0, np.log(3.0)]])).data
        np.testing.assert_allclose(out, [[0.25, 0.75]], atol=1e-15)

    def test_large_logits_are_stable(self):
        np.testing.assert_allclose(nc.softmax_rows(nc.Tensor([[1000.0, 1000.0]])).data, [[0.5, 0.5]])

    def test_mask_zeroes_entries(self):
        out = nc.softmax_rows(nc.Tensor([[1.0, 5.0, 0.0]]), np.array([[True, False, True]])).data
        assert out[0, 1] == 0.0
        np.testing.assert_allclose(out.sum(), 1.0)

    def test_fully_masked_row_rejected(self):
        with pytest.raises(ValueError):
            nc.softmax_rows(nc.Tensor([[1.0, 2.0]]), np.array([[False, False]]))

    @settings(max_examples=60, deadline=None)
    @given(finite_rows, st.floats(-100, 100))
    def test_rows_sum_to_one_and_shift_invariant(self, x, c):
        p = nc.softmax_rows(nc.Tensor(x)).data
        assert np.isfinite(p).all()
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
        np.testing.assert_allclose(nc.softmax_rows(nc.Tensor(x + c)).data, p, atol=1e-9)


class TestNLL:
    def test_uniform(self):
        loss = nc.nll_token_loss(nc.Tensor(np.zeros((1, 4))), [2], [True])
        assert loss.item() == pytest.approx(np.log(4), abs=1e-12)

    def test_certain(self):
        loss = nc.nll_token_loss(nc.Tensor([[0.0, 800.0]]), [1], [True])
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_hand_case(self):
        loss = nc.nll_token_loss(nc.Tensor([[0.0, np.log(3.0)]]), [1], [True])
        assert loss.item() == pytest.approx(-np.log(0.75), abs=1e-12)

    def test_mask_selects_rows(self):
        logits = nc.Tensor([[0.0, 0.0], [0.0, np.log(3.0)]])
        loss = nc.nll_token_loss(logits, [0, 1], [False, True])
        assert loss.item() == pytest.approx(-np.log(0.75))

    def test_empty_mask_rejected(self):
        with pytest.raises(ValueError):
            nc.nll_token_loss(nc.Tensor(np.zeros((2, 3))), [0, 1], [False, False])


class TestBackward:
    def test_sum_of_matvec(self):
        W = nc.Parameter(np.arange(4.0).reshape(2, 2))
        x = nc.Tensor([[1.0], [1.0]])
        with nc.Tape() as tape:
            loss = nc.total(W @ x)
        nc.backward(loss, tape)
        np.testing.assert_array_equal(W.grad, [[1, 1], [1, 1]])

    def test_frozen_gets_no_grad(self):
        W = nc.Parameter(np.ones((2, 2)), trainable=False)
        V = nc.Parameter(np.ones((2, 2)))
        with nc.Tape() as tape:
            loss = nc.total(nc.matmul(W, V))
        nc.backward(loss, tape)
        assert not W.grad.any()
        assert V.grad.any()

    def test_non_scalar_loss_rejected(self):
        W = nc.Parameter(np.ones((2, 2)))
        with nc.Tape() as tape:
            out = W * 2.0
        with pytest.raises(nc.ShapeError):
            nc.backward(out, tape)

    def test_loss_outside_tape_rejected(self):
        W = nc.Parameter(np.ones((2, 2)))
        with nc.Tape() as tape:
            pass
        with pytest.raises(nc.TapeError):
            nc.backward(nc.total(W), tape)

    def test_topological_order(self):
        W = nc.Parameter(np.ones((2, 2)))
        with nc.Tape() as tape:
            nc.total(nc.exp(W @ W) * W)
        seen = set()
        for node in tape.nodes:
            for parent in node._parents:
                if parent._parents:
                    assert id(parent) in seen
            seen.add(id(node))

    def test_composite_matches_finite_differences(self, rng):
        W = nc.Parameter(rng.normal(size=(5, 4)))
        g = nc.Parameter(rng.normal(size=(1, 4)) + 1.0)
        E = nc.Parameter(rng.normal(size=(6, 4)))
        ids = np.array([0, 3, 3, 5])
        mask = np.array([True, False, True, True])
        targets = np.array([1, 2, 0, 4])

        def build():
            h = nc.rms_norm(nc.embedding(E, ids), g)
            z = nc.gelu(nc.matmul(h, nc.transpose(W)))
            a = nc.concat_columns([nc.columns(z, 0, 2), nc.exp(nc.columns(z, 2, 5)) * 0.1])
            s = nc.softmax_rows(a, np.tril(np.ones((4, 5), dtype=bool)))
            return nc.nll_token_loss(nc.log(s + 1.0) * 3.0 - nc.sum_rows(z), targets, mask) + nc.total(nc.mean_rows(z))

        params = [W, g, E]
        grads = analytic_grads(build, params)
        for p, grad in zip(params, grads):
            fd = finite_difference(lambda: build().item(), p)
            assert relative_error(grad, fd) < 1e-6

    def test_broadcast_grad(self, rng):
        a = nc.Parameter(rng.normal(size=(3, 4)))
        b = nc.Parameter(rng.normal(size=(1, 4)))
        grads = analytic_grads(lambda: nc.total((a - b) * (a + b)), [a, b])
        np.testing.assert_allclose(grads[0], 2 * a.data)
        np.testing.assert_allclose(grads[1], -2 * b.data.repeat(3, axis=0).sum(axis=0, keepdims=True))

    def test_determinism(self, rng):
        x = rng.normal(size=(3, 3))
        a1 = nc.softmax_rows(nc.Tensor(x) @ nc.Tensor(x)).data
        a2 = nc.softmax_rows(nc.Tensor(x) @ nc.Tensor(x)).data
        assert a1.tobytes() == a2.tobytes()


class TestAdam:
    def _step(self, p, grad, state):
        p.grad[...] = grad
        nc.adam_step([p], state)

    def test_first_step_is_lr(self):
        p = nc.Parameter(np.zeros(3))
        state = nc.AdamState(lr=0.1)
        self._step(p, np.ones(3), state)
        np.testing.assert_allclose(p.data, -0.1, atol=1e-8)

    def test_zero_gradient_leaves_parameters(self):
        p = nc.Parameter(np.arange(3.0))
        state = nc.AdamState(lr=0.1)
        self._step(p, np.zeros(3), state)
        np.testing.assert_array_equal(p.data, np.arange(3.0))

    def test_second_step_uses_moments(self):
        # closed form: m2 = 0.19 g, v2 = 0.001999 g^2 with bias corrections 0.19 and 0.001999
        p = nc.Parameter(np.zeros(1))
        state = nc.AdamState(lr=0.1)
        self._step(p, np.array([1.0]), state)
        first = p.data.copy()
        self._step(p, np.array([1.0]), state)
        second_delta = p.data - first
        m_hat = (0.1 * 0.9 + 0.1) / (1 - 0.9**2)
        v_hat = (0.001 * 0.999 + 0.001) / (1 - 0.999**2)
        np.testing.assert_allclose(second_delta, -0.1 * m_hat / (np.sqrt(v_hat) + 1e-8))
        assert state.step == 2

    def test_frozen_parameter_unchanged(self):
        frozen = nc.Parameter(np.ones(2), trainable=False)
        live = nc.Parameter(np.ones(2))
        live.grad[...] = 1.0
        nc.adam_step([frozen, live], nc.AdamState(lr=0.5))
        np.testing.assert_array_equal(frozen.data, 1.0)
        assert (live.data < 1.0).all()

    def test_grads_cleared(self):
        p = nc.Parameter(np.zeros(2))
        p.grad[...] = 3.0
        nc.adam_step([p], nc.AdamState(lr=0.1))
        assert not p.grad.any()
