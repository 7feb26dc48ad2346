import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prunelab import numcore as nc

import oracles


def t(arr, grad=True):
    return nc.Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


class TestMatmul:
    def test_identity(self):
        out = nc.matmul(t([[1.0, 0.0], [0.0, 1.0]]), t([[3.0], [4.0]]))
        assert np.array_equal(out.data, [[3.0], [4.0]])

    def test_scalar_cells(self):
        assert nc.matmul(t([[2.0]]), t([[3.0]])).data[0, 0] == 6.0

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        got = nc.matmul(t(a), t(b)).data
        want = oracles.matmul_triple_loop(a, b)
        assert np.max(np.abs(got - want)) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(nc.ShapeError):
            nc.matmul(t(np.ones((2, 3))), t(np.ones((2, 3))))

    def test_batched_matches_loop(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(5, 3, 4))
        b = rng.normal(size=(5, 4, 2))
        got = nc.matmul(t(a), t(b)).data
        for i in range(5):
            assert np.allclose(got[i], oracles.matmul_triple_loop(a[i], b[i]),
                               atol=1e-12)


class TestSoftmax:
    def test_symmetry(self):
        out = nc.softmax(t([0.0, 0.0]))
        assert np.allclose(out.data, [0.5, 0.5], atol=0)

    def test_stabilized_no_overflow(self):
        out = nc.softmax(t([1000.0, 1000.0]))
        assert np.allclose(out.data, [0.5, 0.5], atol=0)

    def test_matches_direct_formula(self):
        x = np.array([1.0, 2.0, 3.0])
        got = nc.softmax(t(x)).data
        want = np.exp(x) / np.exp(x).sum()
        assert np.max(np.abs(got - want)) < 1e-12

    @given(st.lists(st.floats(min_value=-50, max_value=50), min_size=2, max_size=8))
    @settings(max_examples=100, deadline=None)
    def test_sums_to_one(self, vals):
        out = nc.softmax(t(vals))
        assert abs(out.data.sum() - 1.0) < 1e-9
        # in exact arithmetic the range is open (0,1); f64 may saturate
        assert np.all(out.data >= 0) and np.all(out.data <= 1)

    def test_axis_and_bias(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 4))
        bias = rng.normal(size=(3, 4))
        got = nc.softmax(t(x), axis=-1, bias=bias).data
        want = oracles.softmax_direct(x + bias, axis=-1)
        assert np.max(np.abs(got - want)) < 1e-12
        assert np.allclose(got.sum(axis=-1), 1.0, atol=1e-9)


class TestCrossEntropy:
    def test_huge_margin_goes_to_zero(self):
        logits = np.full((1, 5), -1000.0)
        logits[0, 2] = 1000.0
        loss = nc.cross_entropy(t(logits), np.array([2]), np.array([1.0]))
        assert loss.item() < 1e-9

    def test_uniform_is_log_v(self):
        loss = nc.cross_entropy(t(np.zeros((4, 10))), np.zeros(4, dtype=int),
                                np.ones(4))
        assert abs(loss.item() - np.log(10)) < 1e-12
        assert abs(loss.item() - 2.302585093) < 1e-6

    def test_matches_log_softmax_oracle(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(6, 7))
        targets = rng.integers(0, 7, size=6)
        mask = (rng.random(6) > 0.3).astype(float)
        mask[0] = 1.0
        loss = nc.cross_entropy(t(logits), targets, mask)
        logp = oracles.log_softmax_direct(logits)
        want = -(logp[np.arange(6), targets] * mask).sum() / mask.sum()
        assert abs(loss.item() - want) < 1e-10

    def test_empty_mask_errors(self):
        with pytest.raises(nc.ShapeError):
            nc.cross_entropy(t(np.zeros((3, 4))), np.zeros(3, dtype=int), np.zeros(3))


class TestBackward:
    def test_square_gradient(self):
        x = t([3.0])
        loss = nc.tsum(nc.mul(x, x))
        loss.backward()
        assert np.allclose(x.grad, [6.0], atol=1e-12)

    def test_matmul_chain_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        _fd_check(lambda ts: nc.tsum(nc.gelu(nc.matmul(ts[0], ts[1]))),
                  [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))])

    def test_constant_loss_zero_grads(self):
        x = t([1.0, 2.0])
        loss = nc.tsum(nc.mul(x, 0.0))
        loss.backward()
        assert np.array_equal(x.grad, [0.0, 0.0])

    def test_double_backward_raises(self):
        x = t([2.0])
        loss = nc.tsum(nc.mul(x, x))
        loss.backward()
        with pytest.raises(nc.GradError):
            loss.backward()

    def test_backward_needs_scalar(self):
        x = t([1.0, 2.0])
        with pytest.raises(nc.ShapeError):
            nc.mul(x, x).backward()

    def test_shared_node_accumulates_once_per_path(self):
        x = t([1.5])
        y = nc.add(nc.mul(x, x), nc.mul(x, 3.0))  # x^2 + 3x -> dx = 2x + 3
        nc.tsum(y).backward()
        assert np.allclose(x.grad, [6.0], atol=1e-12)


def _fd_check(builder, arrays, tol=1e-4, eps=1e-5):
    """builder(tensors) -> scalar Tensor; checks each grad against central FD."""
    tensors = [t(a.copy()) for a in arrays]
    loss = builder(tensors)
    loss.backward()

    def scalar():
        with nc.no_grad():
            return builder(tensors).item()

    fd = oracles.finite_difference_grads(scalar, [x.data for x in tensors], eps=eps)
    for tensor, want in zip(tensors, fd):
        assert tensor.grad is not None
        assert oracles.rel_err(tensor.grad, want) < tol


class TestGradientsAllOps:
    """Central-difference checks for every differentiable op."""

    def test_add_same_shape(self):
        rng = np.random.default_rng(10)
        _fd_check(lambda ts: nc.tsum(nc.mul(nc.add(ts[0], ts[1]), ts[1])),
                  [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))])

    def test_add_bias_broadcast(self):
        rng = np.random.default_rng(11)
        _fd_check(lambda ts: nc.tsum(nc.gelu(nc.add(ts[0], ts[1]))),
                  [rng.normal(size=(4, 3)), rng.normal(size=(3,))])

    def test_mul(self):
        rng = np.random.default_rng(12)
        _fd_check(lambda ts: nc.tsum(nc.mul(ts[0], ts[1])),
                  [rng.normal(size=(2, 5)), rng.normal(size=(2, 5))])

    def test_matmul_2d(self):
        rng = np.random.default_rng(13)
        _fd_check(lambda ts: nc.tsum(nc.matmul(ts[0], ts[1])),
                  [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))])

    def test_matmul_batched(self):
        rng = np.random.default_rng(14)
        _fd_check(lambda ts: nc.tsum(nc.matmul(ts[0], ts[1])),
                  [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 2))])

    def test_reshape_transpose(self):
        rng = np.random.default_rng(15)
        _fd_check(lambda ts: nc.tsum(nc.mul(
            nc.reshape(nc.transpose(ts[0], (1, 0, 2)), (12,)), 2.0)),
            [rng.normal(size=(2, 3, 2))])

    def test_softmax_grad(self):
        rng = np.random.default_rng(16)
        w = rng.normal(size=(3, 5))
        _fd_check(lambda ts: nc.tsum(nc.mul(nc.softmax(ts[0]), t(w, grad=False))),
                  [rng.normal(size=(3, 5))])

    def test_rms_norm_grad(self):
        rng = np.random.default_rng(17)
        w = rng.normal(size=(4, 6))
        _fd_check(lambda ts: nc.tsum(nc.mul(nc.rms_norm(ts[0], ts[1]), t(w, grad=False))),
                  [rng.normal(size=(4, 6)), rng.normal(size=(6,))])

    def test_gelu_grad(self):
        rng = np.random.default_rng(18)
        _fd_check(lambda ts: nc.tsum(nc.gelu(ts[0])), [rng.normal(size=(3, 7))])

    def test_embedding_grad(self):
        rng = np.random.default_rng(19)
        ids = np.array([[0, 2], [2, 1]])
        w = rng.normal(size=(2, 2, 3))
        _fd_check(lambda ts: nc.tsum(nc.mul(nc.embedding(ts[0], ids), t(w, grad=False))),
                  [rng.normal(size=(4, 3))])

    def test_rotary_grad(self):
        rng = np.random.default_rng(20)
        cos = np.cos(rng.normal(size=(3, 2)))
        sin = np.sin(rng.normal(size=(3, 2)))
        _fd_check(lambda ts: nc.tsum(nc.gelu(nc.rotary(ts[0], cos, sin))),
                  [rng.normal(size=(2, 3, 4))])

    def test_cross_entropy_grad(self):
        rng = np.random.default_rng(21)
        targets = rng.integers(0, 5, size=4)
        mask = np.array([1.0, 0.0, 1.0, 1.0])
        _fd_check(lambda ts: nc.cross_entropy(ts[0], targets, mask),
                  [rng.normal(size=(4, 5))])


class TestAdam:
    def test_zero_grad_leaves_params_unchanged(self):
        p = t([1.0, -2.0])
        p.grad = np.zeros(2)
        state = nc.adam_init([p], lr=0.1)
        nc.adam_step([p], state)
        assert np.array_equal(p.data, [1.0, -2.0])

    def test_single_step_hand_computed(self):
        # first step with g=1: m_hat=1, v_hat=1 -> update = lr/(1+eps)
        p = t([0.5])
        p.grad = np.array([1.0])
        state = nc.adam_init([p], lr=0.1)
        nc.adam_step([p], state)
        expected = 0.5 - 0.1 * 1.0 / (1.0 + 1e-8)
        assert abs(p.data[0] - expected) < 1e-15

    def test_missing_grad_raises(self):
        p = t([1.0])
        state = nc.adam_init([p], lr=0.1)
        with pytest.raises(nc.GradError):
            nc.adam_step([p], state)

    def test_deterministic_across_runs(self):
        def run():
            rng = np.random.default_rng(7)
            p = t(rng.normal(size=8))
            state = nc.adam_init([p], lr=0.05)
            for step in range(25):
                nc.zero_grads([p])
                loss = nc.tsum(nc.mul(p, p))
                loss.backward()
                nc.adam_step([p], state)
            return p.data.copy()

        assert np.array_equal(run(), run())


class TestDeterminismAndFiniteness:
    def test_ops_bitwise_deterministic(self):
        rng = np.random.default_rng(30)
        a = rng.normal(size=(5, 5))
        b = rng.normal(size=(5, 5))
        r1 = nc.gelu(nc.matmul(t(a), nc.softmax(t(b)))).data
        r2 = nc.gelu(nc.matmul(t(a), nc.softmax(t(b)))).data
        assert np.array_equal(r1, r2)

    def test_non_finite_input_raises(self):
        with pytest.raises(nc.NonFiniteError):
            nc.softmax(t([np.inf, 1.0]))

    def test_non_finite_result_raises(self):
        big = t([[1e308]])
        with pytest.raises(nc.NonFiniteError):
            nc.matmul(nc.mul(big, 10.0), t([[1e10]]))

    def test_no_grad_blocks_graph(self):
        x = t([2.0])
        with nc.no_grad():
            y = nc.mul(x, x)
        assert y._backward is None and not y._parents
