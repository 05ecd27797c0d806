import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from niceflow.errors import DimensionError, NumericOverflowError
from niceflow.numeric import (
    MlpParams,
    RngStream,
    init_mlp,
    matmul,
    mlp_backward,
    mlp_forward,
    seeded_rng,
)


def naive_matmul(a, b):
    out = [[0.0] * len(b[0]) for _ in range(len(a))]
    for i in range(len(a)):
        for j in range(len(b[0])):
            acc = 0.0
            for k in range(len(b)):
                acc += a[i][k] * b[k][j]
            out[i][j] = acc
    return np.array(out)


def straight_line_mlp(params, x):
    """Row-by-row, neuron-by-neuron evaluation with Python floats."""
    outs = []
    for row in x:
        a = list(row)
        for k, (w, b) in enumerate(zip(params.weights, params.biases)):
            z = [sum(w[i][j] * a[j] for j in range(len(a))) + b[i] for i in range(len(b))]
            a = z if k == len(params.weights) - 1 else [max(v, 0.0) for v in z]
        outs.append(a)
    return np.array(outs)


def random_mlp(sizes, seed):
    rng = np.random.default_rng(seed)
    return MlpParams(
        [rng.standard_normal((sizes[i + 1], sizes[i])) for i in range(len(sizes) - 1)],
        [rng.standard_normal(sizes[i + 1]) for i in range(len(sizes) - 1)],
    )


class TestMatmul:
    def test_identity_right(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(matmul(a, np.eye(2)), a)

    def test_identity_left(self):
        np.testing.assert_array_equal(matmul(np.eye(2), [[5.0], [7.0]]), [[5.0], [7.0]])

    def test_against_triple_loop(self):
        rng = np.random.default_rng(1)
        a = rng.integers(-9, 10, (3, 4)).astype(float)
        b = rng.integers(-9, 10, (4, 2)).astype(float)
        np.testing.assert_array_equal(matmul(a, b), naive_matmul(a.tolist(), b.tolist()))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_overflow_is_reported(self):
        with pytest.raises(NumericOverflowError):
            matmul([[1e200, 1e200]], [[1e200], [1e200]])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31))
    def test_identity_is_neutral(self, r, c, seed):
        a = np.random.default_rng(seed).uniform(-1e3, 1e3, (r, c))
        np.testing.assert_allclose(matmul(matmul(np.eye(r), a), np.eye(c)), a, atol=1e-12, rtol=0)


class TestMlpForward:
    def test_zero_params_give_zero(self):
        params = MlpParams([np.zeros((4, 3)), np.zeros((2, 4))], [np.zeros(4), np.zeros(2)])
        out, _ = mlp_forward(params, np.random.default_rng(0).standard_normal((5, 3)))
        np.testing.assert_array_equal(out, np.zeros((5, 2)))

    def test_linear_output_keeps_negatives(self):
        params = MlpParams([np.eye(3)], [np.zeros(3)])
        x = np.array([[-1.0, 2.0, -3.0]])
        out, _ = mlp_forward(params, x)
        np.testing.assert_array_equal(out, x)

    def test_matches_straight_line_evaluator(self):
        params = random_mlp([3, 5, 4, 2], seed=2)
        x = np.random.default_rng(3).standard_normal((4, 3))
        out, _ = mlp_forward(params, x)
        np.testing.assert_allclose(out, straight_line_mlp(params, x), atol=1e-12, rtol=0)

    def test_width_check(self):
        with pytest.raises(DimensionError):
            mlp_forward(random_mlp([3, 2], 0), np.ones((1, 4)))

    def test_layer_chain_validated(self):
        with pytest.raises(DimensionError):
            MlpParams([np.ones((4, 3)), np.ones((2, 5))], [np.ones(4), np.ones(2)])


def fd_param_grads(params, x, out_grad, step=1e-6):
    """Central differences of sum(out_grad * mlp(x)) w.r.t. every parameter."""
    grads = []
    for p in params.arrays():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + step
            up = (mlp_forward(params, x)[0] * out_grad).sum()
            p[idx] = old - step
            down = (mlp_forward(params, x)[0] * out_grad).sum()
            p[idx] = old
            g[idx] = (up - down) / (2 * step)
        grads.append(g)
    return grads


def assert_rel_close(analytic, numeric, rel=1e-5, floor=1e-8):
    mask = np.abs(numeric) >= floor
    err = np.abs(analytic - numeric)[mask] / np.abs(numeric)[mask]
    assert err.size == 0 or err.max() < rel, err.max()
    np.testing.assert_allclose(analytic[~mask], numeric[~mask], atol=1e-6)


class TestMlpBackward:
    def test_zero_output_grad(self):
        params = random_mlp([3, 4, 2], 0)
        _, tape = mlp_forward(params, np.ones((2, 3)))
        grads, gin = mlp_backward(tape, np.zeros((2, 2)))
        for g in grads.arrays() + [gin]:
            np.testing.assert_array_equal(g, 0.0)

    def test_linear_layer_weight_gradient(self):
        params = random_mlp([3, 2], 1)
        x = np.array([[1.0, -2.0, 0.5]])
        _, tape = mlp_forward(params, x)
        grads, gin = mlp_backward(tape, np.ones((1, 2)))
        np.testing.assert_array_equal(grads.weights[0], np.ones((2, 1)) @ x)
        np.testing.assert_array_equal(grads.biases[0], [1.0, 1.0])
        np.testing.assert_allclose(gin, params.weights[0].sum(axis=0, keepdims=True))

    def test_relu_derivative_at_zero_is_zero(self):
        params = MlpParams([np.array([[1.0]]), np.array([[1.0]])], [np.zeros(1), np.zeros(1)])
        _, tape = mlp_forward(params, np.array([[0.0]]))
        grads, gin = mlp_backward(tape, np.ones((1, 1)))
        assert gin[0, 0] == 0.0
        assert grads.weights[0][0, 0] == 0.0

    def test_shape_check(self):
        params = random_mlp([3, 2], 1)
        _, tape = mlp_forward(params, np.ones((2, 3)))
        with pytest.raises(DimensionError):
            mlp_backward(tape, np.ones((2, 3)))

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_finite_difference_three_layers(self, seed):
        params = random_mlp([4, 6, 5, 3], seed)
        rng = np.random.default_rng(100 + seed)
        x = rng.standard_normal((3, 4))
        out_grad = rng.standard_normal((3, 3))
        _, tape = mlp_forward(params, x)
        grads, gin = mlp_backward(tape, out_grad)
        for analytic, numeric in zip(grads.arrays(), fd_param_grads(params, x, out_grad)):
            assert_rel_close(analytic, numeric)
        # input gradient
        num_in = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            xp, xm = x.copy(), x.copy()
            xp[idx] += 1e-6
            xm[idx] -= 1e-6
            num_in[idx] = ((mlp_forward(params, xp)[0] - mlp_forward(params, xm)[0]) * out_grad).sum() / 2e-6
        assert_rel_close(gin, num_in)


class TestInit:
    def test_glorot_bounds_and_small_final_layer(self):
        params = init_mlp([10, 20, 5], seeded_rng(0))
        a0 = np.sqrt(6 / 30)
        a1 = np.sqrt(6 / 25) * 0.01
        assert np.abs(params.weights[0]).max() <= a0
        assert np.abs(params.weights[1]).max() <= a1
        assert all((b == 0).all() for b in params.biases)


class TestRng:
    def test_same_seed_same_stream(self):
        a, b = seeded_rng(42), seeded_rng(42)
        np.testing.assert_array_equal(a.uniform(1000), b.uniform(1000))
        np.testing.assert_array_equal(a.normal(1000), b.normal(1000))

    def test_children_are_independent_and_stable(self):
        base = RngStream(7)
        x = base.child("train").uniform(5)
        base.child("other").uniform(100)
        np.testing.assert_array_equal(RngStream(7).child("train").uniform(5), x)
        assert not np.array_equal(RngStream(7).child("eval").uniform(5), x)

    def test_uniform_mean(self):
        # std of the mean is sqrt(1/12 / 1e6) ~ 2.9e-4; 0.002 is ~7 sigma
        u = seeded_rng(1).uniform(1_000_000)
        assert abs(u.mean() - 0.5) < 0.002
        assert u.min() >= 0.0 and u.max() < 1.0

    def test_normal_variance(self):
        z = seeded_rng(2).normal(1_000_000)
        assert abs(z.var() - 1.0) < 0.01
        assert abs(z.mean()) < 0.005

    def test_normal_odd_sizes(self):
        assert seeded_rng(0).normal((3, 5)).shape == (3, 5)
        assert np.isscalar(seeded_rng(0).normal())
