import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gmvae_defense import diffmath as dm


def _mlp_loss(params, x, target):
    h = x
    n = len(params)
    for i, (W, b) in enumerate(params):
        h = dm.affine(h, W, b)
        h = dm.sigmoid(h) if i == n - 1 else dm.relu(h)
    return dm.squared_l2(h, target)


def _random_net(rng):
    depth = int(rng.integers(1, 4))
    widths = [int(w) for w in rng.integers(1, 17, size=depth + 1)]
    params = [(rng.standard_normal((o, i)), rng.standard_normal(o)) for i, o in zip(widths[:-1], widths[1:])]
    return params, rng.uniform(0, 1, widths[0]), rng.uniform(0, 1, widths[-1])


class TestAffine:
    def test_identity(self):
        np.testing.assert_array_equal(dm.affine(np.array([2.0, 3.0]), np.eye(2), np.zeros(2)), [2.0, 3.0])

    def test_zero_weight(self):
        np.testing.assert_array_equal(dm.affine(np.array([7.0, -4.0]), np.zeros((2, 2)), np.array([1.0, -1.0])), [1.0, -1.0])

    def test_hand_product(self):
        W = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(dm.affine(np.ones(2), W, np.zeros(2)), [3.0, 7.0])

    def test_batched_rows_match_single(self):
        rng = np.random.default_rng(0)
        W, b, X = rng.standard_normal((3, 4)), rng.standard_normal(3), rng.standard_normal((5, 4))
        batched = dm.affine(X, W, b)
        for i in range(5):
            np.testing.assert_allclose(batched[i], dm.affine(X[i], W, b), rtol=0, atol=1e-14)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(dm.ShapeError) as err:
            dm.affine(np.ones(3), np.ones((2, 2)), np.zeros(2))
        assert "(3,)" in str(err.value) and "(2, 2)" in str(err.value)

    def test_bias_shape_error(self):
        with pytest.raises(dm.ShapeError):
            dm.affine(np.ones(2), np.ones((2, 2)), np.zeros(3))


class TestActivations:
    def test_relu_examples(self):
        np.testing.assert_array_equal(dm.relu(np.array([-1.0, 2.0])), [0.0, 2.0])
        np.testing.assert_array_equal(dm.relu(np.array([0.0])), [0.0])
        np.testing.assert_array_equal(dm.relu(np.array([5.5, -0.1, 0.1])), [5.5, 0.0, 0.1])

    def test_sigmoid_examples(self):
        assert dm.sigmoid(np.array([0.0]))[0] == 0.5
        big = dm.sigmoid(np.array([1e6]))[0]
        assert np.isfinite(big) and abs(big - 1.0) <= 1e-12
        assert dm.sigmoid(np.array([math.log(3.0)]))[0] == pytest.approx(0.75, abs=1e-15)

    def test_sigmoid_no_overflow_negative(self):
        with np.errstate(over="raise", invalid="raise", divide="raise"):
            out = dm.sigmoid(np.array([-1e6, -800.0, 800.0]))
        assert np.all(np.isfinite(out))

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, 8, elements=st.floats(-50, 50)), arrays(np.float64, 8, elements=st.floats(0, 10)))
    def test_monotone(self, x, delta):
        y = x + delta
        assert np.all(dm.relu(x) <= dm.relu(y))
        assert np.all(dm.sigmoid(x) <= dm.sigmoid(y))

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, 6, elements=st.floats(-30, 30)))
    def test_sigmoid_strictly_inside_unit_interval(self, x):
        s = dm.sigmoid(x)
        assert np.all((s > 0) & (s < 1))


class TestSquaredL2:
    def test_examples(self):
        x = np.array([0.3, -2.0])
        assert dm.squared_l2(x, x) == 0.0
        assert dm.squared_l2(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 2.0
        assert dm.squared_l2(np.array([3.0]), np.array([-1.0])) == 16.0

    def test_shape_mismatch(self):
        with pytest.raises(dm.ShapeError):
            dm.squared_l2(np.ones(2), np.ones(3))


class TestBackward:
    def test_sigmoid_derivative_at_zero(self):
        _, g = dm.value_and_grad(lambda x: dm.sum(dm.sigmoid(x)), np.zeros(1))
        assert g[0] == 0.25

    def test_squared_l2_minimum(self):
        c = np.array([0.5, -1.0, 2.0])
        _, g = dm.value_and_grad(lambda x: dm.squared_l2(x, c), c.copy())
        np.testing.assert_array_equal(g, np.zeros(3))

    def test_non_scalar_output_rejected(self):
        tape = dm.Tape()
        x = tape.variable(np.ones(3), name="x")
        with pytest.raises(ValueError, match="scalar"):
            dm.backward(tape, dm.relu(x))

    def test_foreign_output_rejected(self):
        t1, t2 = dm.Tape(), dm.Tape()
        out = dm.sum(t1.variable(np.ones(2), name="x"))
        t2.variable(np.ones(2), name="y")
        with pytest.raises(ValueError):
            dm.backward(t2, out)

    def test_unused_leaf_gets_zero_gradient(self):
        tape = dm.Tape()
        x = tape.variable(np.ones(2), name="x")
        unused = tape.variable(np.ones((2, 3)), name="unused")
        grads = dm.backward(tape, dm.sum(x))
        np.testing.assert_array_equal(grads["unused"], np.zeros((2, 3)))
        assert grads["unused"].shape == unused.value.shape

    def test_gradient_shapes_match_parameters(self):
        rng = np.random.default_rng(3)
        params, x, t = _random_net(rng)
        tape = dm.Tape()
        nodes = [(tape.variable(W, name=f"W{i}"), tape.variable(b, name=f"b{i}")) for i, (W, b) in enumerate(params)]
        grads = dm.backward(tape, _mlp_loss(nodes, x, t))
        for i, (W, b) in enumerate(params):
            assert grads[f"W{i}"].shape == W.shape and grads[f"b{i}"].shape == b.shape

    def test_random_networks_match_finite_differences(self):
        rng = np.random.default_rng(2024)
        for _ in range(100):
            params, x, t = _random_net(rng)
            leaves = {"x": x}
            for i, (W, b) in enumerate(params):
                leaves[f"W{i}"], leaves[f"b{i}"] = W, b

            def loss(values):
                ps = [(values[f"W{i}"], values[f"b{i}"]) for i in range(len(params))]
                return _mlp_loss(ps, values["x"], t)

            tape = dm.Tape()
            grads = dm.backward(tape, loss({k: tape.variable(v, name=k) for k, v in leaves.items()}))
            for name, value in leaves.items():

                def fn(v, name=name):
                    return float(loss({**leaves, name: v}))

                numeric = dm.finite_diff_gradient(fn, value, 1e-5)
                rel = np.abs(grads[name] - numeric) / np.maximum(1.0, np.abs(grads[name]))
                assert rel.max() <= 1e-4, name

    def test_shared_subexpression_accumulates(self):
        # f = x*x + x -> 2x + 1
        _, g = dm.value_and_grad(lambda x: dm.sum(dm.add(dm.mul(x, x), x)), np.array([1.5, -2.0]))
        np.testing.assert_array_equal(g, [4.0, -3.0])

    @pytest.mark.parametrize(
        "fn",
        [
            lambda x: dm.logsumexp(x),
            lambda x: dm.sum(dm.power(dm.exp(x), 2.0)),
            lambda x: dm.sum(dm.log(dm.add(dm.mul(x, x), 1.0))),
            lambda x: dm.mean(dm.div(x, dm.add(dm.sum_squares(x), 1.0))),
            lambda x: dm.sum(dm.sub(1.0, x)),
        ],
        ids=["logsumexp", "power-exp", "log", "div-mean", "rsub"],
    )
    def test_elementwise_ops_match_finite_differences(self, fn):
        x = np.random.default_rng(7).standard_normal(4)
        _, analytic = dm.value_and_grad(fn, x)
        numeric = dm.finite_diff_gradient(lambda v: float(fn(v)), x)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-8)

    def test_sq_dist_to_centers_gradients(self):
        rng = np.random.default_rng(11)
        z0, c0 = rng.standard_normal((3, 4)), rng.standard_normal((2, 4))
        weights = rng.standard_normal((3, 2))

        def f_z(z):
            return dm.sum(dm.mul(dm.sq_dist_to_centers(z, c0), weights))

        def f_c(c):
            return dm.sum(dm.mul(dm.sq_dist_to_centers(z0, c), weights))

        for f, x in ((f_z, z0), (f_c, c0)):
            _, analytic = dm.value_and_grad(f, x)
            numeric = dm.finite_diff_gradient(lambda v: float(f(v)), x)
            np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-8)

    def test_sq_dist_values(self):
        z = np.array([[0.0, 0.0], [1.0, 1.0]])
        c = np.array([[1.0, 0.0], [0.0, 2.0]])
        np.testing.assert_array_equal(dm.sq_dist_to_centers(z, c), [[1.0, 4.0], [1.0, 2.0]])

    def test_logsumexp_is_stable(self):
        out = dm.logsumexp(np.array([1000.0, 1000.0]))
        assert out == pytest.approx(1000.0 + math.log(2.0), abs=1e-12)


class TestReplay:
    def test_replay_is_bit_identical(self):
        rng = np.random.default_rng(5)
        params, x, t = _random_net(rng)
        tape = dm.Tape()
        nodes = [(tape.variable(W, name=f"W{i}"), tape.variable(b, name=f"b{i}")) for i, (W, b) in enumerate(params)]
        _mlp_loss(nodes, tape.variable(x, name="x"), t)
        recorded = [n.value for n in tape.nodes]
        replayed = tape.replay()
        assert len(replayed) == len(recorded)
        for a, b in zip(recorded, replayed):
            assert a.tobytes() == b.tobytes()

    def test_every_node_reachable(self):
        tape = dm.Tape()
        x = tape.variable(np.ones(3), name="x")
        out = dm.sum(dm.sigmoid(dm.relu(x)))
        assert tape.reachable(out) == {n.index for n in tape.nodes}

    def test_forward_deterministic(self):
        rng = np.random.default_rng(9)
        params, x, t = _random_net(rng)
        assert _mlp_loss(params, x, t).tobytes() == _mlp_loss(params, x, t).tobytes()

    def test_leaf_values_are_read_only(self):
        tape = dm.Tape()
        x = tape.variable(np.ones(2), name="x")
        with pytest.raises(ValueError):
            x.value[0] = 5.0


class TestFiniteDifference:
    def test_square(self):
        g = dm.finite_diff_gradient(lambda v: float(v[0] ** 2), np.array([3.0]), 1e-5)
        assert g[0] == pytest.approx(6.0, abs=1e-6)

    def test_constant(self):
        np.testing.assert_array_equal(dm.finite_diff_gradient(lambda v: 4.2, np.ones(5)), np.zeros(5))

    def test_sum_sigmoid(self):
        g = dm.finite_diff_gradient(lambda v: float(np.sum(dm.sigmoid(v))), np.zeros(4))
        np.testing.assert_allclose(g, 0.25, atol=1e-10)

    def test_rejects_non_positive_step(self):
        with pytest.raises(ValueError):
            dm.finite_diff_gradient(lambda v: 0.0, np.ones(1), 0.0)

    def test_does_not_mutate_input(self):
        x = np.array([1.0, 2.0])
        dm.finite_diff_gradient(lambda v: float(v @ v), x)
        np.testing.assert_array_equal(x, [1.0, 2.0])
