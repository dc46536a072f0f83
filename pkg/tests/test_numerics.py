import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stgrit import numerics as nx
from stgrit.errors import BackwardError, ConfigError, NumericalError, ShapeError
from stgrit.numerics import Tensor

H = 1e-5


def fd_check(build, inputs, rng, tol):
    tensors = {k: Tensor(v, requires_grad=True) for k, v in inputs.items()}
    out_shape = build(tensors).shape
    w = rng.normal(size=out_shape)
    errs = nx.check_gradients(lambda: nx.sum_(nx.mul(build(tensors), Tensor(w))), tensors, h=H)
    assert max(errs.values()) < tol, errs


class TestMatmul:
    def test_identity(self, rng):
        b = rng.normal(size=(3, 4))
        np.testing.assert_array_equal(nx.matmul(Tensor(np.eye(3)), Tensor(b)).data, b)

    def test_hand_checked(self):
        out = nx.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[0], [1]]))
        np.testing.assert_array_equal(out.data, [[2], [4]])

    def test_sum_gradient_matches_finite_differences(self, rng):
        a = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        errs = nx.check_gradients(lambda: nx.sum_(nx.matmul(a, b)), {"a": a, "b": b}, h=H)
        assert max(errs.values()) < 1e-6

    def test_analytic_gradient_rule(self, rng):
        a = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        nx.backward(nx.sum_(nx.matmul(a, b)))
        ones = np.ones((5, 3))
        np.testing.assert_allclose(a.grad, ones @ b.data.T)
        np.testing.assert_allclose(b.grad, a.data.T @ ones)

    def test_batched_against_2d_weight(self, rng):
        fd_check(lambda t: nx.matmul(t["a"], t["b"]),
                 {"a": rng.normal(size=(3, 5, 4)), "b": rng.normal(size=(4, 2))}, rng, 1e-6)

    @pytest.mark.parametrize("sa,sb", [((2, 3), (4, 2)), ((3,), (3, 2)), ((2, 3, 4), (5, 4, 2))])
    def test_shape_mismatch(self, sa, sb):
        with pytest.raises(ShapeError):
            nx.matmul(Tensor(np.ones(sa)), Tensor(np.ones(sb)))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(nx.softmax(Tensor([0.0, 0.0, 0.0]), 0).data, [1 / 3] * 3)

    def test_large_inputs_do_not_overflow(self):
        np.testing.assert_allclose(nx.softmax(Tensor([1000.0, 1000.0, 1000.0]), 0).data,
                                   [1 / 3] * 3)

    def test_jacobian(self, rng):
        x = rng.normal(size=4)
        for i in range(4):
            xt = Tensor(x, requires_grad=True)
            e = np.zeros(4)
            e[i] = 1.0
            errs = nx.check_gradients(lambda: nx.sum_(nx.mul(nx.softmax(xt, 0), Tensor(e))),
                                      {"x": xt}, h=H)
            assert errs["x"] < 1e-6

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 7)),
                  elements=st.floats(-50, 50)),
           st.sampled_from([0, 1, -1]))
    def test_row_stochastic(self, x, axis):
        s = nx.softmax(Tensor(x), axis).data
        assert (s >= 0).all()
        np.testing.assert_allclose(s.sum(axis=axis), 1.0, atol=1e-12)

    def test_bad_axis(self):
        with pytest.raises(ShapeError):
            nx.softmax(Tensor(np.ones((2, 3))), 2)


class TestLayerNorm:
    def test_constant_vector_collapses_to_beta(self):
        out = nx.layer_norm(Tensor([4.0, 4.0, 4.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_already_standardised(self):
        out = nx.layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, [1.0, -1.0], rtol=1e-8)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 16)),
                  elements=st.floats(-100, 100)))
    def test_standardisation(self, x):
        spread = x.std(axis=-1)
        x = x[spread > 1e-2]
        if not len(x):
            return
        out = nx.layer_norm(Tensor(x), Tensor(np.ones(x.shape[-1])),
                            Tensor(np.zeros(x.shape[-1]))).data
        assert (np.abs(out.mean(axis=-1)) < 1e-10).all()
        assert (np.abs(out.var(axis=-1) - 1.0) < 1e-6).all()

    def test_gradients(self, rng):
        fd_check(lambda t: nx.layer_norm(t["x"], t["g"], t["b"]),
                 {"x": rng.normal(size=6), "g": rng.normal(size=6), "b": rng.normal(size=6)},
                 rng, 1e-5)

    def test_affine_shape_checked(self):
        with pytest.raises(ShapeError):
            nx.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(3)))


class TestDropout:
    def test_zero_rate_is_identity(self, rng):
        x = Tensor(rng.normal(size=10))
        assert nx.dropout(x, 0.0, rng, True) is x

    def test_eval_is_identity(self, rng):
        x = Tensor(rng.normal(size=10))
        assert nx.dropout(x, 0.7, rng, False) is x

    def test_rate_one_rejected(self, rng):
        with pytest.raises(ConfigError):
            nx.dropout(Tensor(np.ones(3)), 1.0, rng, True)

    def test_survivor_fraction_and_expectation(self):
        x = Tensor(np.ones(100_000))
        out = nx.dropout(x, 0.5, np.random.default_rng(0), True).data
        survivors = np.mean(out != 0)
        assert abs(survivors - 0.5) < 0.01
        assert abs(out.mean() - 1.0) < 0.02
        np.testing.assert_array_equal(np.unique(out), [0.0, 2.0])

    def test_seeded_masks_repeat(self):
        x = Tensor(np.ones(50))
        a = nx.dropout(x, 0.3, np.random.default_rng(9), True).data
        b = nx.dropout(x, 0.3, np.random.default_rng(9), True).data
        np.testing.assert_array_equal(a, b)


class TestElementwise:
    def test_relu(self):
        np.testing.assert_array_equal(nx.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_relu_subgradient_at_zero(self):
        x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
        nx.backward(nx.sum_(nx.relu(x)))
        np.testing.assert_array_equal(x.grad, [0, 0, 1])

    def test_double_transpose(self, rng):
        x = rng.normal(size=(2, 3, 4))
        t = nx.transpose(nx.transpose(Tensor(x), (1, 2, 0)), (2, 0, 1))
        np.testing.assert_array_equal(t.data, x)

    def test_concat_length(self, rng):
        a, b = rng.normal(size=3), rng.normal(size=5)
        assert nx.concat([Tensor(a), Tensor(b)], axis=0).shape == (8,)

    def test_broadcast_add_gradient(self, rng):
        fd_check(lambda t: nx.add(t["a"], t["b"]),
                 {"a": rng.normal(size=(4, 3)), "b": rng.normal(size=3)}, rng, 1e-6)

    @pytest.mark.parametrize("axis", [None, 0, 1, (0, 2)])
    def test_mean_gradient(self, rng, axis):
        fd_check(lambda t: nx.mean(t["x"], axis=axis, keepdims=True),
                 {"x": rng.normal(size=(3, 4, 2))}, rng, 1e-6)

    def test_stack_concat_reshape_gradients(self, rng):
        fd_check(lambda t: nx.reshape(nx.concat([nx.stack([t["a"], t["b"]], 1), t["c"]], 1),
                                      (3, -1)),
                 {"a": rng.normal(size=(3, 2)), "b": rng.normal(size=(3, 2)),
                  "c": rng.normal(size=(3, 1, 2))}, rng, 1e-6)

    def test_reused_input_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        nx.backward(nx.sum_(nx.mul(x, x) + x))
        np.testing.assert_allclose(x.grad, [7.0])

    @pytest.mark.parametrize("op", [nx.add, nx.sub, nx.mul])
    def test_broadcast_mismatch(self, op):
        with pytest.raises(ShapeError):
            op(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))

    def test_bad_transpose_axes(self):
        with pytest.raises(ShapeError):
            nx.transpose(Tensor(np.ones((2, 3))), (0, 0))


class TestBackward:
    def test_non_scalar_loss(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(BackwardError):
            nx.backward(nx.mul(x, 2.0))

    def test_second_call_is_an_error(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = nx.sum_(nx.mul(x, x))
        nx.backward(loss)
        with pytest.raises(BackwardError):
            nx.backward(loss)

    def test_loss_without_parameters(self):
        with pytest.raises(BackwardError):
            nx.backward(nx.sum_(Tensor(np.ones(3))))

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with nx.no_grad():
            y = nx.sum_(nx.mul(x, x))
        assert not y.requires_grad

    def test_leaf_gradients_accumulate_across_graphs(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        nx.backward(nx.sum_(x))
        nx.backward(nx.sum_(nx.mul(x, 3.0)))
        np.testing.assert_array_equal(x.grad, [4.0, 4.0])

    def test_determinism(self, rng):
        a0, b0 = rng.normal(size=(6, 5)), rng.normal(size=(5, 5))

        def run():
            a, b = Tensor(a0, requires_grad=True), Tensor(b0, requires_grad=True)
            y = nx.layer_norm(nx.softmax(nx.matmul(a, b), -1), Tensor(np.ones(5)),
                              Tensor(np.zeros(5)))
            y = nx.dropout(y, 0.2, np.random.default_rng(4), True)
            nx.backward(nx.sum_(nx.mul(y, y)))
            return y.data, a.grad, b.grad

        for u, v in zip(run(), run()):
            assert np.array_equal(u, v)


class TestNonFinite:
    def test_leaf_rejects_nan(self):
        with pytest.raises(NumericalError):
            Tensor([1.0, np.nan])

    def test_forward_overflow_names_op(self):
        with pytest.raises(NumericalError, match="mul"):
            nx.mul(Tensor([1e200]), Tensor([1e200]))

    def test_backward_overflow_names_op(self):
        x = Tensor([1e-300], requires_grad=True)
        z = nx.mul(nx.mul(x, Tensor([1e300])), Tensor([1e300]))
        with pytest.raises(NumericalError, match="mul.*backward"):
            nx.backward(nx.sum_(z))
