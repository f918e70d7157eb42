import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from leaplstm.autodiff import DimensionError, Tape, Tensor, backward, gumbel_noise

from conftest import numeric_grad, rel_err

SHAPES = [(3,), (2, 4), (3, 2, 5)]


def leaf(x):
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)


def check_grad(build, *arrays_, eps=1e-5, tol=1e-6):
    """Compare tape gradients of ``sum(w * build(tape, *leaves))`` with finite differences."""
    w_rng = np.random.default_rng(7)
    leaves = [leaf(a) for a in arrays_]
    weights = None

    def value():
        nonlocal weights
        tape = Tape()
        out = build(tape, *leaves)
        if weights is None:
            weights = w_rng.normal(size=out.shape)
        return tape, tape.sum(tape.mul(out, weights))

    tape, loss = value()
    grads = tape.backward(loss)
    for t in leaves:
        num = numeric_grad(lambda: float(value()[1].data), t.data, eps)
        assert rel_err(grads[id(t)], num) < tol


class TestMatmul:
    def test_identity(self, rng):
        A = rng.normal(size=(3, 3))
        out = Tape().matmul(Tensor(np.eye(3)), Tensor(A))
        np.testing.assert_array_equal(out.data, A)

    def test_hand_arithmetic(self):
        out = Tape().matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_gradient_of_sum(self, rng):
        A, B = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
        a, b = leaf(A), leaf(B)
        tape = Tape()
        loss = tape.sum(tape.matmul(a, b))
        g = tape.backward(loss)
        for t in (a, b):
            def f():
                return float(np.sum(a.data @ b.data))
            assert rel_err(g[id(t)], numeric_grad(f, t.data, 1e-5)) < 1e-6

    def test_batched_left_operand(self, rng):
        check_grad(lambda tp, a, b: tp.matmul(a, b), rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 2)))

    def test_shape_mismatch_names_both(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            Tape().matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


class TestActivation:
    def test_sigmoid_zero(self):
        assert Tape().activation(Tensor(0.0), "sigmoid").data == 0.5

    def test_relu(self):
        tp = Tape()
        assert tp.activation(Tensor(-3.2), "relu").data == 0.0
        assert tp.activation(Tensor(3.2), "relu").data == 3.2

    def test_tanh_gradient(self):
        x = leaf(0.7)
        tape = Tape()
        y = tape.activation(x, "tanh")
        g = tape.backward(y)[id(x)]
        num = (math.tanh(0.7 + 1e-5) - math.tanh(0.7 - 1e-5)) / 2e-5
        assert abs(float(g) - num) < 1e-8

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            Tape().activation(Tensor(1.0), "gelu")

    @pytest.mark.parametrize("kind", ["sigmoid", "tanh", "relu"])
    @pytest.mark.parametrize("shape", SHAPES)
    def test_gradients(self, kind, shape, rng):
        x = rng.normal(size=shape)
        if kind == "relu":
            x = np.where(np.abs(x) < 1e-3, 0.5, x)  # keep clear of the kink
        check_grad(lambda tp, a: tp.activation(a, kind), x)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(Tape().softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_large_logits(self):
        out = Tape().softmax(Tensor([1000.0, 1000.0])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [0.5, 0.5])

    def test_hand_arithmetic(self):
        np.testing.assert_allclose(Tape().softmax(Tensor([math.log(1), math.log(3)])).data,
                                   [0.25, 0.75], atol=1e-15)

    @pytest.mark.parametrize("shape", SHAPES)
    def test_gradient(self, shape, rng):
        check_grad(lambda tp, a: tp.softmax(a), rng.normal(size=shape))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
                  elements=st.floats(-20, 20)))
    def test_rows_are_distributions(self, x):
        y = Tape().softmax(Tensor(x)).data
        assert np.all(y > 0) and np.all(y <= 1)
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.integers(2, 6), elements=st.floats(-1e4, 1e4)))
    def test_rows_sum_to_one_at_large_magnitude(self, x):
        y = Tape().softmax(Tensor(x)).data
        assert np.all((y >= 0) & (y <= 1))
        assert abs(y.sum() - 1.0) < 1e-6


class TestConcat:
    def test_default_dimensions(self, rng):
        parts = [Tensor(rng.normal(size=n)) for n in (300, 300, 200)]
        assert Tape().concat(parts, axis=-1).shape == (800,)

    def test_single_part(self, rng):
        x = Tensor(rng.normal(size=(2, 3)))
        assert Tape().concat([x], axis=0) is x

    @pytest.mark.parametrize("axis", [0, 1, -1])
    def test_gradient_routing(self, axis, rng):
        shapes = {0: [(1, 3), (2, 3), (3, 3)], 1: [(2, 1), (2, 4), (2, 2)], -1: [(2, 2), (2, 3), (2, 1)]}[axis]
        arrs = [rng.normal(size=s) for s in shapes]
        check_grad(lambda tp, a, b, c: tp.concat([a, b, c], axis=axis), *arrs)

    def test_errors(self):
        with pytest.raises(DimensionError):
            Tape().concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))], axis=1)
        with pytest.raises(DimensionError):
            Tape().concat([Tensor(np.zeros((2, 3)))], axis=2)


class TestCrossEntropy:
    def test_perfect(self):
        assert Tape().cross_entropy(Tensor([[0.0, 1.0]]), [1]).data == 0.0

    def test_uniform(self):
        loss = Tape().cross_entropy(Tensor(np.full((3, 4), 0.25)), [0, 1, 3]).data
        assert abs(loss - math.log(4)) < 1e-12
        assert round(float(loss), 4) == 1.3863

    def test_gradient_through_softmax(self, rng):
        z = leaf(rng.normal(size=(3, 4)))
        labels = [0, 3, 1]
        tape = Tape()
        probs = tape.softmax(z)
        loss = tape.cross_entropy(probs, labels)
        g = tape.backward(loss)[id(z)]
        onehot = np.eye(4)[labels]
        np.testing.assert_allclose(g, (probs.data - onehot) / 3, atol=1e-12)

        def f():
            e = np.exp(z.data - z.data.max(axis=1, keepdims=True))
            p = e / e.sum(axis=1, keepdims=True)
            return float(-np.log(p[np.arange(3), labels]).mean())
        assert np.max(np.abs(g - numeric_grad(f, z.data, 1e-5))) < 1e-8

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            Tape().cross_entropy(Tensor([[0.5, 0.5]]), [2])


class TestGumbelSoftmax:
    def test_low_temperature_limit(self):
        noise = np.array([0.3, 0.1])
        y = Tape().gumbel_softmax_sample(Tensor([0.5, 0.5]), 1e-4, noise=noise).data
        np.testing.assert_allclose(y, [1.0, 0.0], atol=1e-12)

    @pytest.mark.parametrize("tau", [0.05, 0.1, 1.0, 5.0])
    def test_sums_to_one(self, tau, rng):
        pi = rng.dirichlet(np.ones(3))
        y = Tape().gumbel_softmax_sample(Tensor(pi), tau, rng=rng).data
        assert abs(y.sum() - 1.0) < 1e-6

    def test_bad_tau(self, rng):
        with pytest.raises(ValueError):
            Tape().gumbel_softmax_sample(Tensor([0.5, 0.5]), 0.0, rng=rng)

    def test_seed_reproducible(self):
        a = Tape().gumbel_softmax_sample(Tensor([0.7, 0.3]), 0.1, rng=np.random.default_rng(5)).data
        b = Tape().gumbel_softmax_sample(Tensor([0.7, 0.3]), 0.1, rng=np.random.default_rng(5)).data
        assert a.tobytes() == b.tobytes()

    def test_gradient_with_fixed_noise(self, rng):
        noise = gumbel_noise(rng, (4, 2))
        pi = rng.dirichlet(np.ones(2), size=4)
        check_grad(lambda tp, p: tp.gumbel_softmax_sample(p, 0.7, noise=noise), pi, tol=1e-6)

    def test_saturated_probability_is_clamped(self):
        y = Tape().gumbel_softmax_sample(Tensor([1.0, 0.0]), 0.1, noise=np.zeros(2)).data
        assert np.all(np.isfinite(y))
        np.testing.assert_allclose(y, [1.0, 0.0], atol=1e-100)


class TestBackward:
    def test_sum_gives_ones(self, rng):
        p = leaf(rng.normal(size=(3, 2)))
        tape = Tape()
        g = backward(tape, tape.sum(p), {"p": p})
        np.testing.assert_array_equal(g["p"], np.ones((3, 2)))

    def test_zero_times_function(self, rng):
        p = leaf(rng.normal(size=4))
        tape = Tape()
        loss = tape.scale(tape.sum(tape.tanh(p)), 0.0)
        np.testing.assert_array_equal(backward(tape, loss, {"p": p})["p"], np.zeros(4))

    def test_unreachable_parameter_gets_zeros(self, rng):
        p, q = leaf(rng.normal(size=2)), leaf(rng.normal(size=(2, 2)))
        tape = Tape()
        g = backward(tape, tape.sum(p), {"p": p, "q": q})
        np.testing.assert_array_equal(g["q"], np.zeros((2, 2)))

    def test_non_scalar_loss(self, rng):
        p = leaf(rng.normal(size=3))
        tape = Tape()
        with pytest.raises(DimensionError):
            tape.backward(tape.tanh(p))

    def test_replay_is_identical(self, rng):
        a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
        tape = Tape()
        loss = tape.sum(tape.softmax(tape.matmul(a, b)))
        g1 = backward(tape, loss, {"a": a, "b": b})
        g2 = backward(tape, loss, {"a": a, "b": b})
        for k in g1:
            assert g1[k].tobytes() == g2[k].tobytes()

    def test_shared_parameter_across_tapes(self, rng):
        p = leaf(rng.normal(size=3))
        t1, t2 = Tape(), Tape()
        l1 = t1.sum(t1.mul(p, p))
        l2 = t2.sum(p)
        np.testing.assert_allclose(backward(t1, l1, {"p": p})["p"], 2 * p.data)
        np.testing.assert_array_equal(backward(t2, l2, {"p": p})["p"], np.ones(3))


@pytest.mark.parametrize("op", ["add", "sub", "mul"])
def test_broadcasting_elementwise_gradients(op, rng):
    check_grad(lambda tp, a, b: getattr(tp, op)(a, b), rng.normal(size=(3, 4)), rng.normal(size=(4,)))


@pytest.mark.parametrize("shape", SHAPES)
def test_slice_select_expand_gradients(shape, rng):
    x = rng.normal(size=shape)
    check_grad(lambda tp, a: tp.slice(a, -1, 0, 2), x)
    check_grad(lambda tp, a: tp.select(a, 0, 1 if shape[0] > 1 else 0), x)
    check_grad(lambda tp, a: tp.expand(a, (2,) + shape), x)


def test_linear_gradients(rng):
    check_grad(lambda tp, x, w, b: tp.linear(x, w, b),
               rng.normal(size=(2, 3, 4)), rng.normal(size=(5, 4)), rng.normal(size=5))
    check_grad(lambda tp, x, w: tp.linear(x, w), rng.normal(size=(3, 4)), rng.normal(size=(2, 4)))


def test_stack_reshape_windows_log_gradients(rng):
    check_grad(lambda tp, a, b: tp.stack([a, b], axis=1), rng.normal(size=(2, 3)), rng.normal(size=(2, 3)))
    check_grad(lambda tp, a: tp.reshape(a, (6, 2)), rng.normal(size=(3, 4)))
    check_grad(lambda tp, a: tp.windows(a, 3), rng.normal(size=(2, 5, 3)))
    check_grad(lambda tp, a: tp.log(a), rng.uniform(0.1, 2.0, size=(3, 2)))


def test_embedding_gradient_skips_pad_row(rng):
    table = leaf(rng.normal(size=(5, 3)))
    ids = np.array([[0, 2, 2], [4, 0, 1]])
    tape = Tape()
    out = tape.embedding(table, ids)
    g = tape.backward(tape.sum(out))[id(table)]
    np.testing.assert_array_equal(g[0], 0.0)
    np.testing.assert_array_equal(g[2], 2.0)
    np.testing.assert_array_equal(g[3], 0.0)


def test_windows_zero_pad_at_end():
    x = Tensor(np.arange(1.0, 4.0).reshape(3, 1))
    out = Tape().windows(x, 2).data
    np.testing.assert_array_equal(out, [[1, 2], [2, 3], [3, 0]])


@pytest.mark.parametrize("lead", [(), (3,), (2, 2)])
def test_lstm_cell_gradient(lead, rng):
    check_grad(lambda tp, z, c: tp.lstm_cell(z, c), rng.normal(size=lead + (12,)), rng.normal(size=lead + (3,)))


def test_lstm_cell_values(rng):
    z, c = rng.normal(size=8), rng.normal(size=2)
    sig = lambda v: 1 / (1 + np.exp(-v))
    i, f, o, g = sig(z[:2]), sig(z[2:4]), sig(z[4:6]), np.tanh(z[6:])
    c_new = f * c + i * g
    out = Tape().lstm_cell(Tensor(z), Tensor(c)).data
    np.testing.assert_allclose(out, np.concatenate([o * np.tanh(c_new), c_new]), atol=1e-14)
