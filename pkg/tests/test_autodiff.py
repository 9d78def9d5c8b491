import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rnode import autodiff as ad
from rnode.autodiff import Tape, Tensor, backward, grad, vjp
from rnode.errors import ContractError, DimensionError, NonFiniteError


def central_diff(fn, x, h=1e-5):
    """Gradient of scalar ``fn`` at ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        out[idx] = (fn(x + e) - fn(x - e)) / (2 * h)
    return out


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


class TestAffine:
    def test_identity(self):
        out = ad.affine(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))
        np.testing.assert_array_equal(out.data, [[1.0, 2.0]])

    def test_row_selection(self):
        out = ad.affine(Tensor([[1.0, 0.0]]), Tensor([[2.0, 3.0], [5.0, 7.0]]),
                        Tensor([1.0, 1.0]))
        np.testing.assert_array_equal(out.data, [[3.0, 4.0]])

    def test_basis_rows_pick_weight_rows(self):
        rng = np.random.default_rng(3)
        w = rng.standard_normal((3, 4))
        b = rng.standard_normal(4)
        out = ad.affine(Tensor(np.eye(3)), Tensor(w), Tensor(b))
        expected = np.array([[sum(np.eye(3)[r, i] * w[i, j] for i in range(3)) + b[j]
                              for j in range(4)] for r in range(3)])
        np.testing.assert_allclose(out.data, expected, rtol=0, atol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ad.affine(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))), Tensor(np.ones(2)))


class TestSoftplus:
    def test_zero(self):
        assert ad.softplus(Tensor(0.0)).item() == pytest.approx(0.6931471805599453, abs=1e-16)

    def test_large_positive(self):
        assert ad.softplus(Tensor(1000.0)).item() == 1000.0

    def test_large_negative(self):
        v = ad.softplus(Tensor(-1000.0)).item()
        assert 0.0 <= v < 1e-300


class TestConcat:
    def test_small(self):
        out = ad.concat_last(Tensor([[1.0, 2.0]]), Tensor([[9.0]]))
        np.testing.assert_array_equal(out.data, [[1.0, 2.0, 9.0]])

    def test_empty_right(self):
        a = np.arange(6.0).reshape(3, 2)
        out = ad.concat_last(Tensor(a), Tensor(np.zeros((3, 0))))
        np.testing.assert_array_equal(out.data, a)

    def test_index_by_index(self):
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal((4, 3)), rng.standard_normal((4, 2))
        out = ad.concat_last(Tensor(a), Tensor(b)).data
        for i in range(4):
            for j in range(5):
                assert out[i, j] == (a[i, j] if j < 3 else b[i, j - 3])

    def test_batch_mismatch(self):
        with pytest.raises(DimensionError):
            ad.concat_last(Tensor(np.ones((2, 1))), Tensor(np.ones((3, 1))))


class TestBackward:
    def test_sum_gives_ones(self):
        tape = Tape()
        x = tape.watch(np.arange(6.0).reshape(2, 3))
        g = backward(tape, x.sum())
        np.testing.assert_array_equal(g[x.node].data, np.ones((2, 3)))

    def test_dot_gives_twice(self):
        tape = Tape()
        x = tape.watch([1.0, -2.0, 0.5])
        g = backward(tape, (x * x).sum())
        np.testing.assert_array_equal(g[x.node].data, [2.0, -4.0, 1.0])

    def test_fan_out_accumulates(self):
        tape = Tape()
        x = tape.watch([3.0])
        y = (x * 2.0 + x * x + x).sum()
        assert backward(tape, y)[x.node].data[0] == pytest.approx(2 + 6 + 1)

    def test_non_scalar_rejected(self):
        tape = Tape()
        x = tape.watch([1.0, 2.0])
        with pytest.raises(ContractError):
            backward(tape, x * 2.0)

    def test_mlp_against_finite_differences(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((5, 3))
        w1, b1 = rng.standard_normal((3, 6)), rng.standard_normal(6)
        w2, b2 = rng.standard_normal((6, 1)), rng.standard_normal(1)

        def head(w1_):
            h = np.logaddexp(0.0, x @ w1_ + b1)
            return float(np.sum(h @ w2 + b2))

        tape = Tape()
        tw1 = tape.watch(w1)
        out = ad.affine(ad.softplus(ad.affine(Tensor(x), tw1, Tensor(b1))),
                        Tensor(w2), Tensor(b2)).sum()
        g = backward(tape, out)[tw1.node].data
        assert rel_err(g, central_diff(head, w1)) < 1e-6

    def test_topological_order(self):
        tape = Tape()
        x = tape.watch([1.0, 2.0])
        y = ad.softplus(x * x) + ad.sin(x)
        y.sum()
        for i, (parents, _) in enumerate(tape.nodes):
            assert all(p < i for p in parents)


PRIMITIVES = {
    "softplus": (ad.softplus, lambda a: np.logaddexp(0.0, a)),
    "sigmoid": (ad.sigmoid, lambda a: 1 / (1 + np.exp(-a))),
    "square": (ad.square, lambda a: a * a),
    "sin": (ad.sin, np.sin),
    "cos": (ad.cos, np.cos),
    "tanh": (ad.tanh, np.tanh),
    "exp": (ad.exp, np.exp),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_unary_primitives_match_finite_differences(name):
    op, ref = PRIMITIVES[name]
    rng = np.random.default_rng(11)
    x = rng.standard_normal((3, 4))
    w = rng.standard_normal((3, 4))
    tape = Tape()
    tx = tape.watch(x)
    g = backward(tape, (op(tx) * Tensor(w)).sum())[tx.node].data
    assert rel_err(g, central_diff(lambda a: float(np.sum(ref(a) * w)), x)) < 1e-5


def test_binary_primitives_match_finite_differences():
    rng = np.random.default_rng(12)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal(4) + 3.0
    m = rng.standard_normal((4, 2))

    def ref(a_, b_):
        return float(np.sum(((a_ * b_ - a_ / b_ + b_) @ m) ** 2))

    tape = Tape()
    ta, tb = tape.watch(a), tape.watch(b)
    out = ad.square(ad.matmul(ta * tb - ta / tb + tb, Tensor(m))).sum()
    g = backward(tape, out)
    assert rel_err(g[ta.node].data, central_diff(lambda v: ref(v, b), a)) < 1e-5
    assert rel_err(g[tb.node].data, central_diff(lambda v: ref(a, v), b)) < 1e-5


def test_second_order_through_vjp():
    # d/dx sum(d/dx (x sin x)) = 2 cos x - x sin x
    tape = Tape()
    x = tape.watch([[0.3, -1.2, 2.0]])
    g = vjp(lambda z: ad.sin(z) * z, x, np.ones((1, 3)), create_graph=True)
    h = backward(tape, g.sum())[x.node].data
    xs = np.array([[0.3, -1.2, 2.0]])
    np.testing.assert_allclose(h, 2 * np.cos(xs) - xs * np.sin(xs), rtol=1e-14)


def test_non_finite_is_an_error():
    with pytest.raises(NonFiniteError):
        ad.log(Tensor([-1.0]))


class TestVjp:
    def test_linear_map(self):
        A = np.array([[1.0, 2.0], [3.0, 4.0]])
        v = np.array([[1.0, -1.0]])
        out = vjp(lambda z: ad.matmul(z, Tensor(A.T)), Tensor([[0.5, 0.2]]), v)
        np.testing.assert_allclose(out.data, v @ A)

    def test_identity(self):
        v = np.array([[0.3, -0.7, 1.1]])
        out = vjp(lambda z: z * 1.0, Tensor(np.ones((1, 3))), v)
        np.testing.assert_array_equal(out.data, v)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            vjp(lambda z: z * 1.0, Tensor(np.ones((2, 3))), np.ones((2, 2)))

    def test_matches_dense_jacobian(self):
        from rnode.dynamics import build_field

        field = build_field(4, 16, 3, 1, seed=2)
        p = field.parameters()
        field.load_parameters(p + 0.3 * np.random.default_rng(0).standard_normal(p.size))
        rng = np.random.default_rng(5)
        z = rng.standard_normal((3, 4))
        v = rng.standard_normal((3, 4))
        fn = lambda q: field(q, 0.4)
        rows = [vjp(fn, Tensor(z), np.tile(np.eye(4)[i], (3, 1))).data for i in range(4)]
        J = np.stack(rows, axis=1)  # J[b, i, :] = d f_i / d z
        expected = np.einsum("bi,bij->bj", v, J)
        np.testing.assert_allclose(vjp(fn, Tensor(z), v).data, expected, rtol=1e-12, atol=1e-14)


@settings(max_examples=25, deadline=None)
@given(alpha=st.floats(-3, 3), beta=st.floats(-3, 3), seed=st.integers(0, 2**16))
def test_vjp_is_linear_in_covector(alpha, beta, seed):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((2, 3))
    u, v = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    W = rng.standard_normal((3, 3))
    fn = lambda q: ad.tanh(ad.matmul(q, Tensor(W)))
    lhs = vjp(fn, Tensor(z), alpha * u + beta * v).data
    rhs = alpha * vjp(fn, Tensor(z), u).data + beta * vjp(fn, Tensor(z), v).data
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


def test_replay_is_deterministic():
    def run():
        rng = np.random.default_rng(99)
        tape = Tape()
        w = tape.watch(rng.standard_normal((3, 3)))
        out = ad.softplus(ad.matmul(Tensor(rng.standard_normal((4, 3))), w)).sum()
        return backward(tape, out)[w.node].data

    assert run().tobytes() == run().tobytes()


def test_grad_of_unreached_input_is_zero():
    tape = Tape()
    a, b = tape.watch([1.0]), tape.watch([2.0])
    ga, gb = grad((a * 3.0).sum(), [a, b])
    assert ga.data[0] == 3.0 and gb.data[0] == 0.0


def test_mixed_tapes_rejected():
    a = Tape().watch([1.0])
    b = Tape().watch([1.0])
    with pytest.raises(ContractError):
        a + b


def test_bias_broadcast_gradient():
    tape = Tape()
    b = tape.watch([1.0, 2.0])
    x = Tensor(np.ones((5, 2)))
    g = backward(tape, (x + b).sum())[b.node].data
    np.testing.assert_array_equal(g, [5.0, 5.0])
    assert math.isclose(float(np.sum(g)), 10.0)
