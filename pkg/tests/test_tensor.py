import numpy as np
import numpy.testing as nptest
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from gatedlora import tensor as T
from gatedlora.errors import ContractError, DimensionError, FormatError, LengthError
from gatedlora.tensor import Tensor, grad_check

from conftest import central_difference, rel_err


def leaf(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def grads_of(f, *arrays):
    xs = [leaf(a) for a in arrays]
    f(*xs).backward()
    return [x.grad.data for x in xs]


# ---------------------------------------------------------------- matmul

def test_matmul_identity(rng):
    m = rng.normal(size=(2, 2))
    nptest.assert_array_equal(T.matmul(Tensor(np.eye(2)), Tensor(m)).data, m)


def test_matmul_row_selection():
    out = T.matmul(Tensor([[1.0, 0.0]]), Tensor([[1.0, 2.0], [3.0, 4.0]]))
    nptest.assert_array_equal(out.data, [[1.0, 2.0]])


def test_matmul_grads_match_central_difference(rng):
    a, b, w = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=(3, 2))
    ga, gb = grads_of(lambda x, y: T.sum(T.mul(T.matmul(x, y), Tensor(w))), a, b)
    assert rel_err(ga, central_difference(lambda x: np.sum((x @ b) * w), a)) < 1e-6
    assert rel_err(gb, central_difference(lambda y: np.sum((a @ y) * w), b)) < 1e-6


def test_batched_matmul_grads(rng):
    rep = grad_check(lambda x, y: T.sum(T.square(T.matmul(x, y))),
                     [Tensor(rng.normal(size=(2, 3, 4))), Tensor(rng.normal(size=(2, 4, 5)))])
    assert rep.passed, rep.failures[:3]


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# ---------------------------------------------------------------- elementwise

def test_add_identity_and_scale_annihilator(rng):
    x = rng.normal(size=(3, 2))
    nptest.assert_array_equal(T.add(Tensor(x), Tensor(0.0)).data, x)
    nptest.assert_array_equal(T.scale(Tensor(x), 0.0).data, np.zeros_like(x))


def test_mul_grads_match_central_difference(rng):
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    ga, gb = grads_of(lambda x, y: T.sum(T.mul(x, y)), a, b)
    assert rel_err(ga, central_difference(lambda x: np.sum(x * b), a)) < 1e-6
    assert rel_err(gb, central_difference(lambda y: np.sum(a * y), b)) < 1e-6


@pytest.mark.parametrize("op", [T.add, T.sub, T.mul, T.div])
def test_trailing_vector_broadcast(op, rng):
    a, v = rng.normal(size=(4, 3)), rng.uniform(0.5, 2.0, size=3)
    rep = grad_check(lambda x, y: T.sum(T.square(op(x, y))), [Tensor(a), Tensor(v)])
    assert rep.passed, rep.failures[:3]


def test_leading_broadcast_rejected():
    with pytest.raises(DimensionError):
        T.add(Tensor(np.ones((4, 3))), Tensor(np.ones((4, 1))))


# ---------------------------------------------------------------- softmax

def test_softmax_uniform():
    nptest.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)


def test_softmax_stable_for_large_logits():
    out = T.softmax(Tensor([1000.0, 0.0, 0.0])).data
    assert np.all(np.isfinite(out))
    nptest.assert_allclose(out, [1.0, 0.0, 0.0], atol=1e-300)


def test_softmax_jvp_matches_central_difference(rng):
    x, v = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))

    def ref(z):
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        return np.sum(e / e.sum(axis=-1, keepdims=True) * v)

    (g,) = grads_of(lambda t: T.sum(T.mul(T.softmax(t), Tensor(v))), x)
    assert rel_err(g, central_difference(ref, x)) < 1e-6


# ---------------------------------------------------------------- layer norm

def test_layer_norm_constant_row_gives_zero():
    out = T.layer_norm(Tensor(np.full((1, 4), 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    nptest.assert_array_equal(out.data, np.zeros((1, 4)))


def test_layer_norm_zero_gamma_returns_beta(rng):
    beta = rng.normal(size=5)
    out = T.layer_norm(Tensor(rng.normal(size=(3, 5))), Tensor(np.zeros(5)), Tensor(beta))
    nptest.assert_array_equal(out.data, np.broadcast_to(beta, (3, 5)))


def test_layer_norm_grads(rng):
    x, gam, bet, w = rng.normal(size=(2, 3, 6)), rng.normal(size=6), rng.normal(size=6), rng.normal(size=(2, 3, 6))
    rep = grad_check(lambda a, g, b: T.sum(T.mul(T.layer_norm(a, g, b), Tensor(w))),
                     [Tensor(x), Tensor(gam), Tensor(bet)], tol=1e-5)
    assert rep.passed, rep.failures[:3]


# ---------------------------------------------------------------- gelu

def test_gelu_fixed_points():
    assert T.gelu(Tensor(0.0)).item() == 0.0
    assert abs(T.gelu(Tensor(10.0)).item() - 10.0) < 1e-6


def test_gelu_grads(rng):
    x, h = rng.normal(scale=2.0, size=(4, 5)), 1e-5
    c = np.sqrt(2 / np.pi)
    ref = lambda z: 0.5 * z * (1 + np.tanh(c * (z + 0.044715 * z ** 3)))
    (g,) = grads_of(lambda t: T.sum(T.gelu(t)), x)
    # separable, so the elementwise central difference is the full gradient
    assert rel_err(g, (ref(x + h) - ref(x - h)) / (2 * h), floor=1e-6) < 1e-6


# ---------------------------------------------------------------- cross entropy

def test_cross_entropy_saturated():
    assert T.cross_entropy(Tensor([[100.0, 0.0]]), [0]).item() < 1e-40


def test_cross_entropy_uniform():
    assert T.cross_entropy(Tensor(np.zeros((2, 4))), [1, 3]).item() == pytest.approx(np.log(4), abs=1e-15)


def test_cross_entropy_grads(rng):
    logits, labels = rng.normal(size=(3, 5)), np.array([4, 0, 2])

    def ref(z):
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return -logp[np.arange(3), labels].mean()

    (g,) = grads_of(lambda t: T.cross_entropy(t, labels), logits)
    assert rel_err(g, central_difference(ref, logits)) < 1e-6


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        T.cross_entropy(Tensor(np.zeros((1, 3))), [3])


# ---------------------------------------------------------------- shape ops and norms

def test_shape_ops_grads(rng):
    x = rng.normal(size=(2, 3, 4))

    def f(t):
        p = T.permute(t, (1, 0, 2))
        r = T.reshape(p, (3, 8))
        c = T.concat([T.take(t, 1, axis=1), T.take(t, 0, axis=0)], axis=0)
        return T.add(T.sum(T.square(r)), T.sum(T.mul(c, c)))

    rep = grad_check(f, [Tensor(x)])
    assert rep.passed, rep.failures[:3]


def test_col_norm_grads(rng):
    rep = grad_check(lambda t: T.sum(T.col_norm(t)), [Tensor(rng.normal(size=(4, 3)))])
    assert rep.passed


def test_repeat_rows_and_mean_grads(rng):
    rep = grad_check(lambda t: T.mean(T.square(T.repeat_rows(t, 3))), [Tensor(rng.normal(size=(2, 2)))])
    assert rep.passed


# ---------------------------------------------------------------- backward contract

def test_sum_grad_is_all_ones(rng):
    x = rng.normal(size=(3, 2))
    rep = grad_check(lambda t: T.sum(t), [Tensor(x)])
    assert rep.max_rel_err < 1e-9
    (g,) = grads_of(lambda t: T.sum(t), x)
    nptest.assert_array_equal(g, np.ones_like(x))


def test_sum_of_squares_grad():
    (g,) = grads_of(lambda t: T.sum(T.mul(t, t)), [1.0, 2.0])
    nptest.assert_array_equal(g, [2.0, 4.0])


def test_backward_twice_is_an_error():
    x = leaf([1.0, 2.0])
    loss = T.sum(T.square(x))
    loss.backward()
    with pytest.raises(ContractError):
        loss.backward()


def test_stale_leaf_grad_is_an_error():
    x = leaf([1.0, 2.0])
    T.sum(x).backward()
    with pytest.raises(ContractError):
        T.sum(T.square(x)).backward()
    x.zero_grad()
    T.sum(T.square(x)).backward()
    nptest.assert_array_equal(x.grad.data, [2.0, 4.0])


def test_backward_needs_scalar():
    with pytest.raises(ContractError):
        T.square(leaf([1.0, 2.0])).backward()


def test_shared_subexpression_accumulates():
    x = leaf(3.0)
    y = T.mul(x, x)
    T.add(y, y).backward()
    assert x.grad.item() == 12.0


def test_no_grad_builds_no_graph():
    x = leaf([1.0])
    with T.no_grad():
        y = T.square(x)
    assert not y.requires_grad and y.is_leaf


def test_grad_check_flags_a_wrong_backward():
    def bad(t):
        return T._result(np.asarray(np.sum(t.data ** 2)), (t,), lambda g: (g * t.data,))

    assert not grad_check(bad, [Tensor(np.array([1.0, -2.0]))]).passed


def test_grad_check_rejects_32bit():
    with pytest.raises(ContractError):
        grad_check(lambda t: T.sum(t), [Tensor(np.ones(2), dtype=np.float32)])


@given(alpha=st.floats(-3, 3), beta=st.floats(-3, 3),
       x=hnp.arrays(np.float64, (2, 3), elements=st.floats(-2, 2)))
def test_gradient_linearity(alpha, beta, x):
    def l1(t):
        return T.sum(T.gelu(t))

    def l2(t):
        return T.sum(T.mul(t, t))

    (g1,) = grads_of(l1, x)
    (g2,) = grads_of(l2, x)
    (g,) = grads_of(lambda t: T.add(T.scale(l1(t), alpha), T.scale(l2(t), beta)), x)
    nptest.assert_allclose(g, alpha * g1 + beta * g2, rtol=1e-12, atol=1e-12)


# ---------------------------------------------------------------- blobs

def test_blob_round_trip(tmp_path, rng):
    a, b = rng.normal(size=(3, 2)), rng.normal(size=4)
    entries = T.write_blob(tmp_path / "x.bin", [("a", a, "float64"), ("b", b, "float32")])
    back = T.read_blob(tmp_path / "x.bin", entries)
    nptest.assert_array_equal(back["a"], a)
    nptest.assert_array_equal(back["b"], b.astype(np.float32))


def test_blob_truncated(tmp_path):
    entries = T.write_blob(tmp_path / "x.bin", [("a", np.ones(8), "float64")])
    (tmp_path / "x.bin").write_bytes((tmp_path / "x.bin").read_bytes()[:-1])
    with pytest.raises(LengthError):
        T.read_blob(tmp_path / "x.bin", entries)


def test_blob_bad_dtype(tmp_path):
    with pytest.raises(FormatError):
        T.write_blob(tmp_path / "x.bin", [("a", np.ones(2), "int8")])
