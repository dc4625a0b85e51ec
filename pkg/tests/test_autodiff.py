import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from metacde import autodiff as ad
from gradcheck import check_grad

TOL = 1e-5


def test_matmul_identity_and_hand_values():
    m = np.array([[1.5, -2.0], [0.25, 4.0]])
    np.testing.assert_array_equal(ad.matmul(np.eye(2), m).data, m)
    out = ad.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_gradient_of_sum(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    tape = ad.Tape()
    ta, tb = tape.variable(a), tape.variable(b)
    grads = tape.backward(ad.reduce_sum(ta @ tb))
    np.testing.assert_allclose(grads[ta], np.ones((3, 2)) @ b.T, rtol=1e-12)
    assert check_grad(lambda x, y: ad.reduce_sum(x @ y), a, b) < TOL


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ad.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_unary_values():
    assert ad.tanh(0.0).data == 0.0
    assert ad.sigmoid(0.0).data == 0.5
    assert abs(ad.softplus(100.0).data - 100.0) < 1e-12
    assert np.isfinite(ad.softplus(-800.0).data)
    assert ad.softplus(1e4).data == 1e4


def test_tanh_gradient_at_point():
    tape = ad.Tape()
    x = tape.variable(0.3)
    g = tape.backward(ad.tanh(x))[x]
    assert abs(g - (1 - np.tanh(0.3) ** 2)) < 1e-15
    assert check_grad(ad.tanh, np.array(0.3)) < TOL


def test_log_domain_error():
    with pytest.raises(ad.DomainError):
        ad.log(np.array([1.0, 0.0]))


def test_binary_shape_mismatch():
    with pytest.raises(ad.DimensionError):
        ad.add(np.ones(3), np.ones(4))


@pytest.mark.parametrize(
    "op",
    [ad.tanh, ad.exp, ad.softplus, ad.sigmoid, ad.negate,
     lambda t: ad.log(ad.exp(t) + 0.5)],
    ids=["tanh", "exp", "softplus", "sigmoid", "negate", "log"],
)
def test_unary_gradients(op, rng):
    x = rng.normal(size=(3, 2))
    w = rng.normal(size=(3, 2))
    assert check_grad(lambda t: ad.reduce_sum(op(t) * w), x) < TOL


@pytest.mark.parametrize("op", [ad.add, ad.sub, ad.mul], ids=["add", "sub", "mul"])
def test_binary_gradients(op, rng):
    a, b, w = rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    assert check_grad(lambda x, y: ad.reduce_sum(op(x, y) * w), a, b) < TOL


def test_scalar_broadcast_gradient(rng):
    a, s = rng.normal(size=(2, 3)), np.array(0.7)
    assert check_grad(lambda x, c: ad.reduce_sum(ad.tanh(x * c + c)), a, s) < TOL


def test_reductions():
    assert ad.reduce_sum([1.0, 2.0, 3.0]).data == 6.0
    assert ad.reduce_mean(np.full((3, 3), 2.5)).data == 2.5
    tape = ad.Tape()
    x = tape.variable(np.arange(4.0))
    np.testing.assert_array_equal(tape.backward(ad.reduce_mean(x))[x], np.full(4, 0.25))
    with pytest.raises(ad.DimensionError):
        ad.reduce_sum(np.ones((2, 2)), axis=2)


@pytest.mark.parametrize("axis", [0, 1])
def test_axis_reduction_gradients(axis, rng):
    a = rng.normal(size=(3, 4))
    w = rng.normal(size=a.shape[1 - axis])
    assert check_grad(lambda x: ad.reduce_sum(ad.reduce_sum(x, axis) * w), a) < TOL
    assert check_grad(lambda x: ad.reduce_sum(ad.reduce_mean(x, axis) * w), a) < TOL


def test_structural_op_gradients(rng):
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 2))
    w = rng.normal(size=(3, 2))
    assert check_grad(lambda x: ad.reduce_sum(ad.transpose(x) * w), a) < TOL
    assert check_grad(lambda x: ad.reduce_sum(ad.reshape(x, (3, 2)) * w), a) < TOL
    w2 = rng.normal(size=(2, 5))
    assert check_grad(lambda x, y: ad.reduce_sum(ad.concat([x, y], axis=1) * w2), a, b) < TOL
    w3 = rng.normal(size=(2, 2))
    assert check_grad(lambda x: ad.reduce_sum(ad.columns(x, 1, 3) * w3), a) < TOL
    w4 = rng.normal(size=(2, 9))
    assert check_grad(lambda x: ad.reduce_sum(ad.repeat_columns(x, 3) * w4), a) < TOL


def test_repeat_columns_layout():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.repeat_columns(a, 2).data, np.repeat(a, 2, axis=1))


# ---------------------------------------------------------------------------
# spd_solve


def test_spd_solve_identity_and_scaling(rng):
    b = rng.normal(size=(3, 2))
    np.testing.assert_allclose(ad.spd_solve(np.eye(3), b).data, b, rtol=0, atol=1e-15)
    np.testing.assert_allclose(ad.spd_solve(2 * np.eye(3), b).data, b / 2, rtol=0, atol=1e-15)


def test_spd_solve_residual_and_gradient(rng):
    m = rng.normal(size=(4, 4))
    a = m.T @ m + np.eye(4)
    b = rng.normal(size=(4, 2))
    c = ad.spd_solve(a, b).data
    assert np.max(np.abs(a @ c - b)) < 1e-10
    w = rng.normal(size=(4, 2))

    def f(mm, bb):
        return ad.reduce_sum(ad.spd_solve(ad.transpose(mm) @ mm + np.eye(4), bb) * w)

    assert check_grad(f, m, b) < TOL


def test_spd_solve_vector_rhs(rng):
    m = rng.normal(size=(3, 3))
    a = m @ m.T + np.eye(3)
    b = rng.normal(size=3)
    np.testing.assert_allclose(a @ ad.spd_solve(a, b).data, b, atol=1e-12)
    assert check_grad(lambda bb: ad.reduce_sum(ad.tanh(ad.spd_solve(a, bb))), b) < TOL


def test_spd_solve_symmetric_perturbation_gradient(rng):
    # dA is symmetrized, so compare against symmetric finite differences
    m = rng.normal(size=(3, 3))
    a = m @ m.T + np.eye(3)
    b = rng.normal(size=(3, 1))
    tape = ad.Tape()
    ta = tape.variable(a)
    g = tape.backward(ad.reduce_sum(ad.spd_solve(ta, b)))[ta]
    h = 1e-5
    for i in range(3):
        for j in range(3):
            e = np.zeros((3, 3))
            e[i, j] += 0.5
            e[j, i] += 0.5
            fd = (np.sum(np.linalg.solve(a + h * e, b)) - np.sum(np.linalg.solve(a - h * e, b))) / (2 * h)
            assert abs(fd - np.sum(g * e)) < 1e-8


def test_spd_solve_definiteness_error_reports_pivot():
    a = np.diag([1.0, 2.0, -1.0, 4.0])
    with pytest.raises(ad.DefinitenessError) as info:
        ad.spd_solve(a, np.ones((4, 1)))
    assert info.value.pivot == 2


def test_spd_solve_rejects_asymmetric():
    with pytest.raises(ad.DomainError):
        ad.spd_solve(np.array([[2.0, 1.0], [0.0, 2.0]]), np.ones(2))


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2**31 - 1))
def test_spd_solve_residual_property(n, seed):
    r = np.random.default_rng(seed)
    q, _ = np.linalg.qr(r.normal(size=(n, n)))
    eig = np.exp(r.uniform(0, np.log(1e5), size=n))
    a = (q * eig) @ q.T
    a = 0.5 * (a + a.T)
    b = r.normal(size=(n, 3))
    c = ad.spd_solve(a, b).data
    assert np.max(np.abs(a @ c - b)) < 1e-9 * np.max(np.abs(b))


# ---------------------------------------------------------------------------
# tape


def test_backward_identity_and_quadratic():
    tape = ad.Tape()
    x = tape.variable(3.0)
    assert tape.backward(x)[x] == 1.0
    tape = ad.Tape()
    x = tape.variable([1.0, 2.0])
    np.testing.assert_array_equal(tape.backward(ad.reduce_sum(x * x))[x], [2.0, 4.0])


def test_backward_rejects_non_scalar_root():
    tape = ad.Tape()
    x = tape.variable([1.0, 2.0])
    with pytest.raises(ad.DimensionError):
        tape.backward(x * 2.0)


def test_unreachable_nodes_have_zero_gradient():
    tape = ad.Tape()
    x, y = tape.variable([1.0, 2.0]), tape.variable([[3.0]])
    grads = tape.backward(ad.reduce_sum(x))
    np.testing.assert_array_equal(grads[y], [[0.0]])


def test_parents_precede_children():
    tape = ad.Tape()
    x = tape.variable(np.ones((2, 2)))
    ad.reduce_sum(ad.tanh(x @ x) + x)
    for i, node in enumerate(tape.nodes):
        assert all(p is None or p < i for p in node.parents)


def test_replay_is_bitwise_deterministic(rng):
    a = rng.normal(size=(4, 4))
    tape = ad.Tape()
    x = tape.variable(a)
    loss = ad.reduce_sum(ad.softplus(ad.spd_solve(ad.transpose(x) @ x + np.eye(4), x)))
    g1 = tape.backward(loss)[x].copy()
    g2 = tape.backward(loss)[x]
    assert np.array_equal(g1, g2)


def test_constants_do_not_record():
    out = ad.tanh(ad.Tensor(np.ones(2))) + 1.0
    assert out.tape is None


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 3), elements=st.floats(-3, 3)))
def test_composite_gradient_property(a):
    w = np.arange(6.0).reshape(3, 2) / 6.0
    assert check_grad(lambda t: ad.reduce_sum(ad.sigmoid(ad.tanh(t) @ w)), a) < TOL
