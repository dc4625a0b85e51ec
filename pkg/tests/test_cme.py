import numpy as np
import pytest

from metacde import autodiff as ad
from metacde.cme import CMEOperator, cme_embed, fit_cmeo, score, score_many
from metacde.metalearn import MetaModel
from metacde.nn import Mlp, mlp_init


def make_model(rng, dim_x=1, dim_y=1, d=4, reg_lambda=0.1, phi_y=None):
    phi_x = mlp_init([dim_x, 6, d], rng)
    if phi_y is None:
        phi_y = mlp_init([dim_y, 6, d], rng)
    return MetaModel(phi_x, phi_y, mlp_init([d, 3, 1], rng), reg_lambda=reg_lambda)


def identity_net(d):
    return Mlp((d, d), [np.eye(d)], [np.zeros(d)])


def feat(net, pts):
    return net(np.atleast_2d(np.asarray(pts, dtype=float).T).reshape(net.in_dim, -1))


def test_single_context_gram(rng):
    model = make_model(rng)
    op = fit_cmeo([0.4], [0.7], model)
    fx = feat(model.phi_x, [0.4])[:, 0]
    assert op.gram.shape == (1, 1)
    assert abs(op.gram.data[0, 0] - fx @ fx) < 1e-14


def test_duplicate_context_is_regularized(rng):
    model = make_model(rng)
    op = fit_cmeo([0.2, 0.2, 0.2], [1.0, 1.0, 1.0], model)
    assert np.all(np.linalg.eigvalsh(op.gram_reg.data) >= 0.1 - 1e-12)


def test_ten_point_solve_residual(rng):
    model = make_model(rng)
    cx, cy = rng.uniform(-1, 1, 10), rng.uniform(0, 1, 10)
    op = fit_cmeo(cx, cy, model)
    fstar = ad.Tensor(feat(model.phi_x, [0.3]))
    alpha = op.weights(fstar).data
    rhs = op.phi_x_ctx.data.T @ fstar.data
    assert np.max(np.abs(op.gram_reg.data @ alpha - rhs)) < 1e-9


def test_single_context_closed_form(rng):
    model = make_model(rng)
    x1, y1, xs, ys = 0.4, 0.7, -0.1, 0.2
    op = fit_cmeo([x1], [y1], model)
    fx1, fxs = feat(model.phi_x, [x1])[:, 0], feat(model.phi_x, [xs])[:, 0]
    fy1, fys = feat(model.phi_y, [y1])[:, 0], feat(model.phi_y, [ys])[:, 0]
    expected = fy1 * (fx1 @ fxs) / (fx1 @ fx1 + model.reg_lambda)
    np.testing.assert_allclose(cme_embed(op, xs, model).data, expected, rtol=1e-12, atol=1e-15)
    s = float(score(op, xs, ys, model).data)
    assert abs(s - (fx1 @ fxs) * (fy1 @ fys) / (fx1 @ fx1 + model.reg_lambda)) < 1e-12


def test_interpolation_and_shrinkage_limits(rng):
    model = make_model(rng, reg_lambda=1e-8)
    op = fit_cmeo([0.4], [0.7], model)
    fy1 = feat(model.phi_y, [0.7])[:, 0]
    np.testing.assert_allclose(cme_embed(op, 0.4, model).data, fy1, atol=1e-5)
    model.reg_lambda = 1e12
    op = fit_cmeo([0.4], [0.7], model)
    assert np.linalg.norm(cme_embed(op, 0.4, model).data) < 1e-6 * np.linalg.norm(fy1)


def test_constant_phi_y_gives_y_independent_score(rng):
    const = Mlp.zeros([1, 5, 4])
    const.biases[-1][:] = [0.5, -1.0, 2.0, 0.25]
    model = make_model(rng, phi_y=const)
    op = fit_cmeo(rng.uniform(-1, 1, 6), rng.uniform(0, 1, 6), model)
    s = score_many(op, 0.1, np.linspace(0, 1, 9), model).data
    assert np.ptp(s) == 0.0


def test_identity_phi_y_is_kernel_ridge(rng):
    model = make_model(rng, d=1, phi_y=identity_net(1))
    cx, cy = rng.uniform(-1, 1, 12), rng.uniform(0, 1, 12)
    op = fit_cmeo(cx, cy, model)
    fx = feat(model.phi_x, cx)
    k = fx.T @ fx
    xs = np.array([0.25, -0.6])
    kstar = fx.T @ feat(model.phi_x, xs)
    ridge = cy @ np.linalg.solve(k + 0.1 * np.eye(12), kstar)
    np.testing.assert_allclose(cme_embed(op, xs, model).data[0], ridge, atol=1e-10)


def test_gram_symmetry_and_permutation_invariance(rng):
    model = make_model(rng)
    cx, cy = rng.uniform(-1, 1, 15), rng.uniform(0, 1, 15)
    op = fit_cmeo(cx, cy, model)
    assert np.max(np.abs(op.gram.data - op.gram.data.T)) < 1e-12
    perm = rng.permutation(15)
    op2 = fit_cmeo(cx[perm], cy[perm], model)
    ys = np.linspace(0, 1, 7)
    np.testing.assert_allclose(
        score_many(op, 0.3, ys, model).data, score_many(op2, 0.3, ys, model).data, atol=1e-10
    )


def test_score_linear_in_response_features(rng):
    model = make_model(rng)
    op = fit_cmeo(rng.uniform(-1, 1, 8), rng.uniform(0, 1, 8), model)
    mu = cme_embed(op, 0.2, model).data
    fa, fb = rng.normal(size=4), rng.normal(size=4)
    assert abs(mu @ (fa + fb) - (mu @ fa + mu @ fb)) < 1e-12
    assert abs(mu @ (3.0 * fa) - 3.0 * (mu @ fa)) < 1e-12


def test_mismatched_context_counts(rng):
    model = make_model(rng)
    with pytest.raises(ValueError):
        fit_cmeo([0.1, 0.2], [0.3], model)


def test_near_duplicate_context_with_tiny_lambda_fails_factorization():
    phi = ad.Tensor(np.array([[1.0, 1.0 + 1e-9, 1.0], [0.3, 0.3, 0.3]]))
    with pytest.raises(ValueError):
        CMEOperator(phi, phi, 0.0)
    with pytest.raises(ad.DefinitenessError) as info:
        CMEOperator(phi, phi, 1e-18)
    assert info.value.pivot == 2


def test_embedding_gradients_flow_to_feature_maps(rng):
    from gradcheck import relative_error

    model = make_model(rng)
    cx, cy = rng.uniform(-1, 1, 5), rng.uniform(0, 1, 5)
    tape = ad.Tape()
    params = model.bind(tape)
    op = fit_cmeo(cx, cy, model, params)
    loss = ad.reduce_sum(ad.tanh(score_many(op, 0.3, [0.1, 0.9], model, params)))
    grads = tape.backward(loss)
    w = model.phi_x.weights[0]

    def f(v):
        old = w.copy()
        w[...] = v
        try:
            op2 = fit_cmeo(cx, cy, model)
            return np.sum(np.tanh(score_many(op2, 0.3, [0.1, 0.9], model).data))
        finally:
            w[...] = old

    assert relative_error(grads[params.phi_x[0]], ad.numerical_gradient(f, w.copy())) < 1e-5
