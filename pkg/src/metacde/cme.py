"""Conditional mean embedding operator estimated from a context set.

With feature matrices ``Phi_x`` and ``Phi_y`` (one column per context pair),
the operator maps ``phi_x(x)`` to

    mu(x) = Phi_y (K + lam I)^{-1} Phi_x^T phi_x(x),    K = Phi_x^T Phi_x,

and the score of a response ``y`` is ``<mu(x), phi_y(y)>``.  Everything is
evaluated right to left, so the ``d x d`` operator is never formed.
"""

import numpy as np

from . import autodiff as ad
from .nn import mlp_forward

__all__ = ["as_points", "CMEOperator", "fit_cmeo", "cme_embed", "score", "score_many"]


def as_points(a):
    """Coerce to a float array of shape ``(count, dim)``; 1-D input is one column."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 0:
        return a.reshape(1, 1)
    if a.ndim == 1:
        return a[:, None]
    return a


def _features(net, points, params=None):
    return mlp_forward(net, ad.Tensor(as_points(points).T), params)


class CMEOperator:
    """Fitted embedding operator for one task.

    Built by :func:`fit_cmeo`, or directly from ``d x n`` feature tensors.
    The Cholesky factor of ``K + lam I`` is computed once and reused by every
    embedding, on and off the tape.
    """

    def __init__(self, phi_x_ctx, phi_y_ctx, reg_lambda):
        if phi_x_ctx.ndim != 2 or phi_y_ctx.ndim != 2:
            raise ad.DimensionError("feature matrices must be 2-D")
        if phi_x_ctx.shape[1] != phi_y_ctx.shape[1]:
            raise ad.DimensionError(
                f"context feature counts differ: {phi_x_ctx.shape} vs {phi_y_ctx.shape}"
            )
        if phi_x_ctx.shape[1] < 1:
            raise ValueError("context set is empty")
        if not reg_lambda > 0:
            raise ValueError(f"reg_lambda must be > 0, got {reg_lambda}")
        self.phi_x_ctx = phi_x_ctx
        self.phi_y_ctx = phi_y_ctx
        self.reg_lambda = float(reg_lambda)
        n = phi_x_ctx.shape[1]
        self.gram = ad.matmul(ad.transpose(phi_x_ctx), phi_x_ctx)
        self.gram_reg = self.gram + ad.Tensor(self.reg_lambda * np.eye(n))
        self.solve_cache = ad.cholesky(self.gram_reg.data)

    @property
    def n_context(self):
        return self.phi_x_ctx.shape[1]

    def weights(self, phi_x_star):
        """``(K + lam I)^{-1} Phi_x^T phi_x(x*)`` for feature columns ``phi_x_star``."""
        k_star = ad.matmul(ad.transpose(self.phi_x_ctx), phi_x_star)
        return ad.spd_solve(self.gram_reg, k_star, factor=self.solve_cache)

    def embed_features(self, phi_x_star):
        """Embeddings (``d x m``) for feature columns ``phi_x_star`` (``d x m``)."""
        return ad.matmul(self.phi_y_ctx, self.weights(phi_x_star))


def fit_cmeo(context_x, context_y, model, params=None):
    """Fit the embedding operator of one task.

    ``params`` is a :class:`~metacde.metalearn.BoundParams` when gradients
    should flow into the feature networks.
    """
    cx, cy = as_points(context_x), as_points(context_y)
    if cx.shape[0] != cy.shape[0]:
        raise ValueError(f"context has {cx.shape[0]} inputs but {cy.shape[0]} responses")
    if cx.shape[0] < 1:
        raise ValueError("context set is empty")
    px = params.phi_x if params is not None else None
    py = params.phi_y if params is not None else None
    return CMEOperator(
        _features(model.phi_x, cx, px), _features(model.phi_y, cy, py), model.reg_lambda
    )


def cme_embed(op, x_star, model, params=None):
    """Embedding of ``x_star``.

    A scalar (or, for multi-dimensional inputs, a 1-D vector) is one point and
    gives shape ``(d,)``; an array of points gives ``(d, m)``.
    """
    xs = np.asarray(x_star, dtype=np.float64)
    single = xs.ndim == 0 or (xs.ndim == 1 and model.phi_x.in_dim > 1)
    pts = xs.reshape(1, -1) if single else as_points(xs)
    px = params.phi_x if params is not None else None
    mu = op.embed_features(_features(model.phi_x, pts, px))
    return ad.reshape(mu, (mu.shape[0],)) if single else mu


def score_many(op, x_star, y_values, model, params=None):
    """Scores of many responses against one input, sharing one embedding."""
    mu = cme_embed(op, x_star, model, params)
    py = params.phi_y if params is not None else None
    phi = _features(model.phi_y, y_values, py)
    return ad.reshape(ad.matmul(ad.reshape(mu, (1, -1)), phi), (phi.shape[1],))


def score(op, x_star, y_star, model, params=None):
    """Unnormalized log-density core ``<mu(x*), phi_y(y*)>``."""
    y = np.asarray(y_star, dtype=np.float64).reshape(1, -1)
    return ad.reshape(score_many(op, x_star, y, model, params), ())
