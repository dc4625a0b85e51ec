"""Noise distribution, classifier logit and logistic loss for contrastive training.

The noise density is a Gaussian KDE over a task's pooled responses.  A pair
``(x, y)`` is classified as real with probability ``sigmoid(t)`` where

    t = s(x, y) + b(x) - log(kappa) - log p_f(y).
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import autodiff as ad
from .cme import as_points

__all__ = [
    "silverman_bandwidth",
    "FakeSampler",
    "kde_logpdf",
    "kde_sample",
    "classifier_logit",
    "classifier_probability",
    "nce_loss",
]


def silverman_bandwidth(points):
    """Rule-of-thumb Gaussian bandwidth, averaged over response dimensions."""
    pts = as_points(points)
    n, dim = pts.shape
    sd = np.std(pts, axis=0, ddof=1) if n > 1 else np.ones(dim)
    sd = float(np.mean(sd))
    if not sd > 0:
        sd = 1.0
    return (4.0 / (dim + 2.0)) ** (1.0 / (dim + 4.0)) * n ** (-1.0 / (dim + 4.0)) * sd


@dataclass(frozen=True)
class FakeSampler:
    pooled_y: np.ndarray
    bandwidth: float
    kappa: int = 10

    def __post_init__(self):
        pooled = as_points(self.pooled_y)
        if pooled.shape[0] == 0:
            raise ValueError("pooled_y is empty")
        if not self.bandwidth > 0:
            raise ValueError(f"bandwidth must be > 0, got {self.bandwidth}")
        if int(self.kappa) < 1:
            raise ValueError(f"kappa must be a positive integer, got {self.kappa}")
        object.__setattr__(self, "pooled_y", pooled)
        object.__setattr__(self, "bandwidth", float(self.bandwidth))
        object.__setattr__(self, "kappa", int(self.kappa))

    @classmethod
    def fit(cls, pooled_y, bandwidth=None, kappa=10):
        """Sampler over ``pooled_y``; Silverman's rule when ``bandwidth`` is None."""
        if bandwidth is None:
            bandwidth = silverman_bandwidth(pooled_y)
        return cls(pooled_y, bandwidth, kappa)

    @property
    def dim(self):
        return self.pooled_y.shape[1]


def kde_logpdf(fs, y):
    """Log density of the noise KDE at ``y``.

    A single point returns a float; an array of points (rows) returns an array.
    """
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 0 or (y.ndim == 1 and fs.dim > 1)
    pts = y.reshape(1, -1) if single else as_points(y)
    h = fs.bandwidth
    sq = np.sum((pts[:, None, :] - fs.pooled_y[None, :, :]) ** 2, axis=2)
    m = fs.pooled_y.shape[0]
    log_norm = np.log(m) + fs.dim * (np.log(h) + 0.5 * np.log(2.0 * np.pi))
    out = logsumexp(-0.5 * sq / (h * h), axis=1) - log_norm
    return float(out[0]) if single else out


def kde_sample(fs, count, rng):
    """``count`` draws: a uniformly chosen pooled point plus ``N(0, h^2 I)`` noise."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    idx = rng.integers(0, fs.pooled_y.shape[0], size=count)
    noise = rng.standard_normal((count, fs.dim))
    return fs.pooled_y[idx] + fs.bandwidth * noise


def classifier_logit(s, b, log_pf, kappa):
    """Logit of P(real | x, y); works on floats, arrays and tape tensors."""
    return (s + b - log_pf) - np.log(kappa)


def classifier_probability(s, b, log_pf, kappa):
    """P(real | x, y) = p / (p + kappa p_f), evaluated from ``u = log(p / p_f)``.

    ``u = 0`` gives exactly ``1 / (1 + kappa)``.
    """
    u = np.asarray(s + b - log_pf, dtype=np.float64)
    e = np.exp(-np.abs(u))
    return np.where(u >= 0, 1.0 / (1.0 + kappa * e), e / (e + kappa))


def nce_loss(true_logits, fake_logits):
    """Logistic loss: ``sum softplus(-t_true) + sum softplus(t_fake)``.

    ``fake_logits`` has one row per true pair and ``kappa`` columns.
    """
    t = true_logits if isinstance(true_logits, ad.Tensor) else ad.Tensor(true_logits)
    f = fake_logits if isinstance(fake_logits, ad.Tensor) else ad.Tensor(fake_logits)
    n = t.size
    if f.ndim != 2 or f.shape[0] != n:
        raise ad.DimensionError(
            f"expected fake logits of shape ({n}, kappa), got {f.shape}"
        )
    return ad.reduce_sum(ad.softplus(-t)) + ad.reduce_sum(ad.softplus(f))
