"""Baselines, held-out log-likelihood benchmarks and the paired signed-rank test."""

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp
from scipy.stats import norm, rankdata

from .cme import as_points
from .datasets import DataError
from .metalearn import Grid, interpolate_loglik, make_grid, post_normalize, predict_densities
from .nce import silverman_bandwidth

__all__ = [
    "DegenerateDataError",
    "InsufficientDataError",
    "EPSILON_GRID",
    "BANDWIDTH_GRID",
    "epsilon_kde_density",
    "EpsilonKDE",
    "MarginalKDE",
    "GaussianRegression",
    "ModelMethod",
    "wilcoxon_one_sided",
    "wilcoxon_exact_pvalue",
    "wilcoxon_normal_pvalue",
    "EvalReport",
    "run_benchmark",
]

logger = logging.getLogger(__name__)

EPSILON_GRID = np.linspace(0.1, 1.0, 15)
BANDWIDTH_GRID = np.linspace(0.01, 1.0, 15)

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class DegenerateDataError(ValueError):
    """Every paired difference is zero."""


class InsufficientDataError(ValueError):
    """Too few nonzero paired differences for the test."""


def _gauss_logpdf(grid, centers, h):
    z = (grid[None, :] - centers[:, None]) / h
    return -0.5 * z * z - math.log(h) - _LOG_SQRT_2PI


def _distances(cx, xs):
    return np.sqrt(np.sum((xs[:, None, :] - cx[None, :, :]) ** 2, axis=2))


def _masked_kde(log_k, mask):
    """Row-wise log KDE on the grid using the neighbors selected by ``mask``."""
    stacked = np.where(mask[:, :, None], log_k[None, :, :], -np.inf)
    return logsumexp(stacked, axis=1) - np.log(mask.sum(axis=1))[:, None]


def epsilon_kde_density(context_x, context_y, x_star, grid, epsilon, bandwidth,
                        return_flag=False):
    """Gaussian KDE of the responses whose inputs lie within ``epsilon`` of ``x_star``.

    Falls back to the KDE of all context responses when the neighborhood is
    empty.  The result is normalized on ``grid``; with ``return_flag`` the
    fallback indicator is returned as well.
    """
    if not epsilon > 0 or not bandwidth > 0:
        raise ValueError("epsilon and bandwidth must be > 0")
    cx, cy = as_points(context_x), as_points(context_y)
    if cx.shape[0] == 0:
        raise DataError("context set is empty")
    g = grid if isinstance(grid, Grid) else Grid(*grid)
    xs = np.asarray(x_star, dtype=np.float64).reshape(1, cx.shape[1])
    mask = _distances(cx, xs) <= epsilon
    fallback = not mask.any()
    if fallback:
        mask[:] = True
    logd = _masked_kde(_gauss_logpdf(g.values, cy[:, 0], bandwidth), mask)[0]
    dens = np.exp(post_normalize(logd, g.spacing)[0])
    return (dens, fallback) if return_flag else dens


class EpsilonKDE:
    """Epsilon-neighborhood KDE with per-task leave-one-out selection of
    ``(epsilon, bandwidth)`` over the context set."""

    name = "e-KDE"

    def __init__(self, epsilons=EPSILON_GRID, bandwidths=BANDWIDTH_GRID):
        self.epsilons = np.asarray(epsilons, dtype=np.float64)
        self.bandwidths = np.asarray(bandwidths, dtype=np.float64)
        self.last_selection = None

    def select(self, context_x, context_y, grid):
        cx, cy = as_points(context_x), as_points(context_y)
        n = cx.shape[0]
        if n < 2:
            return float(self.epsilons[-1]), float(self.bandwidths[-1])
        dist = _distances(cx, cx)
        off_diag = ~np.eye(n, dtype=bool)
        best, best_score = None, -np.inf
        for eps in self.epsilons:
            mask = (dist <= eps) & off_diag
            empty = ~mask.any(axis=1)
            mask[empty] = off_diag[empty]
            for h in self.bandwidths:
                logd = _masked_kde(_gauss_logpdf(grid.values, cy[:, 0], h), mask)
                logd, _ = post_normalize(logd, grid.spacing)
                vals, _ = interpolate_loglik(logd, grid, cy[:, 0])
                score = float(np.sum(vals))
                if score > best_score:
                    best, best_score = (float(eps), float(h)), score
        return best

    def log_density(self, context_x, context_y, x_stars, grid):
        cx, cy = as_points(context_x), as_points(context_y)
        if cx.shape[0] == 0:
            raise DataError("context set is empty")
        eps, h = self.select(cx, cy, grid)
        self.last_selection = (eps, h)
        xs = np.asarray(x_stars, dtype=np.float64).reshape(-1, cx.shape[1])
        mask = _distances(cx, xs) <= eps
        empty = ~mask.any(axis=1)
        mask[empty] = True
        logd = _masked_kde(_gauss_logpdf(grid.values, cy[:, 0], h), mask)
        return post_normalize(logd, grid.spacing)[0]


class MarginalKDE:
    """Control that ignores ``x``: a Silverman-bandwidth KDE of the context responses."""

    name = "marginal-KDE"

    def log_density(self, context_x, context_y, x_stars, grid):
        cy = as_points(context_y)
        h = silverman_bandwidth(cy)
        row = logsumexp(_gauss_logpdf(grid.values, cy[:, 0], h), axis=0)
        row = post_normalize(row, grid.spacing)[0]
        m = np.asarray(x_stars).reshape(-1, as_points(context_x).shape[1]).shape[0]
        return np.tile(row, (m, 1))


class GaussianRegression:
    """Unimodal control: ``y | x ~ N(poly(x), s^2)`` fitted by least squares."""

    name = "gaussian"

    def __init__(self, degree=3):
        self.degree = degree

    def _design(self, x):
        if x.shape[1] == 1:
            return np.vander(x[:, 0], self.degree + 1)
        return np.concatenate([np.ones((x.shape[0], 1)), x], axis=1)

    def log_density(self, context_x, context_y, x_stars, grid):
        cx, cy = as_points(context_x), as_points(context_y)
        design = self._design(cx)
        coef, *_ = np.linalg.lstsq(design, cy[:, 0], rcond=None)
        resid = cy[:, 0] - design @ coef
        s = max(float(np.sqrt(np.mean(resid * resid))), 1e-6)
        xs = np.asarray(x_stars, dtype=np.float64).reshape(-1, cx.shape[1])
        mean = self._design(xs) @ coef
        logd = _gauss_logpdf(grid.values, mean, s)
        return post_normalize(logd, grid.spacing)[0]


class ModelMethod:
    """Adapter exposing a trained meta-model as a benchmark method."""

    def __init__(self, model, name=None):
        self.model = model
        self.name = name or {"metacde": "MetaCDE", "metann": "MetaNN"}.get(model.kind, "model")

    def log_density(self, context_x, context_y, x_stars, grid):
        ests = predict_densities(self.model, context_x, context_y, x_stars, grid)
        return np.stack([e.log_density for e in ests])


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank, alternative: differences tend to be positive


def _signed_ranks(diffs):
    d = np.asarray(diffs, dtype=np.float64).ravel()
    if d.size == 0 or np.all(d == 0):
        raise DegenerateDataError("all paired differences are zero")
    d = d[d != 0]
    ranks = rankdata(np.abs(d))
    return d, ranks


def wilcoxon_exact_pvalue(diffs):
    """P(W+ >= observed) under the sign-flip null, counted exactly.

    Mid-ranks are multiples of 1/2, so doubled ranks are integers and the
    null distribution of all ``2**n`` sign assignments is counted by a
    subset-sum recursion.
    """
    d, ranks = _signed_ranks(diffs)
    r2 = np.rint(2 * ranks).astype(np.int64)
    total = int(r2.sum())
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for r in r2:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:-r] if r > 0 else counts
        counts = counts + shifted
    observed = int(r2[d > 0].sum())
    return float(counts[observed:].sum()) / float(2 ** d.size)


def wilcoxon_normal_pvalue(diffs):
    """Normal approximation with tie-corrected variance and continuity correction."""
    d, ranks = _signed_ranks(diffs)
    n = d.size
    w_plus = float(ranks[d > 0].sum())
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts ** 3 - tie_counts) / 48.0
    z = (w_plus - mean - 0.5) / math.sqrt(var)
    return float(norm.sf(z))


def wilcoxon_one_sided(diffs, exact_max_n=20, min_n=5):
    """One-sided signed-rank p-value that the differences are shifted above zero.

    Zero differences are dropped.  Exact for up to ``exact_max_n`` nonzero
    pairs, normal approximation beyond.
    """
    d, _ = _signed_ranks(diffs)
    if d.size < min_n:
        raise InsufficientDataError(f"{d.size} nonzero differences; need at least {min_n}")
    if d.size <= exact_max_n:
        return wilcoxon_exact_pvalue(d)
    return wilcoxon_normal_pvalue(d)


# ---------------------------------------------------------------------------
# benchmark


@dataclass
class EvalReport:
    methods: list
    task_ids: list
    logliks: dict
    clamped: dict
    reference: str
    pvalues: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def values(self, method):
        return np.asarray(self.logliks[method], dtype=np.float64)

    def mean(self, method):
        v = self.values(method)
        v = v[np.isfinite(v)]
        return float(np.mean(v)) if v.size else float("nan")

    def std(self, method):
        v = self.values(method)
        v = v[np.isfinite(v)]
        return float(np.std(v, ddof=1)) if v.size > 1 else float("nan")

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            for key in sorted(self.config):
                fh.write(f"# {key}={self.config[key]}\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["task", "method", "loglik", "n_clamped"])
            for m in self.methods:
                for i, t in enumerate(self.task_ids):
                    writer.writerow([t, m, repr(float(self.logliks[m][i])), int(self.clamped[m][i])])

    def summary(self):
        width = max(len(m) for m in self.methods) + 2
        lines = [f"{'method':<{width}}{'loglik (mean +- std)':<28}p-value vs {self.reference}"]
        for m in self.methods:
            if m == self.reference:
                p = "NA"
            else:
                p = self.pvalues.get(m, "NA")
                p = f"{p:.4g}" if isinstance(p, float) else str(p)
            ll = f"{self.mean(m):.2f} +- {self.std(m):.2f}"
            lines.append(f"{m:<{width}}{ll:<28}{p}")
        if self.config:
            lines.append("config: " + ", ".join(f"{k}={self.config[k]}" for k in sorted(self.config)))
        return "\n".join(lines)


def run_benchmark(methods, test_tasks, context_size=None, grid_size=100, reference=None,
                  config=None):
    """Held-out log-likelihood of every method on every task.

    Each task contributes its first ``context_size`` context points (all of
    them if None) and all of its targets.  Grids span the task's pooled
    responses widened by 10% per side and are shared by all methods.  A
    method that fails on a task gets NaN there and the task is dropped from
    that method's paired test.
    """
    methods = list(methods)
    names = [m.name for m in methods]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate method names {names}")
    reference = reference or names[0]
    logliks = {n: [] for n in names}
    clamped = {n: [] for n in names}
    for idx, task in enumerate(test_tasks):
        k = task.n_context if context_size is None else int(context_size)
        if k > task.n_context:
            raise DataError(f"task {idx} has only {task.n_context} context points")
        cx, cy = task.context_x[:k], task.context_y[:k]
        grid = make_grid(task.all_y, size=grid_size)
        for method in methods:
            try:
                logd = method.log_density(cx, cy, task.target_x, grid)
                vals, flags = interpolate_loglik(logd, grid, task.target_y[:, 0])
                total = float(np.sum(vals))
                if not math.isfinite(total):
                    raise FloatingPointError("non-finite log-likelihood")
            except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
                logger.warning("%s failed on task %d: %s", method.name, idx, exc)
                total, flags = float("nan"), np.zeros(0, dtype=bool)
            logliks[method.name].append(total)
            clamped[method.name].append(int(np.sum(flags)))

    report = EvalReport(names, list(range(len(logliks[reference]))), logliks, clamped,
                        reference, config=dict(config or {}))
    ref = report.values(reference)
    for name in names:
        if name == reference:
            continue
        other = report.values(name)
        ok = np.isfinite(ref) & np.isfinite(other)
        try:
            report.pvalues[name] = wilcoxon_one_sided(ref[ok] - other[ok])
        except DegenerateDataError:
            report.pvalues[name] = "tie"
        except InsufficientDataError:
            report.pvalues[name] = "insufficient-n"
    return report
