import itertools
import math

import numpy as np
import pytest
from scipy.stats import rankdata

from metacde.datasets import DataError, gen_cosine_task
from metacde.evaluation import (
    BANDWIDTH_GRID,
    EPSILON_GRID,
    DegenerateDataError,
    EpsilonKDE,
    GaussianRegression,
    InsufficientDataError,
    MarginalKDE,
    epsilon_kde_density,
    run_benchmark,
    wilcoxon_exact_pvalue,
    wilcoxon_normal_pvalue,
    wilcoxon_one_sided,
)
from metacde.metalearn import Grid, interpolate_loglik, make_grid, post_normalize


def enumeration_pvalue(diffs):
    """Brute force over all 2**n sign assignments of the mid-ranks."""
    d = np.asarray(diffs, dtype=float)
    d = d[d != 0]
    ranks = rankdata(np.abs(d))
    observed = ranks[d > 0].sum()
    hits = 0
    for signs in itertools.product((0, 1), repeat=d.size):
        if np.dot(signs, ranks) >= observed - 1e-9:
            hits += 1
    return hits / 2 ** d.size


# Wilcoxon -----------------------------------------------------------------


def test_all_positive_five():
    assert wilcoxon_one_sided([0.3, 1.2, 2.0, 0.1, 5.0]) == 0.03125


@pytest.mark.parametrize("n", range(5, 11))
def test_exact_matches_enumeration(n):
    r = np.random.default_rng(n)
    for _ in range(5):
        d = r.normal(0.3, 1.0, n)
        assert abs(wilcoxon_one_sided(d) - enumeration_pvalue(d)) < 1e-12


def test_exact_matches_enumeration_with_ties_and_small_n():
    for d in ([1.0, -1.0, 2.0, 2.0, -3.0, 0.5], [1.0], [-2.0, 2.0, 1.0]):
        assert abs(wilcoxon_exact_pvalue(d) - enumeration_pvalue(d)) < 1e-12


def test_symmetric_diffs_near_half():
    d = np.array([1.0, -1.0, 2.5, -2.5, 4.0, -4.0, 7.0, -7.0])
    assert abs(wilcoxon_one_sided(d) - 0.5) < 0.1


def test_monotone_transform_invariance(rng):
    a, b = rng.normal(size=12), rng.normal(size=12) - 0.2
    p1 = wilcoxon_one_sided(a - b)
    p2 = wilcoxon_one_sided((2 * a + 1) - (2 * b + 1))
    assert p1 == p2


def test_exact_and_normal_agree_at_twenty():
    r = np.random.default_rng(42)
    for _ in range(20):
        d = r.normal(0.2, 1.0, 20)
        assert abs(wilcoxon_exact_pvalue(d) - wilcoxon_normal_pvalue(d)) < 0.01


def test_zero_and_small_n_errors():
    with pytest.raises(DegenerateDataError):
        wilcoxon_one_sided(np.zeros(8))
    with pytest.raises(InsufficientDataError):
        wilcoxon_one_sided([1.0, 0.0, 0.0, 2.0, -1.0, 0.0])
    assert wilcoxon_one_sided([0.0] * 3 + [1.0, 2.0, 3.0, 4.0, 5.0]) == 0.03125


def test_large_n_uses_normal_path(rng):
    d = rng.normal(0.5, 1.0, 40)
    assert wilcoxon_one_sided(d) == wilcoxon_normal_pvalue(d)


# epsilon-KDE --------------------------------------------------------------


def test_cv_grids():
    np.testing.assert_allclose(EPSILON_GRID, np.linspace(0.1, 1, 15))
    np.testing.assert_allclose(BANDWIDTH_GRID, np.linspace(0.01, 1, 15))
    assert EPSILON_GRID.size == BANDWIDTH_GRID.size == 15


def test_wide_epsilon_equals_marginal_kde(rng):
    cx, cy = rng.uniform(-1, 1, 12), rng.uniform(0, 1, 12)
    g = Grid(-0.2, 1.2)
    dens = epsilon_kde_density(cx, cy, 0.0, g, epsilon=5.0, bandwidth=0.1)
    z = (g.values[None, :] - cy[:, None]) / 0.1
    marginal = np.mean(np.exp(-0.5 * z * z), axis=0)
    marginal /= marginal.sum() * g.spacing
    np.testing.assert_allclose(dens, marginal, rtol=1e-12)


def test_single_neighbor_is_one_gaussian():
    g = Grid(0.0, 1.0)
    dens, flag = epsilon_kde_density([0.0, 5.0], [0.4, 0.9], 0.05, g, 0.1, 0.07, return_flag=True)
    expected = np.exp(post_normalize(-0.5 * ((g.values - 0.4) / 0.07) ** 2, g.spacing)[0])
    np.testing.assert_allclose(dens, expected, rtol=1e-12)
    assert not flag


def test_empty_neighborhood_falls_back():
    g = Grid(0.0, 1.0)
    dens, flag = epsilon_kde_density([0.0, 0.1], [0.3, 0.6], 3.0, g, 0.1, 0.1, return_flag=True)
    full = epsilon_kde_density([0.0, 0.1], [0.3, 0.6], 0.0, g, 1.0, 0.1)
    assert flag
    np.testing.assert_allclose(dens, full)


def test_epsilon_kde_errors():
    g = Grid(0.0, 1.0)
    with pytest.raises(DataError):
        epsilon_kde_density(np.empty(0), np.empty(0), 0.0, g, 0.1, 0.1)
    with pytest.raises(ValueError):
        epsilon_kde_density([0.0], [0.1], 0.0, g, 0.0, 0.1)


def test_cv_selection_is_on_grid(rng):
    task, _ = gen_cosine_task(rng, 60, context_size=50)
    method = EpsilonKDE()
    logd = method.log_density(task.context_x, task.context_y, task.target_x, Grid(-0.1, 1.1))
    eps, h = method.last_selection
    assert eps in EPSILON_GRID and h in BANDWIDTH_GRID
    assert logd.shape == (10, 100)
    np.testing.assert_allclose(np.exp(logd).sum(axis=1) * 0.012, 1.0, atol=1e-9)


def test_gaussian_regression_is_unimodal(rng):
    task, _ = gen_cosine_task(rng, 60, context_size=50)
    logd = GaussianRegression().log_density(task.context_x, task.context_y, [0.0, 0.5], Grid(-1, 2))
    for row in logd:
        assert np.sum(np.diff(np.sign(np.diff(row))) != 0) == 1


# benchmark ----------------------------------------------------------------


def _tasks(n, seed=0):
    r = np.random.default_rng(seed)
    return [gen_cosine_task(r, 70, context_size=50)[0] for _ in range(n)]


def test_one_method_one_task():
    report = run_benchmark([MarginalKDE()], _tasks(1))
    assert report.methods == ["marginal-KDE"]
    assert len(report.values("marginal-KDE")) == 1
    assert report.pvalues == {}


class _Renamed:
    def __init__(self, inner, name):
        self.inner, self.name = inner, name

    def log_density(self, *args):
        return self.inner.log_density(*args)


def test_identical_methods_are_a_tie():
    report = run_benchmark([MarginalKDE(), _Renamed(MarginalKDE(), "copy")], _tasks(6))
    assert report.pvalues["copy"] == "tie"


def test_single_task_is_insufficient():
    report = run_benchmark([GaussianRegression(), MarginalKDE()], _tasks(1))
    assert report.pvalues["marginal-KDE"] == "insufficient-n"
    assert "insufficient-n" in report.summary()


class _Flaky:
    name = "flaky"

    def __init__(self):
        self.calls = 0

    def log_density(self, cx, cy, xs, grid):
        self.calls += 1
        if self.calls == 2:
            raise FloatingPointError("boom")
        return MarginalKDE().log_density(cx, cy, xs, grid)


def test_failure_is_excluded_pairwise():
    report = run_benchmark([GaussianRegression(), _Flaky()], _tasks(8))
    v = report.values("flaky")
    assert np.isnan(v[1]) and np.isfinite(np.delete(v, 1)).all()
    assert isinstance(report.pvalues["flaky"], float)
    assert math.isfinite(report.mean("flaky"))


def test_report_self_consistency_and_csv(tmp_path):
    report = run_benchmark([GaussianRegression(), MarginalKDE()], _tasks(5), context_size=30,
                           config={"sigma": 0.1})
    for m in report.methods:
        assert report.mean(m) == float(np.mean(report.values(m)))
        assert report.std(m) == float(np.std(report.values(m), ddof=1))
    path = tmp_path / "r.csv"
    report.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "# sigma=0.1"
    assert lines[1] == "task,method,loglik,n_clamped"
    assert len(lines) == 2 + 10
    assert float(lines[2].split(",")[2]) == report.values("gaussian")[0]


def test_benchmark_rejects_oversized_context():
    with pytest.raises(DataError):
        run_benchmark([MarginalKDE()], _tasks(1), context_size=60)


def test_context_size_uses_leading_points():
    t = _tasks(1)[0]
    g = make_grid(t.all_y)
    logd = GaussianRegression().log_density(t.context_x[:15], t.context_y[:15], t.target_x, g)
    expected = np.sum(interpolate_loglik(logd, g, t.target_y[:, 0])[0])
    a = run_benchmark([GaussianRegression()], [t], context_size=15).values("gaussian")
    assert a[0] == expected
