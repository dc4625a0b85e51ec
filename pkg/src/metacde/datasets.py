"""Synthetic task families, the cosine ground-truth oracle and CSV ingestion."""

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from .autodiff import DefinitenessError, cholesky
from .cme import as_points

__all__ = [
    "DataError",
    "CsvParseError",
    "SchemaError",
    "DegenerateParameterError",
    "TaskDataset",
    "CosineTaskParams",
    "GPTaskParams",
    "COSINE_VARIANTS",
    "sample_cosine_params",
    "sample_cosine_task",
    "gen_cosine_task",
    "cosine_true_conditional",
    "sample_gp_branches",
    "gen_gp_task",
    "load_csv",
    "write_task_csv",
    "task_column_names",
]


class DataError(ValueError):
    """Task data does not satisfy an operation's preconditions."""


class CsvParseError(DataError):
    def __init__(self, row, column, value, path=None):
        self.row = row
        self.column = column
        self.value = value
        where = f"{path}: " if path else ""
        super().__init__(f"{where}row {row}, column {column!r}: cannot parse {value!r} as a number")


class SchemaError(DataError):
    pass


class DegenerateParameterError(ValueError):
    pass


@dataclass
class TaskDataset:
    """One conditional density estimation task.

    Points are stored as ``(count, dim)`` arrays.  ``params`` holds the
    generating parameters of synthetic tasks (``None`` for loaded data).
    """

    context_x: np.ndarray
    context_y: np.ndarray
    target_x: np.ndarray = None
    target_y: np.ndarray = None
    kind: str = "csv"
    params: object = field(default=None, repr=False)

    def __post_init__(self):
        self.context_x = as_points(self.context_x)
        self.context_y = as_points(self.context_y)
        dx, dy = self.context_x.shape[1], self.context_y.shape[1]
        self.target_x = np.empty((0, dx)) if self.target_x is None else as_points(self.target_x)
        self.target_y = np.empty((0, dy)) if self.target_y is None else as_points(self.target_y)
        if self.context_x.shape[0] != self.context_y.shape[0]:
            raise DataError("context inputs and responses differ in count")
        if self.target_x.shape[0] != self.target_y.shape[0]:
            raise DataError("target inputs and responses differ in count")
        if self.target_x.shape[1] != dx or self.target_y.shape[1] != dy:
            raise DataError("context and target dimensions differ")

    @property
    def dims(self):
        return self.context_x.shape[1], self.context_y.shape[1]

    @property
    def n_context(self):
        return self.context_x.shape[0]

    @property
    def n_target(self):
        return self.target_x.shape[0]

    def __len__(self):
        return self.n_context + self.n_target

    @property
    def all_x(self):
        return np.concatenate([self.context_x, self.target_x])

    @property
    def all_y(self):
        return np.concatenate([self.context_y, self.target_y])

    def split(self, context_size, target_size=None, rng=None):
        """Re-partition the pooled points into context and target sets.

        Without ``rng`` the first ``context_size`` pooled points become the
        context; otherwise the pool is shuffled first.
        """
        total = len(self)
        if target_size is None:
            target_size = total - context_size
        if context_size < 1 or target_size < 0 or context_size + target_size > total:
            raise DataError(
                f"cannot take {context_size} context + {target_size} target from {total} points"
            )
        order = np.arange(total) if rng is None else rng.permutation(total)
        c = order[:context_size]
        t = order[context_size:context_size + target_size]
        x, y = self.all_x, self.all_y
        return replace(self, context_x=x[c], context_y=y[c], target_x=x[t], target_y=y[t])


# ---------------------------------------------------------------------------
# cosine family: x = cos(a y + b) + noise with y ~ U(0, 1)

COSINE_VARIANTS = {
    "standard": ((8.0, 12.0), (0.0, math.pi)),
    "hard": ((4.0, 14.0), (-math.pi, math.pi)),
}


@dataclass(frozen=True)
class CosineTaskParams:
    a: float
    b: float
    sigma: float

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError(f"a must be > 0, got {self.a}")
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


def sample_cosine_params(rng, variant="standard", sigma=0.1):
    try:
        (a_lo, a_hi), (b_lo, b_hi) = COSINE_VARIANTS[variant]
    except KeyError:
        raise ValueError(f"unknown cosine variant {variant!r}") from None
    a = rng.uniform(a_lo, a_hi)
    b = rng.uniform(b_lo, b_hi)
    return CosineTaskParams(float(a), float(b), float(sigma))


def sample_cosine_task(rng, n_points, params, context_size=None, kind="cosine"):
    """Draw ``n_points`` pairs from the cosine task with fixed ``params``."""
    if n_points < 2:
        raise ValueError(f"n_points must be >= 2, got {n_points}")
    y = rng.uniform(0.0, 1.0, size=n_points)
    x = np.cos(params.a * y + params.b)
    if params.sigma > 0:
        x = x + params.sigma * rng.standard_normal(n_points)
    c = n_points if context_size is None else int(context_size)
    return TaskDataset(x[:c], y[:c], x[c:], y[c:], kind=kind, params=params)


def gen_cosine_task(rng, n_points, variant="standard", sigma=0.1, context_size=None):
    """Random cosine task; returns ``(task, params)``.

    The first ``context_size`` points form the context (all of them if None),
    the rest the target set.
    """
    params = sample_cosine_params(rng, variant, sigma)
    kind = "cosine" if variant == "standard" else "cosine-hard"
    return sample_cosine_task(rng, n_points, params, context_size, kind), params


def cosine_true_conditional(params, x_star, grid):
    """Ground-truth ``p(y | x*)`` on an evenly spaced ``grid`` inside ``[0, 1]``.

    Normalized so that ``sum(density) * spacing == 1``.
    """
    if params.sigma <= 0:
        raise DegenerateParameterError("sigma = 0 gives point masses, not a density")
    grid = np.asarray(grid, dtype=np.float64)
    if grid.min() < 0.0 or grid.max() > 1.0:
        raise ValueError("grid must lie inside [0, 1]")
    spacing = grid[1] - grid[0] if grid.size > 1 else 1.0
    resid = (x_star - np.cos(params.a * grid + params.b)) / params.sigma
    logp = -0.5 * resid * resid
    logp = logp - logsumexp(logp) - np.log(spacing)
    return np.exp(logp)


# ---------------------------------------------------------------------------
# two-branch Gaussian process family


@dataclass(frozen=True)
class GPTaskParams:
    offset: float
    lengthscale: float = 1.0
    jitter: float = 1e-8


def _rbf_gram(x, lengthscale):
    d = x[:, None] - x[None, :]
    return np.exp(-0.5 * (d / lengthscale) ** 2)


def sample_gp_branches(rng, x, offset, lengthscale=1.0):
    """Two independent GP draws at ``x``; the second is shifted by ``offset``.

    Returns ``(branches, jitter)`` with ``branches`` of shape ``(2, len(x))``.
    The diagonal jitter starts at 1e-8 and grows tenfold up to 1e-4.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    gram = _rbf_gram(x, lengthscale)
    jitter = 1e-8
    while True:
        try:
            chol = cholesky(gram + jitter * np.eye(n))
            break
        except DefinitenessError:
            jitter *= 10.0
            if jitter > 1e-4 * (1 + 1e-9):
                raise
    f = (chol @ rng.standard_normal((n, 2))).T
    f[1] += offset
    return f, jitter


def gen_gp_task(rng, n_points=130, context_size=None, lengthscale=1.0):
    """Bimodal task from two GP draws, one shifted by ``u ~ U(1, 3)``.

    Each point takes its response from either branch with probability 1/2.
    """
    if n_points < 2:
        raise ValueError(f"n_points must be >= 2, got {n_points}")
    x = rng.uniform(-3.0, 3.0, size=n_points)
    u = float(rng.uniform(1.0, 3.0))
    f, jitter = sample_gp_branches(rng, x, u, lengthscale)
    branch = rng.random(n_points) < 0.5
    y = np.where(branch, f[1], f[0])
    c = n_points if context_size is None else int(context_size)
    params = GPTaskParams(u, lengthscale, jitter)
    return TaskDataset(x[:c], y[:c], x[c:], y[c:], kind="gp", params=params)


# ---------------------------------------------------------------------------
# CSV


def task_column_names(dim, prefix):
    return [prefix] if dim == 1 else [f"{prefix}{i}" for i in range(dim)]


def load_csv(path, x_cols, y_cols, task_col=None):
    """Read tasks from a headed CSV file; one task per ``task_col`` value.

    Every point is placed in the context set.  Row numbers in errors count
    data rows from 1 (the header is not counted).
    """
    x_cols, y_cols = list(x_cols), list(y_cols)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: missing header row") from None
        wanted = x_cols + y_cols + ([task_col] if task_col is not None else [])
        missing = [c for c in wanted if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {missing}; header is {header}")
        xi = [header.index(c) for c in x_cols]
        yi = [header.index(c) for c in y_cols]
        ti = header.index(task_col) if task_col is not None else None

        groups = {}
        for row_no, row in enumerate(reader, start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < len(header):
                raise SchemaError(f"{path}: row {row_no} has {len(row)} cells, expected {len(header)}")
            values = []
            for col, idx in zip(x_cols + y_cols, xi + yi):
                cell = row[idx].strip()
                try:
                    v = float(cell)
                except ValueError:
                    raise CsvParseError(row_no, col, cell, path) from None
                if not math.isfinite(v):
                    raise CsvParseError(row_no, col, cell, path)
                values.append(v)
            key = row[ti].strip() if ti is not None else None
            groups.setdefault(key, []).append(values)

    tasks = []
    nx = len(x_cols)
    for rows in groups.values():
        arr = np.asarray(rows, dtype=np.float64)
        tasks.append(TaskDataset(arr[:, :nx], arr[:, nx:], kind="csv"))
    return tasks


def write_task_csv(task, path):
    """Write every point of ``task`` (context then target) in the ``load_csv`` schema."""
    dx, dy = task.dims
    header = task_column_names(dx, "x") + task_column_names(dy, "y")
    data = np.concatenate([task.all_x, task.all_y], axis=1)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in data:
            writer.writerow([repr(float(v)) for v in row])
    return header
