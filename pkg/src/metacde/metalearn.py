"""Meta-learned conditional density model, its contrastive training loop and
grid-based density prediction.

A task's context set is summarized by an embedding ``mu(x)`` for every query
input.  The model density is ``p(y | x) = exp(<mu(x), phi_y(y)> + b(mu(x)))``.
Two task encoders are provided:

* :class:`MetaModel` - the conditional mean embedding operator of the context
  set in learned feature spaces;
* :class:`MetaNNModel` - a DeepSets ablation that mean-pools encoded
  ``(x_i, y_i)`` pairs and decodes them together with the query ``x``.

Both are trained by :func:`train` with the same logistic (noise contrastive)
objective.
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import autodiff as ad
from .cme import CMEOperator, as_points
from .datasets import DataError, TaskDataset
from .nce import FakeSampler, kde_logpdf, kde_sample, nce_loss
from .nn import AdamState, Mlp, adam_step, mlp_forward, mlp_init

__all__ = [
    "NumericalError",
    "BoundParams",
    "MetaModel",
    "MetaNNModel",
    "metann_encode",
    "TrainConfig",
    "TrainItem",
    "prepare_item",
    "batch_loss",
    "train",
    "Grid",
    "make_grid",
    "DensityEstimate",
    "post_normalize",
    "predict_density",
    "predict_densities",
    "interpolate_loglik",
    "heldout_logliks",
    "heldout_loglik",
    "count_local_maxima",
]

logger = logging.getLogger(__name__)


class NumericalError(ArithmeticError):
    """Training produced a non-finite loss; ``step`` is the failing step index."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")


class BoundParams:
    """Parameters of each network registered as leaves on one tape."""

    def __init__(self, model, tape):
        self.tape = tape
        self.leaves = {}
        for name, net in model.networks().items():
            self.leaves[name] = net.bind(tape)

    def __getattr__(self, name):
        try:
            return self.__dict__["leaves"][name]
        except KeyError:
            raise AttributeError(name) from None

    def gradients(self, grads, model):
        return [grads[t] for name in model.networks() for t in self.leaves[name]]


class _Model:
    """Shared parameter bookkeeping and density evaluation."""

    kind = None

    def networks(self):
        raise NotImplementedError

    def embed_batch(self, contexts, queries, params=None):
        raise NotImplementedError

    def parameters(self):
        return [p for net in self.networks().values() for p in net.parameters()]

    def parameter_names(self):
        return [
            n for name, net in self.networks().items() for n in net.parameter_names(name + ".")
        ]

    def set_parameters(self, arrays):
        arrays = list(arrays)
        for net in self.networks().values():
            k = len(net.parameters())
            net.set_parameters(arrays[:k])
            arrays = arrays[k:]

    def bind(self, tape):
        return BoundParams(self, tape)

    def embed(self, context_x, context_y, x_query):
        """Embeddings ``(d, m)`` of query inputs ``x_query`` given one context set."""
        return self.embed_batch([(context_x, context_y)], [as_points(x_query)]).data

    def log_normalizer_net(self, mu, params=None):
        """``b(mu)`` for embedding columns ``mu``; returns shape ``(m,)``."""
        b = mlp_forward(self.b_net, mu, params.b_net if params is not None else None)
        return ad.reshape(b, (b.shape[1],))

    def unnormalized_log_density(self, context_x, context_y, x_query, y_values):
        """``s(x, y) + b(x)`` for every query input (rows) and response (columns)."""
        mu = self.embed_batch([(context_x, context_y)], [as_points(x_query)])
        phi = mlp_forward(self.phi_y, ad.Tensor(as_points(y_values).T)).data
        b = self.log_normalizer_net(mu).data
        return mu.data.T @ phi + b[:, None]


@dataclass
class MetaModel(_Model):
    """Feature maps ``phi_x``, ``phi_y`` and normalization network ``b_net``."""

    phi_x: Mlp
    phi_y: Mlp
    b_net: Mlp
    reg_lambda: float = 0.1
    kappa: int = 10
    bandwidth: float = None
    kind = "metacde"

    def __post_init__(self):
        d = self.phi_x.out_dim
        if self.phi_y.out_dim != d or self.b_net.in_dim != d or self.b_net.out_dim != 1:
            raise ad.DimensionError(
                f"feature dims disagree: phi_x->{d}, phi_y->{self.phi_y.out_dim}, "
                f"b_net {self.b_net.in_dim}->{self.b_net.out_dim}"
            )
        if not self.reg_lambda > 0:
            raise ValueError("reg_lambda must be > 0")

    @classmethod
    def init(cls, rng, dim_x=1, dim_y=1, feature_dim=32, hidden=64, depth=3,
             reg_lambda=0.1, kappa=10, bandwidth=None):
        hid = [hidden] * depth
        return cls(
            mlp_init([dim_x, *hid, feature_dim], rng),
            mlp_init([dim_y, *hid, feature_dim], rng),
            mlp_init([feature_dim, *hid, 1], rng),
            reg_lambda, kappa, bandwidth,
        )

    @property
    def feature_dim(self):
        return self.phi_x.out_dim

    def networks(self):
        return {"phi_x": self.phi_x, "phi_y": self.phi_y, "b_net": self.b_net}

    def copy(self):
        return MetaModel(self.phi_x.copy(), self.phi_y.copy(), self.b_net.copy(),
                         self.reg_lambda, self.kappa, self.bandwidth)

    def embed_batch(self, contexts, queries, params=None):
        """Embeddings of each task's queries, concatenated column-wise.

        One feature pass covers every task; each task then gets its own
        operator (one factorization) shared by all of its queries.
        """
        px = params.phi_x if params is not None else None
        py = params.phi_y if params is not None else None
        xs = [as_points(c[0]) for c in contexts]
        qs = [as_points(q) for q in queries]
        ys = [as_points(c[1]) for c in contexts]
        phx = mlp_forward(self.phi_x, ad.Tensor(np.concatenate(xs + qs).T), px)
        phy = mlp_forward(self.phi_y, ad.Tensor(np.concatenate(ys).T), py)
        out = []
        cx_off, q_off = 0, sum(len(x) for x in xs)
        for x, q in zip(xs, qs):
            op = CMEOperator(
                ad.columns(phx, cx_off, cx_off + len(x)),
                ad.columns(phy, cx_off, cx_off + len(x)),
                self.reg_lambda,
            )
            out.append(op.embed_features(ad.columns(phx, q_off, q_off + len(q))))
            cx_off += len(x)
            q_off += len(q)
        return out[0] if len(out) == 1 else ad.concat(out, axis=1)


@dataclass
class MetaNNModel(_Model):
    """DeepSets task encoder in place of the embedding operator."""

    encoder: Mlp
    decoder: Mlp
    phi_y: Mlp
    b_net: Mlp
    kappa: int = 10
    bandwidth: float = None
    kind = "metann"

    def __post_init__(self):
        d = self.phi_y.out_dim
        if self.decoder.out_dim != d or self.b_net.in_dim != d:
            raise ad.DimensionError("decoder, phi_y and b_net dimensions disagree")
        if self.decoder.in_dim != self.encoder.out_dim + self.dim_x:
            raise ad.DimensionError("decoder input must be encoder output + dim_x")

    @property
    def dim_x(self):
        return self.encoder.in_dim - self.phi_y.in_dim

    @classmethod
    def init(cls, rng, dim_x=1, dim_y=1, feature_dim=32, hidden=64, depth=3,
             repr_dim=None, kappa=10, bandwidth=None):
        r = feature_dim if repr_dim is None else repr_dim
        hid = [hidden] * depth
        return cls(
            mlp_init([dim_x + dim_y, *hid, r], rng),
            mlp_init([r + dim_x, *hid, feature_dim], rng),
            mlp_init([dim_y, *hid, feature_dim], rng),
            mlp_init([feature_dim, *hid, 1], rng),
            kappa, bandwidth,
        )

    @property
    def feature_dim(self):
        return self.phi_y.out_dim

    def networks(self):
        return {"encoder": self.encoder, "decoder": self.decoder,
                "phi_y": self.phi_y, "b_net": self.b_net}

    def copy(self):
        return MetaNNModel(self.encoder.copy(), self.decoder.copy(), self.phi_y.copy(),
                           self.b_net.copy(), self.kappa, self.bandwidth)

    def embed_batch(self, contexts, queries, params=None):
        pe = params.encoder if params is not None else None
        pd = params.decoder if params is not None else None
        pairs = [np.concatenate([as_points(cx), as_points(cy)], axis=1) for cx, cy in contexts]
        qs = [as_points(q) for q in queries]
        enc = mlp_forward(self.encoder, ad.Tensor(np.concatenate(pairs).T), pe)
        stacked = []
        off = 0
        for p, q in zip(pairs, qs):
            pooled = ad.reduce_mean(ad.columns(enc, off, off + len(p)), axis=1)
            rep = ad.repeat_columns(ad.reshape(pooled, (-1, 1)), len(q))
            stacked.append(ad.concat([rep, ad.Tensor(q.T)], axis=0))
            off += len(p)
        joint = stacked[0] if len(stacked) == 1 else ad.concat(stacked, axis=1)
        return mlp_forward(self.decoder, joint, pd)


def metann_encode(context_x, context_y, x_star, model, params=None):
    """DeepSets representation of a context set queried at ``x_star``.

    Returns shape ``(d,)`` for one query point and ``(d, m)`` for several.
    """
    cx = as_points(context_x)
    if cx.shape[0] == 0:
        raise DataError("context set is empty")
    xs = np.asarray(x_star, dtype=np.float64)
    single = xs.ndim == 0 or (xs.ndim == 1 and model.dim_x > 1)
    q = xs.reshape(1, -1) if single else as_points(xs)
    if q.shape[1] != model.dim_x or cx.shape[1] != model.dim_x:
        raise ad.DimensionError(f"expected inputs of dimension {model.dim_x}")
    mu = model.embed_batch([(cx, context_y)], [q], params)
    return ad.reshape(mu, (mu.shape[0],)) if single else mu


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    steps: int = 1000
    tasks_per_step: int = 16
    context_size: int = 50
    target_size: int = 80
    learning_rate: float = 1e-3
    seed: int = 0
    num_tasks: int = None
    cv_grid: dict = field(default_factory=lambda: {
        "reg_lambda": [1.0, 0.1, 0.01], "hidden": [32, 64], "bandwidth": [None],
    })

    def __post_init__(self):
        for name in ("steps", "tasks_per_step", "context_size", "target_size"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")


@dataclass
class TrainItem:
    """One task prepared for a training step: split, fakes and noise log-densities."""

    context_x: np.ndarray
    context_y: np.ndarray
    target_x: np.ndarray
    target_y: np.ndarray
    fakes: np.ndarray
    log_pf_true: np.ndarray
    log_pf_fake: np.ndarray


def prepare_item(task, context_size, target_size, kappa, bandwidth, rng, index=0):
    """Split ``task``, fit its noise KDE on the pooled responses and draw
    ``kappa`` fakes for every target (ordered target-major)."""
    if len(task) < context_size + target_size:
        raise DataError(
            f"task {index} has {len(task)} points; "
            f"need {context_size} context + {target_size} target"
        )
    t = task.split(context_size, target_size, rng)
    sampler = FakeSampler.fit(np.concatenate([t.context_y, t.target_y]), bandwidth, kappa)
    fakes = kde_sample(sampler, target_size * kappa, rng)
    return TrainItem(
        t.context_x, t.context_y, t.target_x, t.target_y, fakes,
        kde_logpdf(sampler, t.target_y), kde_logpdf(sampler, fakes),
    )


def batch_loss(model, items, params=None):
    """Summed logistic loss of ``items`` (tensor on the tape of ``params``)."""
    kappa = model.kappa
    mu = model.embed_batch([(it.context_x, it.context_y) for it in items],
                           [it.target_x for it in items], params)
    n_true = mu.shape[1]
    ty = np.concatenate([it.target_y for it in items])
    fy = np.concatenate([it.fakes for it in items])
    py = params.phi_y if params is not None else None
    phy = mlp_forward(model.phi_y, ad.Tensor(np.concatenate([ty, fy]).T), py)
    phy_true = ad.columns(phy, 0, n_true)
    phy_fake = ad.columns(phy, n_true, phy.shape[1])

    s_true = ad.reduce_sum(mu * phy_true, axis=0)
    s_fake = ad.reduce_sum(ad.repeat_columns(mu, kappa) * phy_fake, axis=0)
    b = model.log_normalizer_net(mu, params)
    b_fake = ad.reshape(ad.repeat_columns(ad.reshape(b, (1, n_true)), kappa), (n_true * kappa,))

    log_kpf_true = math.log(kappa) + np.concatenate([it.log_pf_true for it in items])
    log_kpf_fake = math.log(kappa) + np.concatenate([it.log_pf_fake for it in items])
    t_true = s_true + b - log_kpf_true
    t_fake = s_fake + b_fake - log_kpf_fake
    return nce_loss(t_true, ad.reshape(t_fake, (n_true, kappa)))


def _task_batches(tasks, per_step, rng):
    if isinstance(tasks, Sequence):
        if len(tasks) == 0:
            raise DataError("no training tasks")
        k = min(per_step, len(tasks))
        while True:
            idx = rng.choice(len(tasks), size=k, replace=False)
            yield [(int(i), tasks[int(i)]) for i in idx]
    it = iter(tasks)
    counter = 0
    while True:
        batch = []
        for _ in range(per_step):
            try:
                batch.append((counter, next(it)))
            except StopIteration:
                break
            counter += 1
        if not batch:
            return
        yield batch


def train(tasks, cfg, model, rng=None, callback=None, adam=None):
    """Meta-train ``model`` in place with one Adam step per task batch.

    ``tasks`` is either a sequence (each step samples ``tasks_per_step``
    distinct tasks from it) or an iterator streaming fresh tasks.  Returns
    ``(model, trace)`` where ``trace`` lists the loss per target point of
    every step.  ``callback(step, loss, model)`` runs after each update.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    if adam is None:
        adam = AdamState.for_params(model.parameters(), learning_rate=cfg.learning_rate)
    trace = []
    batches = _task_batches(tasks, cfg.tasks_per_step, rng)
    for step in range(cfg.steps):
        try:
            batch = next(batches)
        except StopIteration:
            logger.info("task stream exhausted after %d steps", step)
            break
        items = [
            prepare_item(task, cfg.context_size, cfg.target_size, model.kappa,
                         model.bandwidth, rng, index)
            for index, task in batch
        ]
        tape = ad.Tape()
        params = model.bind(tape)
        loss = batch_loss(model, items, params)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericalError(step)
        grads = params.gradients(tape.backward(loss), model)
        model.set_parameters(adam_step(adam, model.parameters(), grads))
        per_point = value / (len(items) * cfg.target_size)
        trace.append(per_point)
        if callback is not None:
            callback(step, per_point, model)
    return model, trace


# ---------------------------------------------------------------------------
# densities on a grid


@dataclass(frozen=True)
class Grid:
    """``size`` cell midpoints evenly covering ``[low, high]``."""

    low: float
    high: float
    size: int = 100

    def __post_init__(self):
        if not self.high > self.low:
            raise ValueError(f"empty grid range [{self.low}, {self.high}]")
        if self.size < 2:
            raise ValueError("grid needs at least 2 points")

    @property
    def spacing(self):
        return (self.high - self.low) / self.size

    @property
    def values(self):
        return self.low + (np.arange(self.size) + 0.5) * self.spacing


def make_grid(y, size=100, pad=0.1):
    """Grid over the range of ``y`` widened by ``pad`` of the range on each side."""
    y = np.asarray(y, dtype=np.float64).ravel()
    lo, hi = float(y.min()), float(y.max())
    width = hi - lo
    if width <= 0:
        width = 1.0
    return Grid(lo - pad * width, hi + pad * width, size)


@dataclass
class DensityEstimate:
    x_star: object
    grid: np.ndarray
    log_density: np.ndarray
    raw_log_normalizer: float
    spacing: float

    @property
    def density(self):
        return np.exp(self.log_density)

    def riemann_sum(self):
        return float(np.sum(self.density) * self.spacing)


def post_normalize(raw_log, spacing):
    """Renormalize log-density values on an even grid to unit Riemann mass.

    Returns ``(normalized, log_normalizer)``; rows are normalized separately
    for 2-D input.
    """
    raw = np.asarray(raw_log, dtype=np.float64)
    log_z = logsumexp(raw, axis=-1) + np.log(spacing)
    if raw.ndim == 1:
        return raw - log_z, float(log_z)
    return raw - log_z[..., None], log_z


def _resolve_grid(grid, context_y):
    if grid is None:
        return make_grid(context_y)
    if isinstance(grid, Grid):
        return grid
    return Grid(*grid)


def predict_densities(model, context_x, context_y, x_stars, grid=None):
    """Post-normalized densities at several query inputs sharing one context."""
    cx, cy = as_points(context_x), as_points(context_y)
    if cx.shape[0] == 0:
        raise DataError("context set is empty")
    if cy.shape[1] != 1:
        raise ValueError("grid densities need one-dimensional responses")
    g = _resolve_grid(grid, cy)
    xs = np.asarray(x_stars, dtype=np.float64)
    q = xs.reshape(-1, cx.shape[1])
    values = g.values
    raw = model.unnormalized_log_density(cx, cy, q, values)
    normed, log_z = post_normalize(raw, g.spacing)
    return [
        DensityEstimate(q[i] if q.shape[1] > 1 else float(q[i, 0]), values, normed[i],
                        float(log_z[i]), g.spacing)
        for i in range(q.shape[0])
    ]


def predict_density(model, context_x, context_y, x_star, grid=None):
    """Post-normalized density of ``y`` given ``x_star`` on a 100-point grid.

    ``grid`` is a :class:`Grid`, a ``(low, high[, size])`` tuple, or None for
    the context response range widened by 10% per side.
    """
    return predict_densities(model, context_x, context_y, [x_star], grid)[0]


def interpolate_loglik(log_density, grid, y):
    """Linear interpolation of grid log-densities at ``y``.

    Returns ``(values, clamped)``; points outside ``[low, high]`` take the
    edge value and are flagged.
    """
    log_density = np.atleast_2d(log_density)
    y = np.asarray(y, dtype=np.float64).ravel()
    vals = np.array([np.interp(yy, grid.values, row) for yy, row in zip(y, log_density)])
    clamped = (y < grid.low) | (y > grid.high)
    return vals, clamped


def heldout_logliks(model, context_x, context_y, target_x, target_y, grid=None):
    """Per-target normalized log-density values and clamp flags."""
    ty = as_points(target_y)
    g = _resolve_grid(grid, as_points(context_y))
    ests = predict_densities(model, context_x, context_y, target_x, g)
    logd = np.stack([e.log_density for e in ests])
    return interpolate_loglik(logd, g, ty[:, 0])


def heldout_loglik(model, context_x, context_y, target_x, target_y, grid=None):
    """Sum of held-out log-likelihoods over the target pairs."""
    vals, _ = heldout_logliks(model, context_x, context_y, target_x, target_y, grid)
    return float(np.sum(vals))


def count_local_maxima(values, rel_height=0.0):
    """Number of strict local maxima of a sampled curve, endpoints included.

    With ``rel_height > 0`` maxima lower than ``rel_height * max(values)`` are
    ignored; this assumes nonnegative values such as densities.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return int(v.size)
    left = np.concatenate([[-np.inf], v[:-1]])
    right = np.concatenate([v[1:], [-np.inf]])
    peaks = (v > left) & (v > right)
    if rel_height > 0:
        peaks &= v >= rel_height * v.max()
    return int(np.sum(peaks))
