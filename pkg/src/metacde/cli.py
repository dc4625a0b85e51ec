"""Command-line entry points: ``gen``, ``train``, ``eval`` and ``density``.

Exit codes are 0 on success, 2 for usage, configuration and I/O problems and
3 when training hits a non-finite loss.
"""

import argparse
import csv
import itertools
import json
import logging
import os
import sys

import numpy as np

from . import checkpoint as ckpt
from .config import ConfigError, load_config, parse_floats
from .datasets import DataError, gen_cosine_task, gen_gp_task, load_csv, write_task_csv
from .evaluation import EpsilonKDE, GaussianRegression, MarginalKDE, ModelMethod, run_benchmark
from .metalearn import (
    Grid,
    MetaModel,
    MetaNNModel,
    NumericalError,
    TrainConfig,
    heldout_loglik,
    make_grid,
    predict_densities,
    train,
)

logger = logging.getLogger("metacde")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

BASELINES = {"e-KDE": EpsilonKDE, "marginal-KDE": MarginalKDE, "gaussian": GaussianRegression}
GEN_VARIANTS = {"standard": "cosine", "hard": "cosine-hard", "gp": "gp"}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def generate_task(source, rng, n_points, sigma=0.1, context_size=None):
    if source == "cosine":
        return gen_cosine_task(rng, n_points, "standard", sigma, context_size)[0]
    if source == "cosine-hard":
        return gen_cosine_task(rng, n_points, "hard", sigma, context_size)[0]
    if source == "gp":
        return gen_gp_task(rng, n_points, context_size)
    raise UsageError(f"cannot generate tasks from source {source!r}")


def _csv_columns(cfg):
    d = cfg["data"]
    xs = [c.strip() for c in d["x_cols"].split(",") if c.strip()]
    ys = [c.strip() for c in d["y_cols"].split(",") if c.strip()]
    return xs, ys, (d["task_col"] or None)


def training_tasks(cfg, seed):
    """A list of tasks (sampled per step) or an endless stream of fresh ones."""
    d = cfg["data"]
    if d["source"] == "csv":
        xs, ys, tc = _csv_columns(cfg)
        return load_csv(d["csv_path"], xs, ys, tc)
    r = np.random.default_rng(seed)
    n = cfg["train"]["num_tasks"]
    if n > 0:
        return [generate_task(d["source"], r, d["task_points"], d["sigma"]) for _ in range(n)]

    def stream():
        while True:
            yield generate_task(d["source"], r, d["task_points"], d["sigma"])

    return stream()


def build_model(cfg, rng, dims=(1, 1), reg_lambda=None, hidden=None):
    m = cfg["model"]
    kw = dict(dim_x=dims[0], dim_y=dims[1], feature_dim=m["feature_dim"],
              hidden=hidden or m["hidden"], depth=m["depth"], kappa=m["kappa"],
              bandwidth=cfg.bandwidth())
    if m["kind"] == "metann":
        return MetaNNModel.init(rng, **kw)
    return MetaModel.init(rng, reg_lambda=reg_lambda or m["reg_lambda"], **kw)


def train_config(cfg, steps=None):
    t = cfg["train"]
    return TrainConfig(
        steps=steps or t["steps"], tasks_per_step=t["tasks_per_step"],
        context_size=t["context_size"], target_size=t["target_size"],
        learning_rate=t["learning_rate"], seed=t["seed"],
        num_tasks=t["num_tasks"] or None,
        cv_grid={"reg_lambda": parse_floats(t["cv_lambdas"]),
                 "hidden": [int(h) for h in parse_floats(t["cv_hidden"])]},
    )


def _write_rows(path, header, rows, comments=()):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _make_outdir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {path}: {exc}") from None
    if not os.access(path, os.W_OK):
        raise UsageError(f"output directory {path} is not writable")


def _load_checkpoint(path):
    if not os.path.isfile(path):
        raise UsageError(f"checkpoint {path} not found")
    return ckpt.load(path)


# ---------------------------------------------------------------------------
# gen


def cmd_gen(args):
    if args.variant not in GEN_VARIANTS:
        raise UsageError(f"unknown variant {args.variant!r}")
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    _make_outdir(args.out)
    source = GEN_VARIANTS[args.variant]
    for i in range(args.count):
        seed = args.seed + i
        task = generate_task(source, np.random.default_rng(seed), args.n_points, args.sigma,
                             args.context_size)
        base = os.path.join(args.out, f"task_{i}")
        write_task_csv(task, base + ".csv")
        p = task.params
        side = {"variant": args.variant, "seed": seed, "n_points": args.n_points,
                "context_size": task.n_context}
        if source == "gp":
            side.update(u=p.offset, lengthscale=p.lengthscale, jitter=p.jitter)
        else:
            side.update(a=p.a, b=p.b, sigma=p.sigma)
        with open(base + ".json", "w", encoding="utf-8") as fh:
            json.dump(side, fh, indent=2, sort_keys=True)
            fh.write("\n")
    print(f"wrote {args.count} tasks to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _validation_score(model, tasks, cfg):
    t = cfg["train"]
    total = 0.0
    for task in tasks:
        s = task.split(t["context_size"], min(t["target_size"], len(task) - t["context_size"]))
        g = make_grid(s.all_y, size=cfg["eval"]["grid_size"])
        total += heldout_loglik(model, s.context_x, s.context_y, s.target_x, s.target_y, g)
    return total / len(tasks)


def cross_validate(cfg, dims, out):
    """Short training runs over the (lambda, hidden) grid scored on held-out tasks."""
    t, d = cfg["train"], cfg["data"]
    if d["source"] == "csv":
        pool = training_tasks(cfg, t["seed"])
        k = min(t["cv_tasks"], len(pool) // 2)
        if k < 1:
            raise UsageError("too few CSV tasks for a held-out CV split")
        fit_tasks, val_tasks = pool[:-k], pool[-k:]
    else:
        r = np.random.default_rng(t["seed"] + 1_000_003)
        val_tasks = [generate_task(d["source"], r, d["task_points"], d["sigma"])
                     for _ in range(t["cv_tasks"])]
        fit_tasks = None
    lambdas = parse_floats(t["cv_lambdas"]) if cfg["model"]["kind"] == "metacde" else [None]
    hiddens = [int(h) for h in parse_floats(t["cv_hidden"])]
    results = []
    for lam, hid in itertools.product(lambdas, hiddens):
        rng = np.random.default_rng(t["seed"])
        model = build_model(cfg, rng, dims, lam, hid)
        tasks = fit_tasks if fit_tasks is not None else training_tasks(cfg, t["seed"] + 1)
        train(tasks, train_config(cfg, t["cv_steps"]), model, rng)
        score = _validation_score(model, val_tasks, cfg)
        logger.info("cv reg_lambda=%s hidden=%d: %.4f", lam, hid, score)
        results.append((lam, hid, score))
    best = max(results, key=lambda r: r[2])
    rows = [["" if lam is None else lam, hid, repr(score), int((lam, hid, score) == best)]
            for lam, hid, score in results]
    _write_rows(os.path.join(out, "cv_report.csv"),
                ["reg_lambda", "hidden", "val_loglik", "selected"], rows,
                comments=[f"config_hash={cfg.digest()}"])
    return best


def cmd_train(args):
    cfg = load_config(args.config)
    if args.steps is not None:
        if args.steps < 1:
            raise UsageError("--steps must be >= 1")
        cfg.set("train", "steps", args.steps)
    _make_outdir(args.out)
    with open(os.path.join(args.out, "config.ini"), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_text())
    t = cfg["train"]
    tasks = training_tasks(cfg, t["seed"] + 1)
    dims = (1, 1)
    if cfg["data"]["source"] == "csv":
        if not tasks:
            raise UsageError(f"no tasks in {cfg['data']['csv_path']}")
        dims = tasks[0].dims

    lam, hid = None, None
    if args.cv:
        lam, hid, score = cross_validate(cfg, dims, args.out)
        if lam is not None:
            cfg.set("model", "reg_lambda", lam)
        cfg.set("model", "hidden", hid)
        print(f"cv selected reg_lambda={lam if lam is not None else 'n/a'} hidden={hid} "
              f"(validation loglik {score:.3f})")
        with open(os.path.join(args.out, "config.ini"), "w", encoding="utf-8") as fh:
            fh.write(cfg.to_text())

    rng = np.random.default_rng(t["seed"])
    model = build_model(cfg, rng, dims)
    digest = cfg.digest()
    every = t["checkpoint_every"]
    trace = []

    def on_step(step, loss, m):
        trace.append(loss)
        if (step + 1) % every == 0 and step + 1 < cfg["train"]["steps"]:
            ckpt.save(m, os.path.join(args.out, f"checkpoint_{step + 1:06d}.ckpt"), digest, step + 1)
            logger.info("step %d: loss %.4f", step + 1, loss)

    try:
        train(tasks, train_config(cfg), model, rng, callback=on_step)
        code = EXIT_OK
    except NumericalError as exc:
        print(f"error: non-finite training loss at step {exc.step}", file=sys.stderr)
        code = EXIT_NUMERIC
    _write_rows(os.path.join(args.out, "loss_trace.csv"), ["step", "mean_loss"],
                [[i + 1, repr(v)] for i, v in enumerate(trace)],
                comments=[f"config_hash={digest}"])
    if code == EXIT_OK:
        path = ckpt.save(model, os.path.join(args.out, "model.ckpt"), digest, len(trace))
        print(f"trained {len(trace)} steps; checkpoint {path}")
    return code


# ---------------------------------------------------------------------------
# eval


def _eval_tasks(cfg, files, k_max):
    if files:
        xs, ys, tc = _csv_columns(cfg)
        tasks = []
        for f in files:
            for task in load_csv(f, xs, ys, tc):
                if len(task) <= k_max:
                    raise UsageError(f"{f}: task has {len(task)} points; need more than {k_max}")
                tasks.append(task.split(k_max))
        return tasks
    d, e = cfg["data"], cfg["eval"]
    if d["source"] == "csv":
        raise UsageError("eval needs --tasks when data.source = csv")
    if d["task_points"] <= k_max:
        raise UsageError("data.task_points must exceed the largest context size")
    r = np.random.default_rng(e["seed"])
    return [generate_task(d["source"], r, d["task_points"], d["sigma"], k_max)
            for _ in range(e["test_tasks"])]


def cmd_eval(args):
    model, prov = _load_checkpoint(args.checkpoint)
    cfg = load_config(args.config)
    if args.config is not None:
        # the configured architecture must agree with the checkpoint
        dims = (model.dim_x, model.phi_y.in_dim) if model.kind == "metann" else (
            model.phi_x.in_dim, model.phi_y.in_dim)
        ckpt.load_into(build_model(cfg, np.random.default_rng(0), dims),
                       ckpt.dumps(model))
    sizes = ([int(s) for s in args.context_sizes.split(",")] if args.context_sizes
             else cfg.context_sizes())
    tasks = _eval_tasks(cfg, args.tasks, max(sizes))
    names = [b.strip() for b in cfg["eval"]["baselines"].split(",") if b.strip()]
    unknown = [b for b in names if b not in BASELINES]
    if unknown:
        raise ConfigError("eval.baselines", f"unknown baseline(s) {unknown}")
    methods = [ModelMethod(model)] + [BASELINES[b]() for b in names]
    base_echo = {"sigma": cfg["data"]["sigma"], "d": model.feature_dim, "kappa": model.kappa,
                 "reg_lambda": getattr(model, "reg_lambda", "n/a"),
                 "budget_steps": prov["trained_steps"], "train_config_hash": prov["config_hash"],
                 "n_tasks": len(tasks)}
    _make_outdir(args.out)
    sections = []
    for k in sizes:
        echo = dict(base_echo, context_size=k)
        report = run_benchmark(methods, tasks, context_size=k,
                               grid_size=cfg["eval"]["grid_size"], config=echo)
        report.to_csv(os.path.join(args.out, f"report_ctx{k}.csv"))
        sections.append(f"== context size {k} ==\n{report.summary()}")
    text = "\n\n".join(sections) + "\n"
    with open(os.path.join(args.out, "summary.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# density


def cmd_density(args):
    model, prov = _load_checkpoint(args.checkpoint)
    xs = [c.strip() for c in args.x_cols.split(",")]
    ys = [c.strip() for c in args.y_cols.split(",")]
    tasks = load_csv(args.context, xs, ys)
    if not tasks or tasks[0].n_context == 0:
        raise UsageError(f"{args.context}: no context points")
    task = tasks[0]
    if args.grid:
        lo, hi = parse_floats(args.grid)
        grid = Grid(lo, hi, args.grid_size)
    else:
        grid = make_grid(task.context_y, size=args.grid_size)
    x_stars = np.array(args.x, dtype=np.float64)
    ests = predict_densities(model, task.context_x, task.context_y, x_stars, grid)
    _make_outdir(args.out)
    for i, est in enumerate(ests):
        rows = [[repr(float(y)), repr(float(ld)), repr(float(np.exp(ld)))]
                for y, ld in zip(est.grid, est.log_density)]
        _write_rows(os.path.join(args.out, f"density_{i}.csv"), ["y", "log_density", "density"],
                    rows, comments=[f"x_star={est.x_star!r}",
                                    f"log_normalizer={est.raw_log_normalizer!r}",
                                    f"grid_spacing={est.spacing!r}",
                                    f"config_hash={prov['config_hash']}"])
    print(f"wrote {len(ests)} density files to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="metacde", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write synthetic task CSVs with parameter sidecars")
    g.add_argument("--variant", default="standard", help="standard | hard | gp")
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-points", type=int, default=130)
    g.add_argument("--context-size", type=int, default=None)
    g.add_argument("--sigma", type=float, default=0.1)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="meta-train a model and write checkpoints")
    t.add_argument("--config", default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--cv", action="store_true", help="select lambda and width on held-out tasks")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="held-out log-likelihood benchmark")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--config", default=None)
    e.add_argument("--tasks", nargs="*", default=None, help="task CSV files")
    e.add_argument("--context-sizes", default=None, help="e.g. 15,30,50")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("density", help="export grid densities for query inputs")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--context", required=True, help="context CSV")
    d.add_argument("--x", type=float, action="append", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--x-cols", default="x")
    d.add_argument("--y-cols", default="y")
    d.add_argument("--grid", default=None, help="low,high")
    d.add_argument("--grid-size", type=int, default=100)
    d.set_defaults(func=cmd_density)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ckpt.CheckpointError, DataError, UsageError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
