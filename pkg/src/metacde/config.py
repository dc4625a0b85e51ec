"""Sectioned key-value run configuration.

Files use INI syntax with the sections ``model``, ``train``, ``data`` and
``eval``.  Every key has a default (see :data:`DEFAULTS`); keys not listed
there are rejected.  Values are typed after the default they override.

Example::

    [model]
    reg_lambda = 0.1
    feature_dim = 32

    [train]
    steps = 2000
"""

import configparser
import copy
import hashlib

__all__ = ["ConfigError", "DEFAULTS", "Config", "load_config", "parse_floats"]


class ConfigError(ValueError):
    """Invalid configuration; ``key`` is ``section.name`` of the offending entry."""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")


DEFAULTS = {
    "model": {
        "kind": "metacde",          # metacde | metann
        "feature_dim": 32,
        "hidden": 64,
        "depth": 3,
        "reg_lambda": 0.1,
        "kappa": 10,
        "bandwidth": "silverman",   # or a positive number
    },
    "train": {
        "steps": 1000,
        "tasks_per_step": 16,
        "learning_rate": 1e-3,
        "context_size": 50,
        "target_size": 80,
        "seed": 0,
        "num_tasks": 0,             # 0 streams fresh tasks every step
        "checkpoint_every": 500,
        "cv_lambdas": "1.0,0.1,0.01",
        "cv_hidden": "32,64",
        "cv_steps": 200,
        "cv_tasks": 10,
    },
    "data": {
        "source": "cosine",         # cosine | cosine-hard | gp | csv
        "sigma": 0.1,
        "task_points": 130,
        "csv_path": "",
        "x_cols": "x",
        "y_cols": "y",
        "task_col": "",
    },
    "eval": {
        "grid_size": 100,
        "test_tasks": 30,
        "context_sizes": "15,30,50",
        "seed": 12345,
        "baselines": "e-KDE,marginal-KDE",
    },
}

SOURCES = ("cosine", "cosine-hard", "gp", "csv")


def parse_floats(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


def _coerce(key, default, raw):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


class Config:
    """Effective configuration: defaults overlaid with file values."""

    def __init__(self, values=None):
        self.values = copy.deepcopy(DEFAULTS)
        for section, items in (values or {}).items():
            for key, value in items.items():
                self.set(section, key, value)
        self.validate()

    def set(self, section, key, value):
        name = f"{section}.{key}"
        if section not in DEFAULTS:
            raise ConfigError(name, f"unknown section {section!r}")
        if key not in DEFAULTS[section]:
            raise ConfigError(name, "unknown key")
        default = DEFAULTS[section][key]
        if isinstance(value, str):
            value = _coerce(name, default, value)
        self.values[section][key] = value

    def __getitem__(self, section):
        return self.values[section]

    def validate(self):
        m, t, d, e = self["model"], self["train"], self["data"], self["eval"]
        if m["kind"] not in ("metacde", "metann"):
            raise ConfigError("model.kind", f"expected metacde or metann, got {m['kind']!r}")
        for key in ("feature_dim", "hidden", "depth", "kappa"):
            if m[key] < 1:
                raise ConfigError(f"model.{key}", "must be >= 1")
        if not m["reg_lambda"] > 0:
            raise ConfigError("model.reg_lambda", "must be > 0")
        self.bandwidth()
        for key in ("steps", "tasks_per_step", "context_size", "target_size",
                    "checkpoint_every", "cv_steps", "cv_tasks"):
            if t[key] < 1:
                raise ConfigError(f"train.{key}", "must be >= 1")
        if t["learning_rate"] < 0:
            raise ConfigError("train.learning_rate", "must be >= 0")
        if t["num_tasks"] < 0:
            raise ConfigError("train.num_tasks", "must be >= 0")
        for key in ("cv_lambdas", "cv_hidden"):
            try:
                vals = parse_floats(t[key])
            except ValueError:
                raise ConfigError(f"train.{key}", "expected comma-separated numbers") from None
            if not vals or min(vals) <= 0:
                raise ConfigError(f"train.{key}", "needs positive values")
        if d["source"] not in SOURCES:
            raise ConfigError("data.source", f"expected one of {SOURCES}")
        if d["source"] == "csv" and not d["csv_path"]:
            raise ConfigError("data.csv_path", "required when data.source = csv")
        if d["sigma"] < 0:
            raise ConfigError("data.sigma", "must be >= 0")
        if d["source"] != "csv" and d["task_points"] < t["context_size"] + t["target_size"]:
            raise ConfigError("data.task_points", "smaller than context_size + target_size")
        if e["grid_size"] < 2:
            raise ConfigError("eval.grid_size", "must be >= 2")
        if e["test_tasks"] < 1:
            raise ConfigError("eval.test_tasks", "must be >= 1")
        try:
            sizes = self.context_sizes()
        except ValueError:
            raise ConfigError("eval.context_sizes", "expected comma-separated integers") from None
        if not sizes or min(sizes) < 1:
            raise ConfigError("eval.context_sizes", "needs positive sizes")

    def bandwidth(self):
        """``None`` for Silverman's rule, else the fixed bandwidth."""
        raw = self["model"]["bandwidth"]
        if str(raw).strip().lower() == "silverman":
            return None
        try:
            h = float(raw)
        except ValueError:
            raise ConfigError("model.bandwidth", f"expected 'silverman' or a number, got {raw!r}") from None
        if not h > 0:
            raise ConfigError("model.bandwidth", "must be > 0")
        return h

    def context_sizes(self):
        return [int(v) for v in str(self["eval"]["context_sizes"]).split(",") if v.strip()]

    def to_text(self):
        """Canonical INI rendering (sections and keys in default order)."""
        lines = []
        for section, items in DEFAULTS.items():
            lines.append(f"[{section}]")
            for key in items:
                lines.append(f"{key} = {self.values[section][key]}")
            lines.append("")
        return "\n".join(lines)

    def digest(self):
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]

    def flat(self):
        return {f"{s}.{k}": v for s, items in self.values.items() for k, v in items.items()}


def load_config(path=None):
    """Read ``path`` (or defaults only when None) into a validated :class:`Config`."""
    if path is None:
        return Config()
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError("file", str(exc)) from None
    return Config({s: dict(parser.items(s)) for s in parser.sections()})
