"""Plain-text model checkpoints.

Layout::

    METACDE-CKPT 1
    architecture
    kind metacde
    feature_dim 32
    reg_lambda 0.10000000000000001
    kappa 10
    bandwidth silverman
    config_hash 3f1c...
    trained_steps 2000
    net phi_x 1,64,64,64,32
    ...
    parameters
    param phi_x.w0 64,1
    <row-major values, '%.17g', one per line>
    ...
    sha256 <hex digest of every preceding byte>

``save -> load -> save`` reproduces the file byte for byte.
"""

import hashlib
import os

import numpy as np

from .metalearn import MetaModel, MetaNNModel
from .nn import Mlp

__all__ = ["CheckpointError", "MAGIC", "dumps", "loads", "save", "load", "load_into",
           "architecture", "model_from_architecture"]

MAGIC = "METACDE-CKPT 1"


class CheckpointError(ValueError):
    pass


def _fmt(v):
    return "%.17g" % v


_META = ("config_hash", "trained_steps")


def architecture(model, config_hash="", trained_steps=0):
    """Ordered ``(key, value)`` pairs describing everything but the weights.

    ``config_hash`` and ``trained_steps`` are provenance only and are ignored
    when architectures are compared.
    """
    arch = [("kind", model.kind), ("feature_dim", str(model.feature_dim))]
    if model.kind == "metacde":
        arch.append(("reg_lambda", _fmt(model.reg_lambda)))
    arch.append(("kappa", str(model.kappa)))
    arch.append(("bandwidth", "silverman" if model.bandwidth is None else _fmt(model.bandwidth)))
    arch.append(("config_hash", config_hash or "-"))
    arch.append(("trained_steps", str(int(trained_steps))))
    for name, net in model.networks().items():
        arch.append((f"net {name}", ",".join(str(d) for d in net.layer_dims)))
    return arch


def dumps(model, config_hash="", trained_steps=0):
    lines = [MAGIC, "architecture"]
    lines += [f"{k} {v}" for k, v in architecture(model, config_hash, trained_steps)]
    lines.append("parameters")
    for name, arr in zip(model.parameter_names(), model.parameters()):
        lines.append(f"param {name} {','.join(str(s) for s in arr.shape)}")
        lines += [_fmt(v) for v in np.ravel(arr, order="C")]
    body = "\n".join(lines) + "\n"
    digest = hashlib.sha256(body.encode("ascii")).hexdigest()
    return body + f"sha256 {digest}\n"


def _parse(text):
    try:
        return _parse_unchecked(text)
    except ValueError as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"malformed checkpoint: {exc}") from None


def _parse_unchecked(text):
    if not text.endswith("\n"):
        raise CheckpointError("truncated checkpoint (no trailing newline)")
    body, sep, last = text[:-1].rpartition("\n")
    if not sep or not last.startswith("sha256 "):
        raise CheckpointError("missing sha256 line")
    body += "\n"
    if hashlib.sha256(body.encode("ascii")).hexdigest() != last[len("sha256 "):]:
        raise CheckpointError("content hash mismatch")
    lines = body.splitlines()
    if not lines or lines[0] != MAGIC:
        raise CheckpointError(f"bad magic line; expected {MAGIC!r}")
    if len(lines) < 2 or lines[1] != "architecture":
        raise CheckpointError("missing architecture block")
    try:
        split = lines.index("parameters")
    except ValueError:
        raise CheckpointError("missing parameter block") from None
    arch = []
    for line in lines[2:split]:
        key, _, value = line.rpartition(" ")
        arch.append((key, value))
    params = []
    i = split + 1
    while i < len(lines):
        head = lines[i].split(" ")
        if len(head) != 3 or head[0] != "param":
            raise CheckpointError(f"line {i + 1}: expected 'param <name> <shape>'")
        shape = tuple(int(s) for s in head[2].split(","))
        count = int(np.prod(shape))
        values = lines[i + 1:i + 1 + count]
        if len(values) != count:
            raise CheckpointError(f"parameter {head[1]} is truncated")
        arr = np.array([float(v) for v in values], dtype=np.float64).reshape(shape)
        params.append((head[1], arr))
        i += 1 + count
    return arch, params


def _arch_dict(arch):
    return dict(arch)


def _provenance(arch):
    a = _arch_dict(arch)
    return {"config_hash": a.get("config_hash", "-"), "trained_steps": int(a.get("trained_steps", 0))}


def model_from_architecture(arch):
    """Zero-initialized model with the networks described by ``arch``."""
    a = _arch_dict(arch)
    nets = {k[4:]: Mlp.zeros([int(d) for d in v.split(",")]) for k, v in arch if k.startswith("net ")}
    bw = None if a.get("bandwidth") == "silverman" else float(a["bandwidth"])
    kappa = int(a["kappa"])
    try:
        if a["kind"] == "metacde":
            return MetaModel(nets["phi_x"], nets["phi_y"], nets["b_net"],
                             float(a["reg_lambda"]), kappa, bw)
        if a["kind"] == "metann":
            return MetaNNModel(nets["encoder"], nets["decoder"], nets["phi_y"], nets["b_net"],
                               kappa, bw)
    except KeyError as exc:
        raise CheckpointError(f"architecture lacks {exc}") from None
    raise CheckpointError(f"unknown model kind {a['kind']!r}")


def _check_params(model, params):
    names = model.parameter_names()
    if [n for n, _ in params] != names:
        raise CheckpointError("parameter names do not match the architecture")
    for (name, arr), ref in zip(params, model.parameters()):
        if arr.shape != ref.shape:
            raise CheckpointError(f"{name}: shape {arr.shape}, architecture needs {ref.shape}")


def loads(text):
    """Return ``(model, provenance)``; provenance holds ``config_hash`` and
    ``trained_steps``."""
    arch, params = _parse(text)
    model = model_from_architecture(arch)
    _check_params(model, params)
    model.set_parameters([a for _, a in params])
    return model, _provenance(arch)


def load_into(model, text):
    """Copy checkpoint weights into ``model`` after checking that the
    architectures agree; ``model`` is untouched on any mismatch."""
    arch, params = _parse(text)
    theirs = [(k, v) for k, v in arch if k not in _META]
    mine = [(k, v) for k, v in architecture(model) if k not in _META]
    if theirs != mine:
        diff = [k for (k, v), pair in zip(theirs, mine) if (k, v) != pair]
        raise CheckpointError(f"architecture mismatch: {diff or 'different layout'}")
    _check_params(model, params)
    model.set_parameters([a for _, a in params])
    return model


def save(model, path, config_hash="", trained_steps=0):
    text = dumps(model, config_hash, trained_steps)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="ascii", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)
    return path


def load(path):
    try:
        with open(path, encoding="ascii", newline="") as fh:
            text = fh.read()
    except UnicodeDecodeError:
        raise CheckpointError(f"{path}: not a text checkpoint") from None
    return loads(text)
