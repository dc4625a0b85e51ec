"""Tanh multilayer perceptrons and the Adam optimizer."""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

__all__ = ["ConfigurationError", "Mlp", "mlp_init", "mlp_forward", "AdamState", "adam_step"]


class ConfigurationError(ValueError):
    """Invalid architecture or optimizer settings."""


@dataclass
class Mlp:
    """Affine layers with tanh between them and an identity output.

    ``weights[i]`` has shape ``(layer_dims[i + 1], layer_dims[i])`` and
    ``biases[i]`` has shape ``(layer_dims[i + 1],)``.
    """

    layer_dims: tuple
    weights: list
    biases: list

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        _check_dims(self.layer_dims)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expect = (self.layer_dims[i + 1], self.layer_dims[i])
            if w.shape != expect or b.shape != expect[:1]:
                raise ConfigurationError(
                    f"layer {i}: weight {w.shape} / bias {b.shape}, expected {expect}"
                )

    @classmethod
    def zeros(cls, layer_dims):
        _check_dims(layer_dims)
        pairs = list(zip(layer_dims[:-1], layer_dims[1:]))
        return cls(
            tuple(layer_dims),
            [np.zeros((o, i)) for i, o in pairs],
            [np.zeros(o) for _, o in pairs],
        )

    @property
    def in_dim(self):
        return self.layer_dims[0]

    @property
    def out_dim(self):
        return self.layer_dims[-1]

    def parameters(self):
        """Flat list ``[w0, b0, w1, b1, ...]`` of the underlying arrays."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def parameter_names(self, prefix=""):
        names = []
        for i in range(len(self.weights)):
            names.extend((f"{prefix}w{i}", f"{prefix}b{i}"))
        return names

    def set_parameters(self, arrays):
        arrays = list(arrays)
        self.weights = [np.array(a, dtype=np.float64) for a in arrays[0::2]]
        self.biases = [np.array(a, dtype=np.float64) for a in arrays[1::2]]
        self.__post_init__()

    def bind(self, tape):
        """Leaf tensors on ``tape`` for every parameter, in ``parameters()`` order."""
        return [tape.variable(p) for p in self.parameters()]

    def copy(self):
        return Mlp(self.layer_dims, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def __call__(self, x):
        return mlp_forward(self, x).data


def _check_dims(dims):
    if len(dims) < 2 or any(int(d) < 1 for d in dims):
        raise ConfigurationError(f"layer_dims needs >= 2 positive sizes, got {list(dims)}")


def mlp_init(layer_dims, rng):
    """Glorot-uniform weights and zero biases."""
    _check_dims(layer_dims)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Mlp(tuple(layer_dims), weights, biases)


def mlp_forward(net, x, params=None):
    """Apply ``net`` to the columns of ``x`` (shape ``in_dim x batch``).

    ``params`` are tensors from :meth:`Mlp.bind`; without them the stored
    arrays are used as constants.
    """
    x = x if isinstance(x, ad.Tensor) else ad.Tensor(x)
    if x.ndim != 2 or x.shape[0] != net.in_dim:
        raise ad.DimensionError(f"mlp input shape {x.shape}, expected ({net.in_dim}, batch)")
    if params is None:
        params = [ad.Tensor(p) for p in net.parameters()]
    ones = ad.Tensor(np.ones((1, x.shape[1])))
    h = x
    n_layers = len(net.weights)
    for i in range(n_layers):
        w, b = params[2 * i], params[2 * i + 1]
        h = ad.matmul(w, h) + ad.matmul(ad.reshape(b, (-1, 1)), ones)
        if i < n_layers - 1:
            h = ad.tanh(h)
    return h


@dataclass
class AdamState:
    shapes: list
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default=None)
    v: list = field(default=None)

    def __post_init__(self):
        self.shapes = [tuple(s) for s in self.shapes]
        if self.m is None:
            self.m = [np.zeros(s) for s in self.shapes]
        if self.v is None:
            self.v = [np.zeros(s) for s in self.shapes]
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be >= 0")

    @classmethod
    def for_params(cls, params, **kwargs):
        return cls([np.shape(p) for p in params], **kwargs)


def adam_step(state, params, grads):
    """One bias-corrected Adam update; returns new parameter arrays.

    ``state`` is advanced in place.
    """
    if len(params) != len(state.shapes) or len(grads) != len(params):
        raise ad.DimensionError("adam_step: parameter/gradient count mismatch")
    for p, g, s in zip(params, grads, state.shapes):
        if np.shape(p) != s or np.shape(g) != s:
            raise ad.DimensionError(f"adam_step: shapes {np.shape(p)}, {np.shape(g)} vs {s}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    new = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        new.append(p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps))
    return new
