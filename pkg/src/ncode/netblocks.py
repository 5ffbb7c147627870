"""Dense MLPs over flat parameter vectors, with analytic Jacobians.

Parameters of an MLP are laid out layer by layer: the weight matrix
``W_l`` (out x in, row-major) followed by its bias ``b_l``. Parameter
vectors may be shared, shape ``(P,)``, or per-example, shape ``(B, P)``;
the latter is how controlled weights theta(t) drive the vector field.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ConfigError, ShapeError
from .numcore import Layout, Rng

ACTIVATIONS = ("tanh", "relu", "sigmoid", "identity")


def sigmoid_vec(x):
    x = np.asarray(x, dtype=np.float64)
    # tanh form never overflows for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def activate(name, u):
    if name == "tanh":
        return np.tanh(u)
    if name == "relu":
        return np.maximum(u, 0.0)
    if name == "sigmoid":
        return sigmoid_vec(u)
    if name == "identity":
        return u
    raise ConfigError(f"unknown activation {name!r}; valid: {', '.join(ACTIVATIONS)}")


def activation_slope(name, u, y):
    """Derivative of the activation given pre-activation ``u`` and output ``y``."""
    if name == "tanh":
        return 1.0 - y * y
    if name == "relu":
        return (u > 0.0).astype(np.float64)
    if name == "sigmoid":
        return y * (1.0 - y)
    if name == "identity":
        return np.ones_like(u)
    raise ConfigError(f"unknown activation {name!r}")


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple
    activation: str = "tanh"
    final_activation: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        if len(self.layer_sizes) < 2:
            raise ConfigError("an MLP needs at least input and output sizes")
        if any(s < 1 for s in self.layer_sizes):
            raise ConfigError(f"layer sizes must be positive: {self.layer_sizes}")
        for a in (self.activation, self.final_activation):
            if a not in ACTIVATIONS:
                raise ConfigError(f"unknown activation {a!r}; valid: {', '.join(ACTIVATIONS)}")

    @property
    def n_in(self):
        return self.layer_sizes[0]

    @property
    def n_out(self):
        return self.layer_sizes[-1]

    @property
    def n_layers(self):
        return len(self.layer_sizes) - 1

    @cached_property
    def layout(self) -> Layout:
        slots = []
        for l, (i, o) in enumerate(zip(self.layer_sizes[:-1], self.layer_sizes[1:])):
            slots.append((f"W{l}", (o, i)))
            slots.append((f"b{l}", (o,)))
        return Layout(tuple(slots))

    @property
    def n_params(self) -> int:
        return self.layout.size

    def act(self, l):
        return self.final_activation if l == self.n_layers - 1 else self.activation

    def to_dict(self):
        return {"layer_sizes": list(self.layer_sizes), "activation": self.activation,
                "final_activation": self.final_activation}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["layer_sizes"]), d.get("activation", "tanh"), d.get("final_activation", "identity"))


def init_params(spec: MlpSpec, rng: Rng, scale: float = 1.0) -> np.ndarray:
    """Glorot-uniform weights (He-normal for relu), zero biases."""
    p = np.zeros(spec.n_params)
    for l in range(spec.n_layers):
        fan_in, fan_out = spec.layer_sizes[l], spec.layer_sizes[l + 1]
        sl = spec.layout.slice(f"W{l}")
        if spec.activation == "relu" and l < spec.n_layers - 1:
            w = rng.normal(fan_out * fan_in, 0.0, np.sqrt(2.0 / fan_in))
        else:
            s = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-s, s, fan_out * fan_in)
        p[sl] = scale * w
    return p


def _check(spec, params, x):
    params = np.asarray(params, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if params.shape[-1] != spec.n_params:
        raise ShapeError(f"MLP {spec.layer_sizes} needs {spec.n_params} params, got {params.shape[-1]}")
    if x.shape[-1] != spec.n_in:
        raise ShapeError(f"MLP input must have {spec.n_in} features, got {x.shape[-1]}")
    if params.ndim == 2 and x.ndim == 2 and params.shape[0] != x.shape[0]:
        raise ShapeError("per-example params and inputs disagree on batch size")
    return params, x


def _affine(W, b, a):
    # W: (o,i) shared or (B,o,i) per-example; a: (B,i)
    if W.ndim == 2:
        return a @ W.T + b
    return np.einsum("boi,bi->bo", W, a) + b


def _forward_cache(spec, params, x2):
    acts = [x2]
    pres = []
    a = x2
    for l in range(spec.n_layers):
        W = spec.layout.view(params, f"W{l}")
        b = spec.layout.view(params, f"b{l}")
        u = _affine(W, b, a)
        a = activate(spec.act(l), u)
        pres.append(u)
        acts.append(a)
    return acts, pres


def mlp_forward(spec: MlpSpec, params, x) -> np.ndarray:
    params, x = _check(spec, params, x)
    single = x.ndim == 1 and params.ndim == 1
    x2 = np.atleast_2d(x)
    if params.ndim == 2 and x2.shape[0] == 1 and params.shape[0] > 1:
        x2 = np.broadcast_to(x2, (params.shape[0], x2.shape[1]))
    acts, _ = _forward_cache(spec, params, x2)
    return acts[-1][0] if single else acts[-1]


def mlp_vjp(spec: MlpSpec, params, x, cot):
    """Reverse-mode product of ``cot`` with the MLP Jacobians.

    Returns ``(cot @ d_out/d_input, cot @ d_out/d_params)``. The parameter
    part is summed over the batch when ``params`` is shared and kept per
    example when ``params`` is batched.
    """
    params, x = _check(spec, params, x)
    x2 = np.atleast_2d(x)
    cot = np.atleast_2d(np.asarray(cot, dtype=np.float64))
    if params.ndim == 2 and x2.shape[0] == 1 and params.shape[0] > 1:
        x2 = np.broadcast_to(x2, (params.shape[0], x2.shape[1]))
    acts, pres = _forward_cache(spec, params, x2)
    batched = params.ndim == 2
    g_params = np.zeros(params.shape if batched else (spec.n_params,))
    delta = cot
    for l in reversed(range(spec.n_layers)):
        delta = delta * activation_slope(spec.act(l), pres[l], acts[l + 1])
        a_in = acts[l]
        W = spec.layout.view(params, f"W{l}")
        if batched:
            spec.layout.view(g_params, f"W{l}")[...] = delta[:, :, None] * a_in[:, None, :]
            spec.layout.view(g_params, f"b{l}")[...] = delta
            delta = np.einsum("bo,boi->bi", delta, W)
        else:
            g_params[spec.layout.slice(f"W{l}")] = (delta.T @ a_in).reshape(-1)
            g_params[spec.layout.slice(f"b{l}")] = delta.sum(axis=0)
            delta = delta @ W
    return delta, g_params


def mlp_jacobians(spec: MlpSpec, params, x):
    """Full Jacobians ``(d_out/d_input, d_out/d_params)`` for one example.

    Built by the layerwise chain rule: ``D_l`` is the derivative of the
    network output with respect to the pre-activation of layer ``l``.
    """
    params, x = _check(spec, params, x)
    if params.ndim != 1 or x.ndim != 1:
        raise ShapeError("mlp_jacobians takes a single example")
    acts, pres = _forward_cache(spec, params, x[None, :])
    acts = [a[0] for a in acts]
    pres = [u[0] for u in pres]
    L = spec.n_layers
    J_p = np.zeros((spec.n_out, spec.n_params))
    D = np.diag(activation_slope(spec.act(L - 1), pres[L - 1], acts[L]))
    for l in reversed(range(L)):
        J_p[:, spec.layout.slice(f"W{l}")] = (D[:, :, None] * acts[l][None, None, :]).reshape(spec.n_out, -1)
        J_p[:, spec.layout.slice(f"b{l}")] = D
        W = spec.layout.view(params, f"W{l}")
        D = D @ W
        if l > 0:
            D = D * activation_slope(spec.act(l - 1), pres[l - 1], acts[l])[None, :]
    return D, J_p
