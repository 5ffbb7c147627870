"""Coupled state/weight dynamics h = (f, g) with an initial-weight map gamma.

A :class:`ControlledDynamics` evaluates, for a batch of states, the vector
field ``dx/dt = f(x, theta, t)``, the controller ``dtheta/dt = g(theta, x,
t)``, the initial map ``theta(0) = gamma(x(0))``, and the products of all
their Jacobians with cotangent vectors needed by the adjoint engine.

Shapes: ``x`` is ``(B, n_x)``, ``theta`` is ``(B, n_theta)`` and the
meta-parameters ``mu`` are one shared flat vector laid out as
``gamma | g | f`` slots.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ConfigError, ShapeError
from .netblocks import (
    ACTIVATIONS,
    MlpSpec,
    activate,
    activation_slope,
    init_params,
    mlp_forward,
    mlp_jacobians,
    mlp_vjp,
)
from .numcore import Layout, Rng
from .odesolve import AugmentedState

F_KINDS = ("mlp", "matmul", "theta", "data_control")
G_MODES = ("none", "mlp", "hebbian", "linear_x")
GAMMA_MODES = ("mlp", "constant", "identity")


@dataclass(frozen=True)
class DynamicsSpec:
    """Which f, g and gamma to couple.

    f kinds
      ``mlp``          theta is the flat parameter vector of ``f_spec``
      ``matmul``       f = act(Theta x), Theta an n_x x n_x matrix (optionally masked)
      ``theta``        f = f_scale * theta
      ``data_control`` f = MLP_mu(x : theta) with its own weights in mu
    """

    n_x: int
    f_kind: str = "mlp"
    f_spec: MlpSpec | None = None
    f_activation: str = "identity"
    f_scale: float = 1.0
    mask: tuple | None = None
    g_mode: str = "none"
    g_spec: MlpSpec | None = None
    g_scale: float = 1.0
    gamma_mode: str = "constant"
    gamma_spec: MlpSpec | None = None

    def __post_init__(self):
        if self.mask is not None:
            object.__setattr__(self, "mask", tuple((int(r), int(c)) for r, c in self.mask))
        if self.f_kind not in F_KINDS:
            raise ConfigError(f"unknown f_kind {self.f_kind!r}; valid: {', '.join(F_KINDS)}")
        if self.g_mode not in G_MODES:
            raise ConfigError(f"unknown g_mode {self.g_mode!r}; valid: {', '.join(G_MODES)}")
        if self.gamma_mode not in GAMMA_MODES:
            raise ConfigError(f"unknown gamma_mode {self.gamma_mode!r}; valid: {', '.join(GAMMA_MODES)}")
        if self.f_activation not in ACTIVATIONS:
            raise ConfigError(f"unknown f_activation {self.f_activation!r}")
        if self.f_kind in ("mlp", "data_control") and self.f_spec is None:
            raise ConfigError(f"f_kind={self.f_kind} needs f_spec")
        n_x, n_th = self.n_x, self.n_theta
        if self.f_kind == "mlp" and (self.f_spec.n_in != n_x or self.f_spec.n_out != n_x):
            raise ConfigError("controlled MLP f must map R^n_x to R^n_x")
        if self.f_kind == "data_control" and (self.f_spec.n_in <= n_x or self.f_spec.n_out != n_x):
            raise ConfigError("data-control f takes (x : theta) and returns R^n_x")
        if self.mask is not None:
            if self.f_kind != "matmul":
                raise ConfigError("mask only applies to f_kind=matmul")
            if any(not (0 <= r < n_x and 0 <= c < n_x) for r, c in self.mask):
                raise ConfigError("mask entry out of range")
        if self.gamma_mode == "mlp":
            if self.gamma_spec is None:
                raise ConfigError("gamma_mode=mlp needs gamma_spec")
            # the input may be x(0) or a separate conditioning vector
            if self.gamma_spec.n_out != n_th:
                raise ShapeError(f"gamma must output R^{n_th}, got {self.gamma_spec.layer_sizes}")
        if self.gamma_mode == "identity" and n_th != n_x:
            raise ShapeError(f"identity gamma needs n_theta == n_x ({n_th} != {n_x})")
        if self.g_mode == "mlp":
            if self.g_spec is None:
                raise ConfigError("g_mode=mlp needs g_spec")
            if self.g_spec.n_in != n_th + n_x or self.g_spec.n_out != n_th:
                raise ShapeError(f"g must map R^{n_th + n_x} to R^{n_th}, got {self.g_spec.layer_sizes}")
        if self.g_mode == "hebbian" and (self.f_kind != "matmul" or self.mask is not None):
            raise ConfigError("hebbian g needs an unmasked matmul f")
        if self.g_mode == "linear_x" and n_th != n_x:
            raise ShapeError("g_mode=linear_x needs n_theta == n_x")

    @property
    def n_theta(self) -> int:
        if self.f_kind == "mlp":
            return self.f_spec.n_params
        if self.f_kind == "matmul":
            return len(self.mask) if self.mask is not None else self.n_x * self.n_x
        if self.f_kind == "theta":
            return self.n_x
        return self.f_spec.n_in - self.n_x

    def to_dict(self) -> dict:
        return {
            "n_x": self.n_x,
            "f_kind": self.f_kind,
            "f_spec": self.f_spec.to_dict() if self.f_spec else None,
            "f_activation": self.f_activation,
            "f_scale": self.f_scale,
            "mask": [list(m) for m in self.mask] if self.mask is not None else None,
            "g_mode": self.g_mode,
            "g_spec": self.g_spec.to_dict() if self.g_spec else None,
            "g_scale": self.g_scale,
            "gamma_mode": self.gamma_mode,
            "gamma_spec": self.gamma_spec.to_dict() if self.gamma_spec else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DynamicsSpec":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model fields: {sorted(unknown)}")
        for k in ("f_spec", "g_spec", "gamma_spec"):
            if d.get(k) is not None:
                d[k] = MlpSpec.from_dict(d[k])
        if d.get("mask") is not None:
            d["mask"] = tuple(tuple(m) for m in d["mask"])
        return cls(**d)


class Dynamics:
    """Interface consumed by the adjoint engine. Arrays are batched."""

    n_x: int
    n_theta: int
    layout: Layout

    @property
    def n_mu(self) -> int:
        return self.layout.size

    def rhs(self, t, x, theta, mu):
        raise NotImplementedError

    def vjp(self, t, x, theta, mu, ax, atheta):
        """Return ``(a^T dh/dx, a^T dh/dtheta, a^T dh/dmu)``; mu part batch-summed."""
        raise NotImplementedError

    def jacobian(self, t, x, theta, mu):
        """Single example: ``(dh/dz, dh/dmu)`` as dense matrices."""
        raise NotImplementedError

    def gamma(self, mu, x0):
        raise NotImplementedError

    def gamma_vjp(self, mu, x0, atheta0):
        raise NotImplementedError

    def init_mu(self, rng: Rng) -> np.ndarray:
        return np.zeros(self.n_mu)

    def split(self, z):
        z = np.asarray(z, dtype=np.float64)
        return z[..., : self.n_x], z[..., self.n_x:]


class ControlledDynamics(Dynamics):
    def __init__(self, spec: DynamicsSpec):
        self.spec = spec
        self.n_x = spec.n_x
        self.n_theta = spec.n_theta
        n_gamma = {"mlp": spec.gamma_spec.n_params if spec.gamma_spec else 0,
                   "constant": self.n_theta, "identity": 0}[spec.gamma_mode]
        n_g = {"none": 0, "linear_x": 0,
               "mlp": spec.g_spec.n_params if spec.g_spec else 0,
               "hebbian": self.n_theta}[spec.g_mode]
        n_f = spec.f_spec.n_params if spec.f_kind == "data_control" else 0
        self.layout = Layout.of(("gamma", (n_gamma,)), ("g", (n_g,)), ("f", (n_f,)))
        if spec.f_kind == "matmul":
            n = self.n_x
            if spec.mask is None:
                self._rows = np.repeat(np.arange(n), n)
                self._cols = np.tile(np.arange(n), n)
            else:
                self._rows = np.array([r for r, _ in spec.mask], dtype=int)
                self._cols = np.array([c for _, c in spec.mask], dtype=int)

    def __repr__(self):
        s = self.spec
        return f"ControlledDynamics(f={s.f_kind}, g={s.g_mode}, gamma={s.gamma_mode}, n_x={s.n_x})"

    # -- slices ------------------------------------------------------------
    def mu_gamma(self, mu):
        return mu[self.layout.slice("gamma")]

    def mu_g(self, mu):
        return mu[self.layout.slice("g")]

    def mu_f(self, mu):
        return mu[self.layout.slice("f")]

    def matrix(self, theta):
        """Scatter theta into (B, n, n) weight matrices (matmul f)."""
        n = self.n_x
        if self.spec.mask is None:
            return theta.reshape(theta.shape[:-1] + (n, n))
        M = np.zeros(theta.shape[:-1] + (n, n))
        M[..., self._rows, self._cols] = theta
        return M

    # -- initial map -------------------------------------------------------
    def gamma(self, mu, x0):
        x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
        mode = self.spec.gamma_mode
        if mode == "mlp":
            return mlp_forward(self.spec.gamma_spec, self.mu_gamma(mu), x0)
        if mode == "constant":
            return np.broadcast_to(self.mu_gamma(mu), (x0.shape[0], self.n_theta)).copy()
        if x0.shape[-1] != self.n_theta:
            raise ShapeError("identity gamma needs dim(x0) == n_theta")
        return x0.copy()

    def gamma_vjp(self, mu, x0, atheta0):
        x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
        g_mu = np.zeros(self.n_mu)
        mode = self.spec.gamma_mode
        if mode == "mlp":
            gx, gp = mlp_vjp(self.spec.gamma_spec, self.mu_gamma(mu), x0, atheta0)
            g_mu[self.layout.slice("gamma")] = gp
            return gx, g_mu
        if mode == "constant":
            g_mu[self.layout.slice("gamma")] = np.asarray(atheta0).sum(axis=0)
            return np.zeros_like(x0), g_mu
        return np.array(atheta0, dtype=np.float64), g_mu

    def gamma_jacobian(self, mu, x0):
        """Single example: ``(dtheta0/dx0, dtheta0/dmu)``."""
        x0 = np.asarray(x0, dtype=np.float64)
        J_mu = np.zeros((self.n_theta, self.n_mu))
        mode = self.spec.gamma_mode
        if mode == "mlp":
            J_x, J_p = mlp_jacobians(self.spec.gamma_spec, self.mu_gamma(mu), x0)
            J_mu[:, self.layout.slice("gamma")] = J_p
            return J_x, J_mu
        if mode == "constant":
            J_mu[:, self.layout.slice("gamma")] = np.eye(self.n_theta)
            return np.zeros((self.n_theta, self.n_x)), J_mu
        return np.eye(self.n_x), J_mu

    # -- vector field ------------------------------------------------------
    def f(self, t, x, theta, mu):
        kind = self.spec.f_kind
        if kind == "mlp":
            return mlp_forward(self.spec.f_spec, theta, x)
        if kind == "matmul":
            u = np.einsum("bij,bj->bi", self.matrix(theta), x)
            return activate(self.spec.f_activation, u)
        if kind == "theta":
            return self.spec.f_scale * theta
        return mlp_forward(self.spec.f_spec, self.mu_f(mu), np.concatenate([x, theta], axis=-1))

    def g(self, t, x, theta, mu):
        mode = self.spec.g_mode
        if mode == "none":
            return np.zeros_like(theta)
        if mode == "mlp":
            return mlp_forward(self.spec.g_spec, self.mu_g(mu), np.concatenate([theta, x], axis=-1))
        if mode == "hebbian":
            gain = self.mu_g(mu)
            outer = x[:, :, None] * x[:, None, :]
            return gain * outer.reshape(x.shape[0], -1)
        return self.spec.g_scale * x

    def rhs(self, t, x, theta, mu):
        return self.f(t, x, theta, mu), self.g(t, x, theta, mu)

    def vjp(self, t, x, theta, mu, ax, atheta):
        spec = self.spec
        vx = np.zeros_like(x)
        vth = np.zeros_like(theta)
        vmu = np.zeros(self.n_mu)
        # f contribution
        kind = spec.f_kind
        if kind == "mlp":
            gx, gth = mlp_vjp(spec.f_spec, theta, x, ax)
            vx += gx
            vth += gth
        elif kind == "matmul":
            M = self.matrix(theta)
            u = np.einsum("bij,bj->bi", M, x)
            s = activation_slope(spec.f_activation, u, activate(spec.f_activation, u)) * ax
            vx += np.einsum("bij,bi->bj", M, s)
            vth += s[:, self._rows] * x[:, self._cols]
        elif kind == "theta":
            vth += spec.f_scale * ax
        else:
            gin, gp = mlp_vjp(spec.f_spec, self.mu_f(mu), np.concatenate([x, theta], axis=-1), ax)
            vx += gin[:, : self.n_x]
            vth += gin[:, self.n_x:]
            vmu[self.layout.slice("f")] += gp
        # g contribution
        mode = spec.g_mode
        if mode == "mlp":
            gin, gp = mlp_vjp(spec.g_spec, self.mu_g(mu), np.concatenate([theta, x], axis=-1), atheta)
            vth += gin[:, : self.n_theta]
            vx += gin[:, self.n_theta:]
            vmu[self.layout.slice("g")] += gp
        elif mode == "hebbian":
            n = self.n_x
            A = atheta.reshape(-1, n, n) * self.mu_g(mu).reshape(n, n)
            vx += np.einsum("bij,bj->bi", A, x) + np.einsum("bij,bi->bj", A, x)
            outer = (x[:, :, None] * x[:, None, :]).reshape(x.shape[0], -1)
            vmu[self.layout.slice("g")] += np.einsum("bk,bk->k", atheta, outer)
        elif mode == "linear_x":
            vx += spec.g_scale * atheta
        return vx, vth, vmu

    def jacobian(self, t, x, theta, mu):
        spec = self.spec
        x = np.asarray(x, dtype=np.float64)
        theta = np.asarray(theta, dtype=np.float64)
        n_x, n_th = self.n_x, self.n_theta
        J = np.zeros((n_x + n_th, n_x + n_th))
        J_mu = np.zeros((n_x + n_th, self.n_mu))
        fx, fth = J[:n_x, :n_x], J[:n_x, n_x:]
        gx, gth = J[n_x:, :n_x], J[n_x:, n_x:]
        kind = spec.f_kind
        if kind == "mlp":
            Jx, Jp = mlp_jacobians(spec.f_spec, theta, x)
            fx[...] = Jx
            fth[...] = Jp
        elif kind == "matmul":
            M = self.matrix(theta)
            u = M @ x
            s = activation_slope(spec.f_activation, u, activate(spec.f_activation, u))
            fx[...] = s[:, None] * M
            fth[self._rows, np.arange(n_th)] = s[self._rows] * x[self._cols]
        elif kind == "theta":
            fth[...] = spec.f_scale * np.eye(n_x)
        else:
            Jin, Jp = mlp_jacobians(spec.f_spec, self.mu_f(mu), np.concatenate([x, theta]))
            fx[...] = Jin[:, :n_x]
            fth[...] = Jin[:, n_x:]
            J_mu[:n_x, self.layout.slice("f")] = Jp
        mode = spec.g_mode
        if mode == "mlp":
            Jin, Jp = mlp_jacobians(spec.g_spec, self.mu_g(mu), np.concatenate([theta, x]))
            gth[...] = Jin[:, :n_th]
            gx[...] = Jin[:, n_th:]
            J_mu[n_x:, self.layout.slice("g")] = Jp
        elif mode == "hebbian":
            n = n_x
            gain = self.mu_g(mu).reshape(n, n)
            # d(gain_ij x_i x_j)/dx_k = gain_ij (delta_ik x_j + x_i delta_jk)
            D = np.zeros((n, n, n))
            idx = np.arange(n)
            D[idx, :, idx] += gain * x[None, :]
            D[:, idx, idx] += gain * x[:, None]
            gx[...] = D.reshape(n * n, n)
            J_mu[n_x:, self.layout.slice("g")] = np.diag(np.outer(x, x).reshape(-1))
        elif mode == "linear_x":
            gx[...] = spec.g_scale * np.eye(n_x)
        return J, J_mu

    def init_mu(self, rng: Rng) -> np.ndarray:
        spec = self.spec
        mu = np.zeros(self.n_mu)
        if spec.gamma_mode == "mlp":
            mu[self.layout.slice("gamma")] = init_params(spec.gamma_spec, rng)
        elif spec.gamma_mode == "constant":
            if spec.f_kind == "mlp":
                theta0 = init_params(spec.f_spec, rng)
            elif spec.f_kind == "matmul":
                s = np.sqrt(3.0 / self.n_x)
                theta0 = rng.uniform(-s, s, self.n_theta)
            else:
                theta0 = np.zeros(self.n_theta)
            mu[self.layout.slice("gamma")] = theta0
        if spec.g_mode == "mlp":
            mu[self.layout.slice("g")] = init_params(spec.g_spec, rng, scale=0.1)
        if spec.f_kind == "data_control":
            mu[self.layout.slice("f")] = init_params(spec.f_spec, rng)
        return mu


def as_dynamics(spec) -> Dynamics:
    return spec if isinstance(spec, Dynamics) else ControlledDynamics(spec)


def _unpack(z):
    if isinstance(z, AugmentedState):
        return z.x, z.theta, z.t
    raise ShapeError("expected an AugmentedState")


def gamma_init(spec, mu, x0) -> np.ndarray:
    dyn = as_dynamics(spec)
    x0 = np.asarray(x0, dtype=np.float64)
    out = dyn.gamma(np.asarray(mu, dtype=np.float64), x0)
    return out[0] if x0.ndim == 1 else out


def coupled_rhs(spec, mu, z: AugmentedState):
    """(dx/dt, dtheta/dt) at ``z``."""
    dyn = as_dynamics(spec)
    x, theta, t = _unpack(z)
    single = x.ndim == 1
    dx, dth = dyn.rhs(t, np.atleast_2d(x), np.atleast_2d(theta), np.asarray(mu, dtype=np.float64))
    return (dx[0], dth[0]) if single else (dx, dth)


def node_baseline_rhs(f_spec: MlpSpec, theta_fixed, z: AugmentedState):
    """Autonomous NODE field with frozen weights; the theta rate is zero."""
    x, theta, _ = _unpack(z)
    theta_fixed = np.asarray(theta_fixed, dtype=np.float64)
    if theta_fixed.shape[-1] != f_spec.n_params:
        raise ShapeError(f"theta_fixed needs {f_spec.n_params} entries, got {theta_fixed.shape[-1]}")
    return mlp_forward(f_spec, theta_fixed, x), np.zeros_like(theta)


def coupled_jacobian(spec, mu, z: AugmentedState):
    """Block Jacobian ``[[df/dx, df/dtheta], [dg/dx, dg/dtheta]]`` and ``dh/dmu``."""
    dyn = as_dynamics(spec)
    x, theta, t = _unpack(z)
    return dyn.jacobian(t, x, theta, np.asarray(mu, dtype=np.float64))
