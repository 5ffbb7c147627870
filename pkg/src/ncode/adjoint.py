"""Gradients of trajectory losses with respect to meta-parameters.

Two engines share one interface:

* :func:`adjoint_solve` integrates the adjoint system backward in time,
  recomputing the state alongside it (constant memory in the horizon);
* :func:`backprop_through_solver` differentiates the unrolled fixed-step
  integrator exactly, step by step.

Losses are sums over the batch. Terminal losses enter the backward pass
as the initial adjoint value at ``T``; integrated losses add their state
gradient to the adjoint rate.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .control import Dynamics, as_dynamics
from .errors import NumericalError, ParameterError, ShapeError, UnsupportedConfigError
from .netblocks import MlpSpec, mlp_forward, mlp_vjp
from .numcore import fmt17
from .odesolve import AugmentedState, SolverConfig, Trajectory, integrate


# --------------------------------------------------------------------------
# point losses: evaluate(t, x, theta, params) -> (value[B], dx, dtheta, dparams)
# --------------------------------------------------------------------------
class PointLoss:
    name = "point"
    n_params = 0

    def evaluate(self, t, x, theta, params=None):
        raise NotImplementedError

    def _zeros(self, x, theta):
        return np.zeros_like(x), np.zeros_like(theta), np.zeros(self.n_params)


class ZeroLoss(PointLoss):
    name = "zero"

    def evaluate(self, t, x, theta, params=None):
        return (np.zeros(x.shape[0]),) + self._zeros(x, theta)


class ConstantLoss(PointLoss):
    name = "constant"

    def __init__(self, value=1.0):
        self.value = float(value)

    def evaluate(self, t, x, theta, params=None):
        return (np.full(x.shape[0], self.value),) + self._zeros(x, theta)


class SquaredState(PointLoss):
    """l = |x|^2"""

    name = "squared_state"

    def evaluate(self, t, x, theta, params=None):
        _, gth, gp = self._zeros(x, theta)
        return np.sum(x * x, axis=-1), 2.0 * x, gth, gp


class SumState(PointLoss):
    """l = sum_i x_i (the state itself, for scalar systems)."""

    name = "sum_state"

    def evaluate(self, t, x, theta, params=None):
        _, gth, gp = self._zeros(x, theta)
        return np.sum(x, axis=-1), np.ones_like(x), gth, gp


class TrackingLoss(PointLoss):
    """l = |x - ref(t)|^2 for a reference path ``ref(t) -> (n_x,)``."""

    name = "tracking"

    def __init__(self, ref):
        self.ref = ref

    def evaluate(self, t, x, theta, params=None):
        d = x - np.asarray(self.ref(t))
        _, gth, gp = self._zeros(x, theta)
        return np.sum(d * d, axis=-1), 2.0 * d, gth, gp


class TargetMSE(PointLoss):
    """Mean squared error of x against per-example targets."""

    name = "mse"

    def __init__(self, targets):
        self.targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))

    def evaluate(self, t, x, theta, params=None):
        d = x - self.targets
        n = x.shape[-1]
        _, gth, gp = self._zeros(x, theta)
        return np.sum(d * d, axis=-1) / n, 2.0 * d / n, gth, gp


def softmax(logits):
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


class SoftmaxCrossEntropy(PointLoss):
    """Cross-entropy of softmax(W x + b) against integer labels.

    ``params`` holds ``W`` (n_classes x n_x, row-major) then ``b``.
    """

    name = "xent"

    def __init__(self, labels, n_classes, n_x):
        self.labels = np.asarray(labels, dtype=int)
        self.n_classes = int(n_classes)
        self.n_x = int(n_x)
        self.n_params = self.n_classes * self.n_x + self.n_classes

    def split(self, params):
        C, n = self.n_classes, self.n_x
        return params[: C * n].reshape(C, n), params[C * n:]

    def evaluate(self, t, x, theta, params=None):
        W, b = self.split(params)
        p = softmax(x @ W.T + b)
        rows = np.arange(x.shape[0])
        val = -np.log(np.maximum(p[rows, self.labels], 1e-300))
        dlog = p.copy()
        dlog[rows, self.labels] -= 1.0
        gp = np.concatenate([(dlog.T @ x).reshape(-1), dlog.sum(axis=0)])
        return val, dlog @ W, np.zeros_like(theta), gp


class DecoderMSE(PointLoss):
    """Mean squared reconstruction error of an MLP decoder applied to x."""

    name = "decoder_mse"

    def __init__(self, targets, decoder: MlpSpec):
        self.targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
        self.decoder = decoder
        self.n_params = decoder.n_params

    def evaluate(self, t, x, theta, params=None):
        out = mlp_forward(self.decoder, params, x)
        d = out - self.targets
        n = d.shape[-1]
        gx, gp = mlp_vjp(self.decoder, params, x, 2.0 * d / n)
        return np.sum(d * d, axis=-1) / n, gx, np.zeros_like(theta), gp


@dataclass
class LossSpec:
    """``kind`` is ``terminal`` (loss at T) or ``integrated`` (over [t0, T]).

    ``weight`` scales the batch sum (training uses 1/B for a mean);
    ``params`` are the loss's own trainable parameters (e.g. a head).
    """

    kind: str
    point_loss: PointLoss
    quadrature: str = "solver"
    n_points: int = 101
    weight: float = 1.0
    params: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("terminal", "integrated"):
            raise ParameterError(f"unknown loss kind {self.kind!r}")
        if self.quadrature not in ("solver", "fixed"):
            raise ParameterError(f"unknown quadrature {self.quadrature!r}")
        if self.params is None:
            self.params = np.zeros(self.point_loss.n_params)
        self.params = np.asarray(self.params, dtype=np.float64)

    def scaled(self, alpha) -> "LossSpec":
        return LossSpec(self.kind, self.point_loss, self.quadrature, self.n_points,
                        self.weight * alpha, self.params)

    def evaluate(self, t, x, theta):
        val, gx, gth, gp = self.point_loss.evaluate(t, x, theta, self.params)
        w = self.weight
        return w * val, w * gx, w * gth, w * gp


def loss_integral(traj: Trajectory, loss: LossSpec, n_x: int) -> float:
    """Quadrature of the point loss along a recorded trajectory."""
    if len(traj) == 0:
        raise ParameterError("empty trajectory")
    states = traj.states
    if states.ndim == 2:
        states = states[:, None, :]
    if loss.kind == "terminal":
        zT = states[-1]
        return float(np.sum(loss.evaluate(traj.times[-1], zT[:, :n_x], zT[:, n_x:])[0]))
    vals = np.array([np.sum(loss.evaluate(t, z[:, :n_x], z[:, n_x:])[0])
                     for t, z in zip(traj.times, states)])
    times = np.asarray(traj.times, dtype=np.float64)
    if len(times) < 2:
        raise ParameterError("integrated loss needs at least two recorded times")
    if loss.quadrature == "fixed":
        grid = np.linspace(times[0], times[-1], loss.n_points)
        order = np.argsort(times)
        vals = np.interp(grid, times[order], vals[order])
        times = grid
    return float(np.trapezoid(vals, times))


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------
class _Packer:
    """Pack a list of arrays into one flat vector and back."""

    def __init__(self, shapes):
        self.shapes = [tuple(s) for s in shapes]
        self.sizes = [int(np.prod(s)) for s in self.shapes]
        self.bounds = np.cumsum([0] + self.sizes)

    def pack(self, *arrays):
        return np.concatenate([np.asarray(a, dtype=np.float64).reshape(-1) for a in arrays])

    def unpack(self, y):
        return [y[self.bounds[i]:self.bounds[i + 1]].reshape(s) for i, s in enumerate(self.shapes)]


def _as_batch(z0, n_x):
    if isinstance(z0, AugmentedState):
        x0, th0 = z0.x, z0.theta
    else:
        x0, th0 = z0
    x0 = np.asarray(x0, dtype=np.float64)
    th0 = np.asarray(th0, dtype=np.float64)
    single = x0.ndim == 1
    x0, th0 = np.atleast_2d(x0), np.atleast_2d(th0)
    if x0.shape[-1] != n_x:
        raise ShapeError(f"state has {x0.shape[-1]} components, dynamics expects {n_x}")
    if x0.shape[0] != th0.shape[0]:
        raise ShapeError("x0 and theta0 batch sizes differ")
    return x0, th0, single


@dataclass
class AdjointResult:
    loss: float
    grad_mu: np.ndarray
    grad_x0: np.ndarray
    grad_theta0: np.ndarray
    grad_params: np.ndarray
    x_T: np.ndarray
    theta_T: np.ndarray
    nfe_forward: int = 0
    nfe_backward: int = 0
    extras: dict = field(default_factory=dict)

    @property
    def grad_z0(self):
        return np.concatenate([self.grad_x0, self.grad_theta0], axis=-1)

    @property
    def nfe(self):
        return self.nfe_forward + self.nfe_backward


def forward_solve(dyn: Dynamics, mu, x0, theta0, t0, t1, loss: LossSpec | None, cfg: SolverConfig):
    """Integrate (x, theta[, q]) and return (x_T, theta_T, q_T, nfe).

    ``q`` accumulates the integrated point loss when ``loss`` is integrated.
    """
    B = x0.shape[0]
    with_q = loss is not None and loss.kind == "integrated"
    shapes = [x0.shape, theta0.shape] + ([(B,)] if with_q else [])
    pk = _Packer(shapes)

    def rhs(t, y):
        parts = pk.unpack(y)
        dx, dth = dyn.rhs(t, parts[0], parts[1], mu)
        if with_q:
            return pk.pack(dx, dth, loss.evaluate(t, parts[0], parts[1])[0])
        return pk.pack(dx, dth)

    y0 = pk.pack(x0, theta0, *([np.zeros(B)] if with_q else []))
    if t1 == t0:
        return x0.copy(), theta0.copy(), 0.0, 0
    traj = integrate(rhs, y0, t0, t1, cfg.replace(dense_record=False))
    parts = pk.unpack(traj.final)
    q = float(np.sum(parts[2])) if with_q else 0.0
    return parts[0].copy(), parts[1].copy(), q, traj.n_rhs_evals


def adjoint_backward(dyn: Dynamics, mu, t1, t0, x1, theta1, a_x, a_theta, loss: LossSpec | None,
                     cfg: SolverConfig):
    """Integrate state and adjoint jointly from ``t1`` back to ``t0``.

    Returns ``(x0, theta0, a_x0, a_theta0, grad_mu, grad_params, nfe)`` where
    ``grad_mu`` is the integral of a^T dh/dmu over [t0, t1] and
    ``grad_params`` the integral of dl/dparams.
    """
    integrated = loss is not None and loss.kind == "integrated"
    n_p = loss.params.size if integrated else 0
    pk = _Packer([x1.shape, theta1.shape, x1.shape, theta1.shape, (dyn.n_mu,), (n_p,)])

    def rhs(t, y):
        x, th, ax, ath, _, _ = pk.unpack(y)
        dx, dth = dyn.rhs(t, x, th, mu)
        vx, vth, vmu = dyn.vjp(t, x, th, mu, ax, ath)
        if integrated:
            _, lx, lth, lp = loss.evaluate(t, x, th)
            return pk.pack(dx, dth, -vx - lx, -vth - lth, -vmu, -lp)
        return pk.pack(dx, dth, -vx, -vth, -vmu, np.zeros(0))

    y1 = pk.pack(x1, theta1, a_x, a_theta, np.zeros(dyn.n_mu), np.zeros(n_p))
    if t1 == t0:
        parts = pk.unpack(y1)
        return (*[p.copy() for p in parts], 0)
    traj = integrate(rhs, y1, t1, t0, cfg.replace(dense_record=False))
    x0, th0, ax0, ath0, gmu, gp = pk.unpack(traj.final)
    if not (np.all(np.isfinite(gmu)) and np.all(np.isfinite(ax0)) and np.all(np.isfinite(ath0))):
        raise NumericalError("non-finite gradient from backward solve", t0)
    return x0.copy(), th0.copy(), ax0.copy(), ath0.copy(), gmu.copy(), gp.copy(), traj.n_rhs_evals


def _terminal(loss: LossSpec, t, xT, thT):
    if loss.kind == "terminal":
        val, gx, gth, gp = loss.evaluate(t, xT, thT)
        return float(np.sum(val)), gx, gth, gp
    return 0.0, np.zeros_like(xT), np.zeros_like(thT), np.zeros(loss.params.size)


def adjoint_solve(spec, mu, z0, T: float, loss: LossSpec, cfg: SolverConfig = SolverConfig(),
                  t0: float = 0.0) -> AdjointResult:
    """Loss and its gradients w.r.t. mu and z(0) by the augmented adjoint method.

    ``z0`` is an :class:`AugmentedState` or an ``(x0, theta0)`` pair,
    single or batched.
    """
    dyn = as_dynamics(spec)
    mu = np.asarray(mu, dtype=np.float64)
    x0, th0, single = _as_batch(z0, dyn.n_x)
    t1 = t0 + T
    xT, thT, q, nfe_f = forward_solve(dyn, mu, x0, th0, t0, t1, loss, cfg)
    term, ax, ath, gp_term = _terminal(loss, t1, xT, thT)
    value = term + q
    _, _, ax0, ath0, gmu, gp, nfe_b = adjoint_backward(dyn, mu, t1, t0, xT, thT, ax, ath, loss, cfg)
    grad_params = gp_term + (gp if gp.size else 0.0)
    sq = (lambda a: a[0]) if single else (lambda a: a)
    return AdjointResult(value, gmu, sq(ax0), sq(ath0), np.asarray(grad_params, dtype=np.float64),
                         sq(xT), sq(thT), nfe_f, nfe_b)


def grad_initial_map(spec, mu, grad_theta0, x0):
    """Chain ``dl/dtheta(0)`` through gamma.

    Returns ``(grad_mu, grad_x0)``: a full-length mu gradient that is
    non-zero only on gamma's slice, and the gradient reaching x0 through
    gamma.
    """
    dyn = as_dynamics(spec)
    x0 = np.asarray(x0, dtype=np.float64)
    single = x0.ndim == 1
    g = np.atleast_2d(np.asarray(grad_theta0, dtype=np.float64))
    if g.shape[-1] != dyn.n_theta:
        raise ShapeError(f"grad_theta0 has {g.shape[-1]} entries, expected {dyn.n_theta}")
    gx, gmu = dyn.gamma_vjp(np.asarray(mu, dtype=np.float64), np.atleast_2d(x0), g)
    return gmu, (gx[0] if single else gx)


# --------------------------------------------------------------------------
# discretize-then-optimize engine
# --------------------------------------------------------------------------
def backprop_through_solver(spec, mu, z0, T: float, loss: LossSpec, cfg: SolverConfig,
                            t0: float = 0.0) -> AdjointResult:
    """Exact gradient of the unrolled fixed-step (rk4/euler) solve."""
    if cfg.method not in ("rk4", "euler"):
        raise UnsupportedConfigError(f"backprop_through_solver needs a fixed-step method, got {cfg.method}")
    dyn = as_dynamics(spec)
    mu = np.asarray(mu, dtype=np.float64)
    x, th, single = _as_batch(z0, dyn.n_x)
    integrated = loss.kind == "integrated"
    n_steps = max(1, int(np.ceil(abs(T) / cfg.fixed_dt - 1e-9)))
    if n_steps > cfg.max_steps:
        raise UnsupportedConfigError("too many steps for max_steps")
    dt = T / n_steps
    n_p = loss.params.size
    nfe = 0

    def F(t, x, th):
        dx, dth = dyn.rhs(t, x, th, mu)
        lq = np.sum(loss.evaluate(t, x, th)[0]) if integrated else 0.0
        return dx, dth, lq

    def F_vjp(t, x, th, cx, cth, cq):
        vx, vth, vmu = dyn.vjp(t, x, th, mu, cx, cth)
        if integrated and cq != 0.0:
            _, lx, lth, lp = loss.evaluate(t, x, th)
            return vx + cq * lx, vth + cq * lth, vmu, cq * lp
        return vx, vth, vmu, np.zeros(n_p)

    def stages(t, x, th):
        if cfg.method == "euler":
            k = F(t, x, th)
            return [(t, x, th)], [k]
        k1 = F(t, x, th)
        Y2 = (t + dt / 2, x + dt / 2 * k1[0], th + dt / 2 * k1[1])
        k2 = F(*Y2)
        Y3 = (t + dt / 2, x + dt / 2 * k2[0], th + dt / 2 * k2[1])
        k3 = F(*Y3)
        Y4 = (t + dt, x + dt * k3[0], th + dt * k3[1])
        k4 = F(*Y4)
        return [(t, x, th), Y2, Y3, Y4], [k1, k2, k3, k4]

    weights = [1.0] if cfg.method == "euler" else [1 / 6, 1 / 3, 1 / 3, 1 / 6]
    history = []
    q = 0.0
    for i in range(n_steps):
        t = t0 + i * dt
        history.append((t, x, th))
        Ys, ks = stages(t, x, th)
        nfe += len(ks)
        x = x + dt * sum(w * k[0] for w, k in zip(weights, ks))
        th = th + dt * sum(w * k[1] for w, k in zip(weights, ks))
        q += dt * sum(w * k[2] for w, k in zip(weights, ks))
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(th))):
            raise NumericalError("non-finite state in unrolled solve", t + dt)
    t1 = t0 + T
    term, xb, thb, gp_term = _terminal(loss, t1, x, th)
    value = term + (q if integrated else 0.0)
    gmu = np.zeros(dyn.n_mu)
    gp = gp_term.copy()
    for t, xs, ths in reversed(history):
        Ys, _ = stages(t, xs, ths)
        nfe += len(Ys)
        kb = [(dt * w * xb, dt * w * thb, dt * w) for w in weights]
        xb_new, thb_new = xb.copy(), thb.copy()
        # stage j's input depends on stage j-1's slope with coefficient c_j
        coeffs = [None, dt / 2, dt / 2, dt]
        for j in reversed(range(len(Ys))):
            Yx, Yth = Ys[j][1], Ys[j][2]
            vx, vth, vmu, vp = F_vjp(Ys[j][0], Yx, Yth, kb[j][0], kb[j][1], kb[j][2])
            gmu += vmu
            gp += vp
            xb_new += vx
            thb_new += vth
            if j > 0:
                c = coeffs[j]
                kb[j - 1] = (kb[j - 1][0] + c * vx, kb[j - 1][1] + c * vth, kb[j - 1][2])
        xb, thb = xb_new, thb_new
    sq = (lambda a: a[0]) if single else (lambda a: a)
    return AdjointResult(value, gmu, sq(xb), sq(thb), gp, sq(x), sq(th), nfe, 0)


# --------------------------------------------------------------------------
# end-to-end gradient including gamma, and finite-difference checking
# --------------------------------------------------------------------------
def gradient(spec, mu, x0, T, loss: LossSpec, cfg: SolverConfig = SolverConfig(),
             engine: str = "adjoint", t0: float = 0.0) -> AdjointResult:
    """Loss of the full model x0 -> gamma -> solve -> loss, and dl/dmu.

    ``grad_mu`` includes gamma's contribution; ``grad_x0`` includes the
    path through gamma.
    """
    dyn = as_dynamics(spec)
    mu = np.asarray(mu, dtype=np.float64)
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    th0 = dyn.gamma(mu, x0)
    solve = adjoint_solve if engine == "adjoint" else backprop_through_solver
    res = solve(dyn, mu, (x0, th0), T, loss, cfg, t0=t0)
    gx_gamma, g_mu_gamma = dyn.gamma_vjp(mu, x0, res.grad_theta0)
    res.grad_mu = res.grad_mu + g_mu_gamma
    res.grad_x0 = res.grad_x0 + gx_gamma
    return res


def forward_loss(spec, mu, x0, T, loss: LossSpec, cfg: SolverConfig = SolverConfig(), t0: float = 0.0):
    dyn = as_dynamics(spec)
    mu = np.asarray(mu, dtype=np.float64)
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    th0 = dyn.gamma(mu, x0)
    xT, thT, q, _ = forward_solve(dyn, mu, x0, th0, t0, t0 + T, loss, cfg)
    return _terminal(loss, t0 + T, xT, thT)[0] + (q if loss.kind == "integrated" else 0.0)


def rel_err(a, b, floor=1e-7):
    """|a-b| / max(|a|,|b|); pairs with both magnitudes below ``floor`` count as 0."""
    d = max(abs(a), abs(b))
    return 0.0 if d <= floor else abs(a - b) / d


@dataclass
class GradCheckReport:
    rows: list
    max_rel_err: float

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["coord", "adjoint", "fd", "rel_err"])
            for c, a, f, e in self.rows:
                w.writerow([c, fmt17(a), fmt17(f), fmt17(e)])


def fd_gradient(value_fn, mu, h=1e-5, coords=None):
    mu = np.asarray(mu, dtype=np.float64)
    coords = range(mu.size) if coords is None else coords
    out = {}
    for i in coords:
        mp, mm = mu.copy(), mu.copy()
        mp[i] += h
        mm[i] -= h
        out[i] = (value_fn(mp) - value_fn(mm)) / (2 * h)
    return out


def compare_gradients(grad, fd: dict, floor=1e-7) -> GradCheckReport:
    rows = [(i, float(grad[i]), float(f), rel_err(float(grad[i]), float(f), floor)) for i, f in fd.items()]
    rows.sort(key=lambda r: (-r[3], r[0]))
    return GradCheckReport(rows, max((r[3] for r in rows), default=0.0))


def grad_check(spec, mu, x0, T, loss: LossSpec, cfg: SolverConfig = SolverConfig(method="dopri5", rtol=1e-8, atol=1e-8),
               h=1e-5, coords=None, floor=1e-7, gradient_fn=None) -> GradCheckReport:
    """Central differences over mu against the adjoint gradient."""
    grad = (gradient_fn or gradient)(spec, mu, x0, T, loss, cfg).grad_mu
    fd = fd_gradient(lambda m: forward_loss(spec, m, x0, T, loss, cfg), mu, h, coords)
    return compare_gradients(grad, fd, floor)
