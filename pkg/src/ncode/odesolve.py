"""Explicit Euler / RK4 / Dormand-Prince integrators.

All steppers work on arrays of any shape; ``rhs(t, y)`` must return an
array of the same shape. Backward integration (``t1 < t0``) is handled by
stepping with a negative ``dt``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .errors import BudgetError, ConfigError, NumericalError
from .numcore import fmt17

METHODS = ("euler", "rk4", "dopri5")


@dataclass(frozen=True)
class SolverConfig:
    method: str = "dopri5"
    rtol: float = 1e-3
    atol: float = 1e-3
    fixed_dt: float = 1e-2
    max_steps: int = 1_000_000
    dense_record: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown solver method {self.method!r}; valid: {', '.join(METHODS)}")
        if not (self.rtol > 0 and self.atol > 0 and self.fixed_dt > 0):
            raise ConfigError("rtol, atol and fixed_dt must be positive")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")

    @property
    def adaptive(self) -> bool:
        return self.method == "dopri5"

    def replace(self, **kw) -> "SolverConfig":
        d = self.to_dict()
        d.update(kw)
        return SolverConfig(**d)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "rtol": self.rtol,
            "atol": self.atol,
            "fixed_dt": self.fixed_dt,
            "max_steps": self.max_steps,
            "dense_record": self.dense_record,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown solver fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Trajectory:
    """Recorded solve. ``states[i]`` is the state at ``times[i]``.

    Times are monotone in the direction of integration (decreasing for
    backward solves).
    """

    times: np.ndarray
    states: np.ndarray
    n_rhs_evals: int = 0
    n_rejected: int = 0

    @property
    def t0(self):
        return self.times[0]

    @property
    def t1(self):
        return self.times[-1]

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def __len__(self):
        return len(self.times)


@dataclass
class AugmentedState:
    """Joint state z = (x, theta) at time t."""

    x: np.ndarray
    theta: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.theta = np.asarray(self.theta, dtype=np.float64)

    @property
    def n_x(self) -> int:
        return self.x.shape[-1]

    def flat(self) -> np.ndarray:
        return np.concatenate([self.x, self.theta], axis=-1)

    @classmethod
    def from_flat(cls, z, n_x: int, t: float = 0.0) -> "AugmentedState":
        z = np.asarray(z, dtype=np.float64)
        return cls(z[..., :n_x].copy(), z[..., n_x:].copy(), t)


class DopriStep(NamedTuple):
    z_next: np.ndarray
    dt_next: float
    accepted: bool
    err_norm: float


def _check_finite(arr, t, what="rhs"):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite {what} value", t)


def step_euler(rhs, t, y, dt):
    k = rhs(t, y)
    _check_finite(k, t)
    return y + dt * k


def step_rk4(rhs: Callable, t: float, y: np.ndarray, dt: float) -> np.ndarray:
    k1 = rhs(t, y)
    _check_finite(k1, t)
    k2 = rhs(t + 0.5 * dt, y + 0.5 * dt * k1)
    _check_finite(k2, t + 0.5 * dt)
    k3 = rhs(t + 0.5 * dt, y + 0.5 * dt * k2)
    _check_finite(k3, t + 0.5 * dt)
    k4 = rhs(t + dt, y + dt * k3)
    _check_finite(k4, t + dt)
    return y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


# Dormand-Prince 5(4) tableau (Hairer, Norsett & Wanner, table II.5.2)
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 5.0


def _dopri5_attempt(rhs, t, y, dt, rtol, atol, k1):
    """One trial step. Returns (y5, err_norm, k7, n_evals)."""
    ks = [k1]
    n_evals = 0
    for i in range(1, 7):
        yi = y
        for j, a in enumerate(_A[i]):
            if a != 0.0:
                yi = yi + (dt * a) * ks[j]
        ki = rhs(t + _C[i] * dt, yi)
        n_evals += 1
        _check_finite(ki, t + _C[i] * dt, "stage")
        ks.append(ki)
    # the 7th stage is evaluated at y5 (FSAL), so y5 is the last stage input
    y5 = yi
    err = dt * sum(e * k for e, k in zip(_E, ks) if e != 0.0)
    scale = atol + rtol * np.maximum(np.abs(y), np.abs(y5))
    err_norm = float(np.max(np.abs(err) / scale)) if err.size else 0.0
    return y5, err_norm, ks[6], n_evals


def _next_dt(dt, err_norm):
    if err_norm == 0.0:
        factor = MAX_FACTOR
    else:
        factor = min(MAX_FACTOR, max(MIN_FACTOR, SAFETY * err_norm ** (-0.2)))
    return dt * factor


def step_dopri5(rhs, t, y, dt_try, rtol, atol, k1=None) -> DopriStep:
    """Single embedded 5(4) step; the state is left unchanged if rejected."""
    if k1 is None:
        k1 = rhs(t, y)
        _check_finite(k1, t)
    y5, err_norm, _, _ = _dopri5_attempt(rhs, t, y, dt_try, rtol, atol, k1)
    accepted = err_norm <= 1.0
    return DopriStep(y5 if accepted else y, _next_dt(dt_try, err_norm), accepted, err_norm)


def _initial_dt(rhs, t0, y0, f0, direction, rtol, atol, span):
    # Hairer & Wanner starting-step heuristic, order 5
    scale = atol + np.abs(y0) * rtol
    d0 = float(np.sqrt(np.mean((y0 / scale) ** 2))) if y0.size else 0.0
    d1 = float(np.sqrt(np.mean((f0 / scale) ** 2))) if y0.size else 0.0
    h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    h0 = min(h0, span)
    y1 = y0 + direction * h0 * f0
    f1 = rhs(t0 + direction * h0, y1)
    d2 = float(np.sqrt(np.mean(((f1 - f0) / scale) ** 2))) / h0 if y0.size else 0.0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100 * h0, h1, span)


def integrate(rhs: Callable, y0, t0: float, t1: float, cfg: SolverConfig = SolverConfig()) -> Trajectory:
    """Solve ``dy/dt = rhs(t, y)`` from ``t0`` to ``t1``."""
    if t1 == t0:
        raise ConfigError("integration interval is empty (t1 == t0)")
    y = np.array(y0, dtype=np.float64)
    _check_finite(y, t0, "initial state")
    direction = 1.0 if t1 > t0 else -1.0
    span = abs(t1 - t0)
    times = [t0]
    states = [y.copy()]
    record = cfg.dense_record
    n_evals = 0
    n_rej = 0

    def partial():
        if record:
            return Trajectory(np.array(times), np.array(states), n_evals, n_rej)
        return Trajectory(np.array([t0, t]), np.array([states[0], y]), n_evals, n_rej)

    t = t0
    if not cfg.adaptive:
        n_steps = max(1, int(np.ceil(span / cfg.fixed_dt - 1e-9)))
        if n_steps > cfg.max_steps:
            raise BudgetError(f"{n_steps} fixed steps exceed max_steps={cfg.max_steps}", t0, partial())
        dt = (t1 - t0) / n_steps
        step = step_rk4 if cfg.method == "rk4" else step_euler
        per_step = 4 if cfg.method == "rk4" else 1
        for i in range(n_steps):
            y = step(rhs, t, y, dt)
            n_evals += per_step
            t = t1 if i == n_steps - 1 else t0 + (i + 1) * dt
            _check_finite(y, t, "state")
            if record:
                times.append(t)
                states.append(y.copy())
    else:
        f = rhs(t, y)
        n_evals += 1
        _check_finite(f, t)
        h = _initial_dt(rhs, t0, y, f, direction, cfg.rtol, cfg.atol, span)
        n_evals += 1
        n_steps = 0
        while direction * (t1 - t) > 0:
            if n_steps >= cfg.max_steps:
                raise BudgetError(f"max_steps={cfg.max_steps} exhausted", t, partial())
            last = h >= abs(t1 - t) * (1 - 1e-12)
            dt = (t1 - t) if last else direction * h
            y5, err_norm, k7, ne = _dopri5_attempt(rhs, t, y, dt, cfg.rtol, cfg.atol, f)
            n_evals += ne
            n_steps += 1
            h_new = abs(_next_dt(dt, err_norm))
            if err_norm <= 1.0:
                t = t1 if last else t + dt
                y, f = y5, k7
                if record:
                    times.append(t)
                    states.append(y.copy())
            else:
                n_rej += 1
            if h_new < 1e-14 * max(1.0, abs(t)):
                raise NumericalError("step size underflow", t)
            h = h_new
    if not record:
        times.append(t1)
        states.append(y.copy())
    return Trajectory(np.array(times), np.array(states), n_evals, n_rej)


def flow_map(rhs, x0, theta, T: float, cfg: SolverConfig = SolverConfig(), t0: float = 0.0):
    """x-component at ``t0 + T`` of the coupled solve.

    ``rhs(t, x, theta)`` returns ``(dx, dtheta)``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    n_x = x0.shape[-1]

    def joint(t, z):
        dx, dth = rhs(t, z[..., :n_x], z[..., n_x:])
        return np.concatenate([np.broadcast_to(dx, z[..., :n_x].shape),
                               np.broadcast_to(dth, z[..., n_x:].shape)], axis=-1)

    traj = integrate(joint, np.concatenate([x0, theta], axis=-1), t0, t0 + T, cfg)
    return traj.final[..., :n_x]


def write_trajectory_csv(traj: Trajectory, path, n_x: int):
    """One row per recorded time: ``t,x_0..x_{d-1},theta_0..theta_{k-1}``."""
    states = traj.states.reshape(len(traj.times), -1)
    n_theta = states.shape[1] - n_x
    header = ["t"] + [f"x_{i}" for i in range(n_x)] + [f"theta_{i}" for i in range(n_theta)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for t, row in zip(traj.times, states):
            w.writerow([fmt17(t)] + [fmt17(v) for v in row])


def read_trajectory_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    n_x = sum(1 for h in header if h.startswith("x_"))
    data = np.array([[float(v) for v in r] for r in body])
    return Trajectory(data[:, 0], data[:, 1:]), n_x
