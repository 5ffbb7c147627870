"""Data generators and task-specific dynamics.

Tasks: ``reflection`` (x -> -x on [-1, 1]), ``annuli`` (disk vs ring in
the plane), ``memorize`` (Hebbian fast-weight recall of binary patterns),
``vdp_fit`` (recovering the Van der Pol parameter from a trajectory) and
``latent_flow_ae`` (autoencoding through a linear latent flow).
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.interpolate import CubicSpline

from .adjoint import (
    GradCheckReport,
    LossSpec,
    TrackingLoss,
    ZeroLoss,
    adjoint_backward,
    adjoint_solve,
    compare_gradients,
    fd_gradient,
    forward_solve,
)
from .control import ControlledDynamics, Dynamics, DynamicsSpec
from .errors import BudgetError, ConfigError, NumericalError, ParameterError, ShapeError
from .netblocks import MlpSpec, activate
from .numcore import Layout, Rng, fmt17
from .odesolve import SolverConfig, Trajectory, integrate
from .train import Dataset, ModelConfig, OptState, TrainConfig, TrainMetrics

TASKS = ("reflection", "annuli", "vdp_fit", "memorize", "latent_flow_ae")


@dataclass(frozen=True)
class TaskSpec:
    name: str
    n_train: int = 256
    n_eval: int = 2000
    x_low: float = -1.0
    x_high: float = 1.0
    r1: float = 1.0
    r2: float = 1.5
    r3: float = 2.0
    n_bits: int = 100
    n_patterns: int = 3
    n_repeats: int = 2
    presentation: float = 0.5
    query: float = 0.5
    degradation: float = 0.5
    vdp_mu: float = 1.0
    vdp_x0: float = 2.0
    vdp_theta0: float = 0.0
    vdp_T: float = 5.0
    vdp_n_obs: int = 101
    data_dim: int = 16
    n_factors: int = 2
    data_seed: int = 1234

    def __post_init__(self):
        if self.name not in TASKS:
            raise ConfigError(f"unknown task {self.name!r}; valid: {', '.join(TASKS)}")
        if self.n_train < 1 or self.n_eval < 1:
            raise ConfigError("n_train and n_eval must be positive")
        if not (0 <= self.r1 < self.r2 < self.r3):
            raise ConfigError("annuli radii need 0 <= r1 < r2 < r3")
        if self.name == "memorize":
            if self.n_bits % 2:
                raise ConfigError("memorize needs an even number of bits")
            if not 0.0 <= self.degradation <= 1.0:
                raise ConfigError("degradation must lie in [0, 1]")
        if self.name == "vdp_fit" and self.vdp_mu == 0:
            raise ParameterError("Van der Pol mu must be non-zero")

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        if isinstance(d, str):
            return cls(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown task fields: {sorted(unknown)}")
        if "name" not in d:
            raise ConfigError("task block needs 'name'")
        return cls(**d)

    def generate(self, rng: Rng) -> Dataset:
        """Train/eval split for the supervised tasks."""
        if self.name == "reflection":
            xt, yt = gen_reflection(self.n_train, rng, self.x_low, self.x_high)
            xe, ye = gen_reflection(self.n_eval, rng, self.x_low, self.x_high)
        elif self.name == "annuli":
            xt, yt = gen_annuli(self.n_train // 2, rng, self.r1, self.r2, self.r3)
            xe, ye = gen_annuli(self.n_eval // 2, rng, self.r1, self.r2, self.r3)
        elif self.name == "latent_flow_ae":
            xt = gen_factor_data(self.n_train, rng, self.data_dim, self.n_factors, self.data_seed)
            xe = gen_factor_data(self.n_eval, rng, self.data_dim, self.n_factors, self.data_seed)
            yt, ye = xt, xe
        else:
            raise ConfigError(f"task {self.name} has no static data set")
        return Dataset(xt, yt, xe, ye)


# --------------------------------------------------------------------------
# supervised data
# --------------------------------------------------------------------------
def gen_reflection(n_points, rng: Rng, low=-1.0, high=1.0):
    """Inputs uniform on [low, high], targets -x; both shaped (n, 1)."""
    if n_points < 1:
        raise ParameterError("n_points must be >= 1")
    x = rng.uniform(low, high, n_points)[:, None]
    return x, -x


def gen_annuli(n_per_class, rng: Rng, r1=1.0, r2=1.5, r3=2.0):
    """Class 0 uniform on the disk of radius r1, class 1 on the ring [r2, r3]."""
    if not (0 <= r1 < r2 < r3):
        raise ParameterError("need 0 <= r1 < r2 < r3")
    if n_per_class < 1:
        raise ParameterError("n_per_class must be >= 1")
    rad0 = r1 * np.sqrt(rng.uniform(0.0, 1.0, n_per_class))
    rad1 = np.sqrt(rng.uniform(r2 * r2, r3 * r3, n_per_class))
    ang = rng.uniform(0.0, 2 * np.pi, 2 * n_per_class)
    rad = np.concatenate([rad0, rad1])
    X = np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)
    y = np.concatenate([np.zeros(n_per_class, int), np.ones(n_per_class, int)])
    return X, y


def best_linear_accuracy(X, y, n_angles=360):
    """Best accuracy of any half-plane classifier, by sweeping directions and thresholds."""
    best = 0.0
    for a in np.linspace(0, np.pi, n_angles, endpoint=False):
        s = X @ np.array([np.cos(a), np.sin(a)])
        order = np.argsort(s)
        ys = y[order]
        # predict 1 above the cut: correct = zeros below + ones above
        zeros_below = np.concatenate([[0], np.cumsum(ys == 0)])
        ones_above = np.concatenate([[0], np.cumsum((ys == 1)[::-1])])[::-1]
        acc = (zeros_below + ones_above) / len(y)
        best = max(best, acc.max(), (1 - acc).max())
    return float(best)


def gen_factor_data(n, rng: Rng, data_dim=16, n_factors=2, map_seed=1234):
    """Vectors u = A z + c with z ~ U(-1, 1)^k and a fixed random (A, c)."""
    A, c = factor_map(data_dim, n_factors, map_seed)
    z = rng.uniform(-1.0, 1.0, (n, n_factors))
    return z @ A.T + c


def factor_map(data_dim=16, n_factors=2, map_seed=1234):
    r = Rng(map_seed)
    A = r.normal((data_dim, n_factors)) / np.sqrt(n_factors)
    c = 0.1 * r.normal(data_dim)
    return A, c


def write_dataset_csv(path, x, y):
    x = np.atleast_2d(x)
    y = np.asarray(y)
    y2 = y.reshape(len(y), -1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{i}" for i in range(x.shape[1])] + [f"y{i}" for i in range(y2.shape[1])])
        for a, b in zip(x, y2):
            w.writerow([fmt17(v) for v in a] + [fmt17(v) if y.dtype.kind == "f" else str(int(v)) for v in b])


# --------------------------------------------------------------------------
# Hebbian memorization
# --------------------------------------------------------------------------
def hebbian_rhs(x, theta, mu, activation="tanh"):
    """(act(theta x), mu * x x^T) for one state or a batch."""
    x = np.asarray(x, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    m = x.shape[-1]
    if theta.shape[-2:] != (m, m) or mu.shape != (m, m):
        raise ShapeError(f"theta and mu must be {m}x{m}, got {theta.shape[-2:]} and {mu.shape}")
    dx = activate(activation, np.einsum("...ij,...j->...i", theta, x))
    dth = mu * (x[..., :, None] * x[..., None, :])
    return dx, dth


@dataclass
class Episode:
    patterns: np.ndarray
    order: np.ndarray
    query_index: int
    degraded: np.ndarray
    target: np.ndarray

    @property
    def n_bits(self):
        return self.patterns.shape[1]

    def to_dict(self):
        return {"patterns": self.patterns.astype(int).tolist(), "order": [int(i) for i in self.order],
                "query_index": int(self.query_index), "degraded": self.degraded.astype(int).tolist(),
                "target": self.target.astype(int).tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["patterns"], float), np.array(d["order"], int), int(d["query_index"]),
                   np.array(d["degraded"], float), np.array(d["target"], float))


def make_episode(rng: Rng, n_bits=100, n_patterns=3, n_repeats=2, degradation=0.5) -> Episode:
    """Random +-1 patterns shown ``n_repeats`` times each in shuffled order,
    then one of them with ``round(degradation * n)`` bits zeroed."""
    if n_bits % 2:
        raise ParameterError("n_bits must be even")
    P = rng.choice(np.array([-1.0, 1.0]), size=(n_patterns, n_bits))
    order = rng.permutation(np.repeat(np.arange(n_patterns), n_repeats))
    q = int(rng.integers(0, n_patterns))
    target = P[q].copy()
    degraded = target.copy()
    k = int(round(degradation * n_bits))
    if k:
        degraded[rng.choice(n_bits, size=k, replace=False)] = 0.0
    return Episode(P, order, q, degraded, target)


def memorize_spec(n_bits=100) -> DynamicsSpec:
    return DynamicsSpec(n_bits, "matmul", f_activation="tanh", g_mode="hebbian", gamma_mode="constant")


def _stimuli(episodes):
    """(n_segments, B, n) stack of reset values: presentations then the query."""
    segs = [np.stack([ep.patterns[ep.order[k]] for ep in episodes]) for k in range(len(episodes[0].order))]
    segs.append(np.stack([ep.degraded for ep in episodes]))
    return segs


def _durations(episodes, presentation, query):
    return [presentation] * len(episodes[0].order) + [query]


def run_episodes(dyn: ControlledDynamics, mu, episodes, presentation=0.5, query=0.5,
                 cfg: SolverConfig = SolverConfig(method="rk4", fixed_dt=0.05)):
    """Piecewise solve for a batch of episodes. x is reset to each stimulus;
    theta carries over. Returns (x_end, theta_end, segments, nfe) where each
    segment is ``(t_start, duration, x_end, theta_end)``."""
    stims = _stimuli(episodes)
    durs = _durations(episodes, presentation, query)
    th = dyn.gamma(mu, stims[0])
    t = 0.0
    segments, nfe = [], 0
    for s, d in zip(stims, durs):
        x, th, _, k = forward_solve(dyn, mu, s, th, t, t + d, None, cfg)
        segments.append((t, d, x, th))
        t += d
        nfe += k
    return x, th, segments, nfe


def episode_errors(x_end, episodes):
    """Per-episode (error among degraded bits, error over all bits) of sign(x)."""
    target = np.stack([ep.target for ep in episodes])
    mask = np.stack([ep.degraded == 0 for ep in episodes])
    wrong = np.sign(x_end) != target
    all_rate = wrong.mean(axis=1)
    n_deg = mask.sum(axis=1)
    deg_rate = np.where(n_deg > 0, (wrong & mask).sum(axis=1) / np.maximum(n_deg, 1), 0.0)
    return deg_rate, all_rate


def run_episode(episode: Episode, theta0, mu, durations=(0.5, 0.5),
                cfg: SolverConfig = SolverConfig(method="rk4", fixed_dt=0.05)):
    """One episode from weights ``theta0`` (n x n) and Hebbian gain ``mu`` (n x n).

    Returns ``(reconstruction, error_degraded, error_all)``; the reconstruction
    is sign(x) at the end of the query.
    """
    n = episode.n_bits
    theta0 = np.asarray(theta0, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    if theta0.shape != (n, n) or mu.shape != (n, n):
        raise ShapeError(f"theta0 and mu must be {n}x{n}")
    dyn = ControlledDynamics(memorize_spec(n))
    flat = memorize_mu(dyn, theta0, mu)
    x, _, _, _ = run_episodes(dyn, flat, [episode], durations[0], durations[1], cfg)
    deg, full = episode_errors(x, [episode])
    return np.sign(x[0]), float(deg[0]), float(full[0])


def memorize_mu(dyn, theta0, gain):
    flat = np.zeros(dyn.n_mu)
    flat[dyn.layout.slice("gamma")] = np.asarray(theta0).reshape(-1)
    flat[dyn.layout.slice("g")] = np.asarray(gain).reshape(-1)
    return flat


def episode_loss_and_grad(dyn: ControlledDynamics, mu, episodes, presentation=0.5, query=0.5,
                          cfg: SolverConfig = SolverConfig(method="rk4", fixed_dt=0.05)):
    """Mean-over-episodes MSE of x at the end of the query and its mu gradient.

    The backward pass walks the segments in reverse from their stored end
    states. At each reset the x-adjoint restarts from zero (the pre-reset
    state has no later influence) while the theta-adjoint carries across.
    """
    B = len(episodes)
    n = dyn.n_x
    x_end, th_end, segments, nfe = run_episodes(dyn, mu, episodes, presentation, query, cfg)
    target = np.stack([ep.target for ep in episodes])
    d = x_end - target
    loss = float(np.sum(d * d) / (n * B))
    ax = 2.0 * d / (n * B)
    ath = np.zeros_like(th_end)
    grad = np.zeros(dyn.n_mu)
    for t0, dur, x1, th1 in reversed(segments):
        _, _, _, ath, gmu, _, k = adjoint_backward(dyn, mu, t0 + dur, t0, x1, th1, ax, ath, None, cfg)
        grad += gmu
        nfe += k
        ax = np.zeros_like(ax)
    _, g_gamma = dyn.gamma_vjp(mu, x_end, ath)
    return loss, grad + g_gamma, nfe


@dataclass
class MemorizeResult:
    metrics: list
    mu: np.ndarray
    eval_error: float = float("nan")
    eval_error_all: float = float("nan")


def evaluate_memorize(dyn, mu, task: TaskSpec, rng: Rng, n_episodes=200, cfg=None, chunk=50):
    """Mean (error among degraded bits, error over all bits) on fresh episodes."""
    cfg = cfg or SolverConfig(method="rk4", fixed_dt=0.05)
    eps = [make_episode(rng, task.n_bits, task.n_patterns, task.n_repeats, task.degradation)
           for _ in range(n_episodes)]
    deg, full, nfe = [], [], 0
    for s in range(0, n_episodes, chunk):
        x, _, _, k = run_episodes(dyn, mu, eps[s:s + chunk], task.presentation, task.query, cfg)
        a, b = episode_errors(x, eps[s:s + chunk])
        deg.append(a)
        full.append(b)
        nfe += k
    return float(np.mean(np.concatenate(deg))), float(np.mean(np.concatenate(full))), nfe


def train_memorize(task: TaskSpec, train: TrainConfig, cfg: SolverConfig | None = None, rng: Rng | None = None,
                   mu=None, n_eval=200, log=None, record_time=True) -> MemorizeResult:
    """Adam on fresh episodes: ``train.epochs`` epochs of ``task.n_train`` episodes each.

    Accuracy in the metrics is 1 - (error over all bits) on ``n_eval`` held-out episodes.
    """
    import time

    cfg = cfg or SolverConfig(method="rk4", fixed_dt=0.05)
    rng = rng or Rng(train.seed)
    init_rng, ep_rng, eval_rng = rng.split(3)
    dyn = ControlledDynamics(memorize_spec(task.n_bits))
    mu = dyn.init_mu(init_rng) if mu is None else np.array(mu, dtype=np.float64)
    opt = OptState(train.optimizer, train.lr)
    eval_eps_rng = eval_rng.split(1)[0]
    metrics = []
    start = time.perf_counter()
    for epoch in range(1, train.epochs + 1):
        losses, nfe = [], 0
        for s in range(0, task.n_train, train.batch_size):
            b = min(train.batch_size, task.n_train - s)
            eps = [make_episode(ep_rng, task.n_bits, task.n_patterns, task.n_repeats, task.degradation)
                   for _ in range(b)]
            loss, grad, k = episode_loss_and_grad(dyn, mu, eps, task.presentation, task.query, cfg)
            mu = opt.step(mu, grad)
            losses.append(loss)
            nfe += k
        last = epoch == train.epochs
        if epoch % train.eval_every == 0 or last:
            deg, full, k = evaluate_memorize(dyn, mu, task, Rng.from_state(eval_eps_rng.get_state()), n_eval, cfg)
            nfe += k
            acc, eval_loss = 1.0 - full, deg
        else:
            acc, eval_loss = metrics[-1].accuracy if metrics else 0.0, metrics[-1].eval_loss if metrics else np.nan
        wall = int(round((time.perf_counter() - start) * 1000)) if record_time else 0
        metrics.append(TrainMetrics(epoch, float(np.mean(losses)), eval_loss, acc, nfe, wall))
        if log is not None:
            log(metrics[-1])
    res = MemorizeResult(metrics, mu)
    if metrics:
        res.eval_error = metrics[-1].eval_loss
        res.eval_error_all = 1.0 - metrics[-1].accuracy
    return res


def write_episodes_json(path, episodes):
    with open(path, "w") as fh:
        json.dump([ep.to_dict() for ep in episodes], fh, indent=1)
        fh.write("\n")


def read_episodes_json(path):
    with open(path) as fh:
        return [Episode.from_dict(d) for d in json.load(fh)]


# --------------------------------------------------------------------------
# Van der Pol
# --------------------------------------------------------------------------
def vdp_rhs(x, theta, mu):
    """Lienard form: (mu (x - x^3/3 - theta), x / mu)."""
    if np.any(np.asarray(mu) == 0):
        raise ParameterError("Van der Pol mu must be non-zero")
    x = np.asarray(x, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    return mu * (x - x**3 / 3.0 - theta), x / mu


class VanDerPol(Dynamics):
    """Planar Van der Pol system with the scalar mu as the only meta-parameter.

    theta(0) is supplied directly; gamma is the constant ``theta0``.
    """

    n_x = 1
    n_theta = 1

    def __init__(self, theta0=0.0):
        self.theta0 = float(theta0)
        self.layout = Layout.of(("mu", (1,)))

    def rhs(self, t, x, theta, mu):
        return vdp_rhs(x, theta, mu[0])

    def vjp(self, t, x, theta, mu, ax, atheta):
        m = mu[0]
        if m == 0:
            raise ParameterError("Van der Pol mu must be non-zero")
        vx = ax * m * (1.0 - x * x) + atheta / m
        vth = -m * ax
        vmu = np.array([np.sum(ax * (x - x**3 / 3.0 - theta)) - np.sum(atheta * x) / (m * m)])
        return vx, vth, vmu

    def jacobian(self, t, x, theta, mu):
        m = mu[0]
        x = float(np.asarray(x).reshape(-1)[0])
        th = float(np.asarray(theta).reshape(-1)[0])
        J = np.array([[m * (1 - x * x), -m], [1.0 / m, 0.0]])
        J_mu = np.array([[x - x**3 / 3 - th], [-x / (m * m)]])
        return J, J_mu

    def gamma(self, mu, x0):
        x0 = np.atleast_2d(x0)
        return np.full((x0.shape[0], 1), self.theta0)

    def gamma_vjp(self, mu, x0, atheta0):
        return np.zeros_like(np.atleast_2d(x0)), np.zeros(1)

    def init_mu(self, rng):
        return np.ones(1)


def vdp_observe(mu, x0=2.0, theta0=0.0, T=10.0, n_obs=101,
                cfg: SolverConfig = SolverConfig(method="dopri5", rtol=1e-10, atol=1e-10)) -> Trajectory:
    """Sample the planar system at ``n_obs`` evenly spaced times on [0, T]."""
    if mu == 0:
        raise ParameterError("Van der Pol mu must be non-zero")
    times = np.linspace(0.0, T, n_obs)

    def rhs(t, z):
        dx, dth = vdp_rhs(z[0], z[1], mu)
        return np.array([dx, dth])

    z = np.array([x0, theta0], dtype=np.float64)
    states, nfe = [z.copy()], 0
    for a, b in zip(times[:-1], times[1:]):
        tr = integrate(rhs, z, a, b, cfg)
        z = tr.final
        nfe += tr.n_rhs_evals
        states.append(z.copy())
    return Trajectory(times, np.array(states), nfe, 0)


@dataclass
class VdpFit:
    mu_hat: float
    history: list = field(default_factory=list)
    metrics: list = field(default_factory=list)


def vdp_tracking_loss(observed: Trajectory):
    """Integrated squared error against a cubic spline through the observed x(t)."""
    spline = CubicSpline(observed.times, np.asarray(observed.states)[:, 0])
    return LossSpec("integrated", TrackingLoss(lambda t: np.array([spline(t)])))


def vdp_loss_and_grad(mu, observed: Trajectory, theta0=0.0,
                      cfg: SolverConfig = SolverConfig(method="dopri5", rtol=1e-7, atol=1e-7), loss=None):
    loss = loss or vdp_tracking_loss(observed)
    dyn = VanDerPol(theta0)
    x0 = np.array([[float(np.asarray(observed.states)[0, 0])]])
    T = float(observed.times[-1] - observed.times[0])
    res = adjoint_solve(dyn, np.array([float(mu)]), (x0, np.array([[theta0]])), T, loss, cfg,
                        t0=float(observed.times[0]))
    return res.loss, float(res.grad_mu[0]), res.nfe


def fit_vdp(observed: Trajectory, mu_init, opt: OptState | None = None, steps=300, theta0=0.0,
            cfg: SolverConfig = SolverConfig(method="dopri5", rtol=1e-7, atol=1e-7), tol=1e-6,
            record_time=True, log=None) -> VdpFit:
    """Gradient descent on mu against the integrated tracking loss.

    Stops early once the Adam update is below ``tol``; raises BudgetError
    if mu leaves (0, 100) or the loss becomes non-finite.
    """
    import time

    opt = opt or OptState("adam", 0.05)
    loss_spec = vdp_tracking_loss(observed)
    mu = np.array([float(mu_init)])
    fit = VdpFit(float(mu[0]))
    start = time.perf_counter()
    for k in range(1, steps + 1):
        try:
            loss, g, nfe = vdp_loss_and_grad(mu[0], observed, theta0, cfg, loss_spec)
        except NumericalError as exc:
            raise BudgetError(f"Van der Pol fit diverged: {exc}", k, partial=fit) from exc
        if not np.isfinite(loss):
            raise BudgetError("Van der Pol fit diverged", k, partial=fit)
        new = opt.step(mu, np.array([g]))
        fit.history.append((float(mu[0]), float(loss), float(g)))
        wall = int(round((time.perf_counter() - start) * 1000)) if record_time else 0
        fit.metrics.append(TrainMetrics(k, float(loss), abs(float(g)), 0.0, nfe, wall))
        if log is not None:
            log(fit.metrics[-1])
        step = abs(new[0] - mu[0])
        mu = new
        if not 0.0 < mu[0] < 100.0:
            raise BudgetError(f"Van der Pol fit left the admissible range (mu={mu[0]:.3g})", k, partial=fit)
        if step < tol:
            break
    fit.mu_hat = float(mu[0])
    return fit


# --------------------------------------------------------------------------
# latent linear flow
# --------------------------------------------------------------------------
def two_per_row_mask(m):
    """Entries (i, i) and (i, i+1 mod m) of each row."""
    if m == 1:
        return ((0, 0),)
    return tuple(p for i in range(m) for p in ((i, i), (i, (i + 1) % m)))


def latent_spec(m, data_dim=16, hidden=32, sparse=False) -> DynamicsSpec:
    mask = two_per_row_mask(m) if sparse else None
    n_theta = len(mask) if mask else m * m
    return DynamicsSpec(m, "matmul", f_activation="identity", mask=mask, g_mode="none", gamma_mode="mlp",
                        gamma_spec=MlpSpec((data_dim, hidden, n_theta)))


def latent_flow_encode(theta, x0, T, cfg: SolverConfig = SolverConfig(method="dopri5", rtol=1e-10, atol=1e-10),
                       mask=None):
    """x(T) of dx/dt = theta x with theta held constant.

    ``theta`` is an m x m matrix (or the masked entries when ``mask`` is given);
    single or batched.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    m = x0.shape[-1]
    single = x0.ndim == 1
    theta = np.asarray(theta, dtype=np.float64)
    flat = theta.reshape(theta.shape[:-2] + (-1,)) if mask is None and theta.shape[-2:] == (m, m) else theta
    n_theta = len(mask) if mask is not None else m * m
    if flat.shape[-1] != n_theta:
        raise ShapeError(f"theta must be {m}x{m} or match the mask")
    spec = DynamicsSpec(m, "matmul", f_activation="identity", mask=mask, gamma_mode="constant")
    dyn = ControlledDynamics(spec)
    X = np.atleast_2d(x0)
    TH = np.broadcast_to(np.atleast_2d(flat), (X.shape[0], n_theta)).copy()
    xT, _, _, _ = forward_solve(dyn, np.zeros(dyn.n_mu), X, TH, 0.0, float(T), None, cfg)
    return xT[0] if single else xT


def latent_model(task: TaskSpec, m=None, sparse=False, T=1.0, hidden=32, x0_seed=7) -> ModelConfig:
    m = m or task.n_factors
    return ModelConfig(latent_spec(m, task.data_dim, hidden, sparse), head="decoder",
                       decoder=MlpSpec((m, hidden, task.data_dim), "tanh", "identity"),
                       T=T, x0_mode="fixed", x0_seed=x0_seed)


def toy_autoencode(task: TaskSpec, train: TrainConfig, model: ModelConfig | None = None,
                   solver: SolverConfig = SolverConfig(method="rk4", fixed_dt=0.1), log=None):
    """Train encoder (gamma) and decoder end to end through the latent flow.

    Returns the :class:`TrainResult`; the metrics carry the MSE curve.
    """
    from .train import FlowModel, train_run

    model = model or latent_model(task)
    fm = FlowModel(model, solver)
    return train_run(task, fm, OptState(train.optimizer, train.lr), train.epochs, train.batch_size,
                     Rng(train.seed), threads=train.threads, microbatch=train.microbatch,
                     eval_every=train.eval_every, patience=train.patience, halve_patience=train.halve_patience,
                     record_time=train.record_time, log=log)


# --------------------------------------------------------------------------
# presets
# --------------------------------------------------------------------------
def preset_model(task: str, variant: str = "ncode") -> ModelConfig:
    """Default model per task. Variants: reflection {ncode, node, closed};
    annuli {ncode, node}; latent_flow_ae {ncode (dense), sparse}."""
    if task == "reflection":
        if variant == "ncode":
            dyn = DynamicsSpec(1, "mlp", MlpSpec((1, 1), "tanh", "identity"), gamma_mode="mlp",
                               gamma_spec=MlpSpec((1, 16, 2)))
        elif variant == "node":
            dyn = DynamicsSpec(1, "mlp", MlpSpec((1, 16, 1)), gamma_mode="constant")
        elif variant == "closed":
            dyn = DynamicsSpec(1, "mlp", MlpSpec((1, 1), "tanh", "identity"), g_mode="mlp",
                               g_spec=MlpSpec((3, 16, 2)), gamma_mode="constant")
        else:
            raise ConfigError(f"unknown reflection variant {variant!r}; valid: ncode, node, closed")
        return ModelConfig(dyn, head="identity", T=1.0)
    if task == "annuli":
        if variant == "ncode":
            dyn = DynamicsSpec(2, "mlp", MlpSpec((2, 2), "tanh", "identity"), gamma_mode="mlp",
                               gamma_spec=MlpSpec((2, 32, 6)))
        elif variant == "node":
            dyn = DynamicsSpec(2, "mlp", MlpSpec((2, 16, 2)), gamma_mode="constant")
        else:
            raise ConfigError(f"unknown annuli variant {variant!r}; valid: ncode, node")
        return ModelConfig(dyn, head="softmax", n_classes=2, T=1.0)
    if task == "latent_flow_ae":
        if variant not in ("ncode", "sparse"):
            raise ConfigError(f"unknown latent_flow_ae variant {variant!r}; valid: ncode, sparse")
        return latent_model(TaskSpec("latent_flow_ae"), sparse=variant == "sparse")
    if task == "memorize":
        return ModelConfig(memorize_spec(TaskSpec("memorize").n_bits), head="identity")
    raise ConfigError(f"task {task!r} has no model preset")


PRESET_TRAIN = {
    "reflection": dict(lr=1e-2, epochs=500, batch_size=64, eval_every=50),
    "annuli": dict(lr=1e-2, epochs=10, batch_size=64),
    "latent_flow_ae": dict(lr=1e-2, epochs=60, batch_size=64, eval_every=5, halve_patience=2),
    "memorize": dict(lr=1e-2, epochs=10, batch_size=20),
    "vdp_fit": dict(lr=0.05, epochs=300, batch_size=1),
}

PRESET_SOLVER = {
    "reflection": SolverConfig(method="rk4", fixed_dt=0.1),
    "annuli": SolverConfig(method="rk4", fixed_dt=0.1),
    "latent_flow_ae": SolverConfig(method="rk4", fixed_dt=0.1),
    "memorize": SolverConfig(method="rk4", fixed_dt=0.05),
    "vdp_fit": SolverConfig(method="dopri5", rtol=1e-7, atol=1e-7),
}


# --------------------------------------------------------------------------
# gradient checks per task
# --------------------------------------------------------------------------
GRAD_CHECK_SOLVER = SolverConfig(method="dopri5", rtol=1e-8, atol=1e-8)


def task_grad_check(task: TaskSpec, model: ModelConfig | None, rng: Rng, n_draws=1, batch=3, n_coords=8,
                    h=1e-5, cfg: SolverConfig = GRAD_CHECK_SOLVER, zero_loss=False, floor=1e-7,
                    perturb=0.1) -> GradCheckReport:
    """Adjoint gradient vs central differences at ``n_draws`` random parameter draws.

    Each draw perturbs a fresh initialization by N(0, perturb^2) and checks
    up to ``n_coords`` random coordinates. Rows are labelled ``draw:coord``.
    """
    rows = []
    for d in range(n_draws):
        r = rng.split(1)[0] if d == 0 else r.split(1)[0]
        grad, value_fn, params = _grad_check_problem(task, model, r, batch, cfg, zero_loss, perturb)
        coords = np.sort(r.choice(params.size, size=min(n_coords, params.size), replace=False))
        fd = fd_gradient(value_fn, params, h, [int(c) for c in coords])
        rep = compare_gradients(grad, fd, floor)
        rows += [(f"{d}:{c}", a, f, e) for c, a, f, e in rep.rows]
    rows.sort(key=lambda row: -row[3])
    return GradCheckReport(rows, max((row[3] for row in rows), default=0.0))


def _grad_check_problem(task, model, r: Rng, batch, cfg, zero_loss, perturb):
    if task.name == "vdp_fit":
        obs = vdp_observe(task.vdp_mu, task.vdp_x0, task.vdp_theta0, task.vdp_T, task.vdp_n_obs)
        loss = vdp_tracking_loss(obs)
        if zero_loss:
            loss = LossSpec("terminal", ZeroLoss())
        mu = np.array([r.uniform(0.5, 3.0)])

        def value(m):
            return vdp_loss_and_grad(m[0], obs, task.vdp_theta0, cfg, loss)[0]

        return np.array([vdp_loss_and_grad(mu[0], obs, task.vdp_theta0, cfg, loss)[1]]), value, mu
    if task.name == "memorize":
        dyn = ControlledDynamics(memorize_spec(task.n_bits))
        mu = dyn.init_mu(r)
        mu[dyn.layout.slice("g")] = r.normal(dyn.n_theta, 0.0, perturb * 3)
        eps = [make_episode(r, task.n_bits, task.n_patterns, task.n_repeats, task.degradation)
               for _ in range(batch)]
        scale = 0.0 if zero_loss else 1.0

        def value(m):
            return scale * episode_loss_and_grad(dyn, m, eps, task.presentation, task.query, cfg)[0]

        return scale * episode_loss_and_grad(dyn, mu, eps, task.presentation, task.query, cfg)[1], value, mu
    from .train import FlowModel

    fm = FlowModel(model, cfg)
    fm.zero_loss = zero_loss
    data = replace(task, n_train=max(batch, 2), n_eval=2).generate(r)
    x, y = data.x_train[:batch], data.y_train[:batch]
    params = fm.init_params(r) + r.normal(fm.n_params, 0.0, perturb)
    _, grad, _ = fm.loss_and_grad(params, x, y)
    return grad, (lambda p: fm.loss(p, x, y)), params
