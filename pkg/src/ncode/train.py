"""Optimizers, classification/regression heads and the mini-batch loop."""
from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .adjoint import (
    DecoderMSE,
    LossSpec,
    SoftmaxCrossEntropy,
    ZeroLoss,
    TargetMSE,
    adjoint_solve,
    backprop_through_solver,
    forward_solve,
    softmax,
)
from .control import ControlledDynamics, DynamicsSpec
from .errors import ConfigError, OptimizerError, ShapeError
from .netblocks import MlpSpec, init_params, mlp_forward
from .numcore import Rng, fmt17
from .odesolve import SolverConfig

HEADS = ("identity", "softmax", "decoder")
EVAL_CHUNK = 500


@dataclass
class OptState:
    method: str = "adam"
    lr: float = 3e-4
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0

    def __post_init__(self):
        if self.method not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.method!r}; valid: adam, sgd")

    def step(self, params, grad):
        """Update in place and return the new parameter vector."""
        new, params_new = adam_step(self, params, grad)
        self.m, self.v, self.step_count = new.m, new.v, new.step_count
        return params_new


def adam_step(opt: OptState, mu, grad):
    """One optimizer step; returns ``(new_state, new_mu)`` without mutating inputs."""
    mu = np.asarray(mu, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != mu.shape:
        raise ShapeError(f"gradient shape {grad.shape} != parameter shape {mu.shape}")
    if not np.all(np.isfinite(grad)):
        raise OptimizerError("non-finite gradient; step refused")
    if opt.method == "sgd":
        return replace(opt, step_count=opt.step_count + 1), mu - opt.lr * grad
    m = np.zeros_like(mu) if opt.m is None else opt.m
    v = np.zeros_like(mu) if opt.v is None else opt.v
    k = opt.step_count + 1
    m = opt.beta1 * m + (1 - opt.beta1) * grad
    v = opt.beta2 * v + (1 - opt.beta2) * grad * grad
    m_hat = m / (1 - opt.beta1**k)
    v_hat = v / (1 - opt.beta2**k)
    new_mu = mu - opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    return replace(opt, m=m, v=v, step_count=k), new_mu


def classify_head(xT, W, b):
    xT = np.asarray(xT, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if W.ndim != 2 or W.shape[1] != xT.shape[-1] or b.shape != (W.shape[0],):
        raise ShapeError(f"head shapes disagree: W {W.shape}, b {b.shape}, x {xT.shape}")
    return softmax(xT @ W.T + b)


def cross_entropy(probs, labels):
    probs = np.atleast_2d(probs)
    labels = np.atleast_1d(labels)
    return -np.log(probs[np.arange(len(labels)), labels])


@dataclass
class TrainMetrics:
    epoch: int
    train_loss: float
    eval_loss: float
    accuracy: float
    n_rhs_evals: int
    wall_ms: int

    def row(self):
        return [str(self.epoch), fmt17(self.train_loss), fmt17(self.eval_loss), fmt17(self.accuracy),
                str(self.n_rhs_evals), str(self.wall_ms)]


METRICS_HEADER = ["epoch", "train_loss", "eval_loss", "accuracy", "nfe", "wall_ms"]


def write_metrics_csv(metrics, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for m in metrics:
            w.writerow(m.row())


@dataclass(frozen=True)
class ModelConfig:
    """Dynamics plus readout. ``x0_mode='fixed'`` starts every solve from one
    shared Gaussian draw and feeds the input only to gamma."""

    dynamics: DynamicsSpec
    head: str = "identity"
    n_classes: int = 2
    decoder: MlpSpec | None = None
    T: float = 1.0
    x0_mode: str = "data"
    x0_seed: int = 0

    def __post_init__(self):
        if self.head not in HEADS:
            raise ConfigError(f"unknown head {self.head!r}; valid: {', '.join(HEADS)}")
        if self.head == "decoder" and self.decoder is None:
            raise ConfigError("decoder head needs a decoder spec")
        if self.x0_mode not in ("data", "fixed"):
            raise ConfigError(f"unknown x0_mode {self.x0_mode!r}; valid: data, fixed")

    def to_dict(self):
        return {
            "dynamics": self.dynamics.to_dict(),
            "head": self.head,
            "n_classes": self.n_classes,
            "decoder": self.decoder.to_dict() if self.decoder else None,
            "T": self.T,
            "x0_mode": self.x0_mode,
            "x0_seed": self.x0_seed,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model fields: {sorted(unknown)}")
        if "dynamics" not in d:
            raise ConfigError("model block needs 'dynamics'")
        d["dynamics"] = DynamicsSpec.from_dict(d["dynamics"])
        if d.get("decoder") is not None:
            d["decoder"] = MlpSpec.from_dict(d["decoder"])
        return cls(**d)


class FlowModel:
    """x -> gamma -> coupled solve on [0, T] -> head, over one flat parameter vector.

    The flat vector is the dynamics' meta-parameters followed by the head's
    parameters (softmax W, b or decoder weights).
    """

    def __init__(self, config: ModelConfig, solver: SolverConfig = SolverConfig()):
        self.config = config
        self.solver = solver
        self.dyn = ControlledDynamics(config.dynamics)
        n_x = self.dyn.n_x
        if config.head == "softmax":
            self.n_head = config.n_classes * n_x + config.n_classes
        elif config.head == "decoder":
            if config.decoder.n_in != n_x:
                raise ShapeError("decoder input must equal the state dimension")
            self.n_head = config.decoder.n_params
        else:
            self.n_head = 0
        self.zero_loss = False
        self.x0_fixed = None
        if config.x0_mode == "fixed":
            self.x0_fixed = Rng(config.x0_seed).normal(n_x)

    @property
    def n_params(self):
        return self.dyn.n_mu + self.n_head

    def split(self, params):
        return params[: self.dyn.n_mu], params[self.dyn.n_mu:]

    def init_params(self, rng: Rng):
        mu = self.dyn.init_mu(rng)
        if self.config.head == "softmax":
            C, n = self.config.n_classes, self.dyn.n_x
            s = np.sqrt(6.0 / (C + n))
            head = np.concatenate([rng.uniform(-s, s, C * n), np.zeros(C)])
        elif self.config.head == "decoder":
            head = init_params(self.config.decoder, rng)
        else:
            head = np.zeros(0)
        return np.concatenate([mu, head])

    def initial_state(self, mu, inputs):
        inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
        if self.x0_fixed is not None:
            x0 = np.broadcast_to(self.x0_fixed, (inputs.shape[0], self.dyn.n_x)).copy()
        else:
            x0 = inputs
        return x0, self.dyn.gamma(mu, inputs)

    def loss_spec(self, head, targets, weight=1.0):
        cfg = self.config
        if self.zero_loss:
            pl = ZeroLoss()
            pl.n_params = self.n_head
        elif cfg.head == "softmax":
            pl = SoftmaxCrossEntropy(targets, cfg.n_classes, self.dyn.n_x)
        elif cfg.head == "decoder":
            pl = DecoderMSE(targets, cfg.decoder)
        else:
            pl = TargetMSE(targets)
        return LossSpec("terminal", pl, weight=weight, params=head)

    def final_state(self, params, inputs):
        mu, _ = self.split(params)
        x0, th0 = self.initial_state(mu, inputs)
        T = self.config.T
        xT, thT, _, nfe = forward_solve(self.dyn, mu, x0, th0, 0.0, T, None, self.solver)
        return xT, thT, nfe

    def readout(self, head, xT):
        cfg = self.config
        if cfg.head == "softmax":
            C, n = cfg.n_classes, self.dyn.n_x
            return classify_head(xT, head[: C * n].reshape(C, n), head[C * n:])
        if cfg.head == "decoder":
            return mlp_forward(cfg.decoder, head, xT)
        return xT

    def predict(self, params, inputs):
        """Model outputs for ``inputs``, solved in fixed chunks; returns (outputs, nfe)."""
        inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
        _, head = self.split(params)
        outs, nfe = [], 0
        for s in range(0, inputs.shape[0], EVAL_CHUNK):
            xT, _, n = self.final_state(params, inputs[s:s + EVAL_CHUNK])
            outs.append(self.readout(head, xT))
            nfe += n
        return np.concatenate(outs, axis=0), nfe

    def evaluate(self, params, inputs, targets):
        """Mean loss and accuracy on a data set, plus NFE."""
        out, nfe = self.predict(params, inputs)
        return (*score(self.config.head, out, targets), nfe)

    def loss(self, params, inputs, targets, weight=None):
        """Forward-only value of :meth:`loss_and_grad`."""
        inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
        mu, head = self.split(params)
        weight = 1.0 / inputs.shape[0] if weight is None else weight
        x0, th0 = self.initial_state(mu, inputs)
        T = self.config.T
        xT, thT, _, _ = forward_solve(self.dyn, mu, x0, th0, 0.0, T, None, self.solver)
        return float(np.sum(self.loss_spec(head, targets, weight).evaluate(T, xT, thT)[0]))

    def loss_and_grad(self, params, inputs, targets, weight=None, engine="adjoint"):
        """Summed-and-weighted loss over a batch and its gradient w.r.t. all params."""
        inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
        mu, head = self.split(params)
        weight = 1.0 / inputs.shape[0] if weight is None else weight
        loss = self.loss_spec(head, targets, weight)
        x0, th0 = self.initial_state(mu, inputs)
        solve = adjoint_solve if engine == "adjoint" else backprop_through_solver
        res = solve(self.dyn, mu, (x0, th0), self.config.T, loss, self.solver)
        _, g_gamma = self.dyn.gamma_vjp(mu, inputs, res.grad_theta0)
        grad = np.concatenate([res.grad_mu + g_gamma, res.grad_params])
        return res.loss, grad, res.nfe


def score(head, outputs, targets):
    """(mean loss, accuracy). For regression heads accuracy is the share of
    examples whose squared error is below 0.01."""
    if head == "softmax":
        labels = np.asarray(targets, dtype=int)
        loss = float(np.mean(cross_entropy(outputs, labels)))
        acc = float(np.mean(np.argmax(outputs, axis=1) == labels))
        return loss, acc
    err = np.mean((outputs - np.atleast_2d(targets)) ** 2, axis=1)
    return float(np.mean(err)), float(np.mean(err < 0.01))


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray


@dataclass
class TrainConfig:
    lr: float = 3e-4
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    optimizer: str = "adam"
    threads: int = 1
    microbatch: int = 0
    eval_every: int = 1
    patience: int = 0
    halve_patience: int = 0
    record_time: bool = True

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}; valid: adam, sgd")
        if self.epochs < 0 or self.batch_size < 1 or self.threads < 1 or self.eval_every < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1, threads >= 1, eval_every >= 1 required")

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainResult:
    metrics: list
    params: np.ndarray
    opt: OptState
    data: Dataset
    steps: int = 0
    extras: dict = field(default_factory=dict)


def batch_gradient(model: FlowModel, params, x, y, microbatch=0, pool=None):
    """Mean loss and gradient over a batch, reduced over fixed microbatches
    in index order so the result does not depend on the thread count."""
    n = x.shape[0]
    size = microbatch if microbatch and microbatch < n else n
    chunks = [(s, min(s + size, n)) for s in range(0, n, size)]

    def work(c):
        s, e = c
        return model.loss_and_grad(params, x[s:e], y[s:e], weight=1.0 / n)

    results = list(pool.map(work, chunks)) if pool is not None and len(chunks) > 1 else [work(c) for c in chunks]
    loss = 0.0
    grad = np.zeros(model.n_params)
    nfe = 0
    for l, g, k in results:
        loss += l
        grad += g
        nfe += k
    return loss, grad, nfe


def train_run(task, model: FlowModel, opt: OptState, epochs: int, batch_size: int, rng: Rng,
              params=None, threads: int = 1, microbatch: int = 0, eval_every: int = 1,
              patience: int = 0, halve_patience: int = 0, record_time: bool = True,
              max_steps: int | None = None, data: Dataset | None = None, log=None) -> TrainResult:
    """Mini-batch training of a :class:`FlowModel` on a supervised task.

    ``task.generate(rng)`` must return a :class:`Dataset`. Metrics are
    reported once per epoch; with ``max_steps`` training stops after that
    many optimizer updates (the final partial epoch is still reported).
    """
    data_rng, init_rng, shuffle_rng = rng.split(3)
    if data is None:
        data = task.generate(data_rng)
    if params is None:
        params = model.init_params(init_rng)
    params = np.array(params, dtype=np.float64)
    if params.size != model.n_params:
        raise ShapeError(f"params have {params.size} entries, model needs {model.n_params}")
    metrics = []
    start = time.perf_counter()
    best, since_best, since_halve = np.inf, 0, 0
    steps = 0
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        for epoch in range(1, epochs + 1):
            order = shuffle_rng.permutation(data.x_train.shape[0])
            losses, weights, nfe = [], [], 0
            for s in range(0, len(order), batch_size):
                idx = order[s:s + batch_size]
                loss, grad, k = batch_gradient(model, params, data.x_train[idx], data.y_train[idx],
                                               microbatch, pool)
                params = opt.step(params, grad)
                losses.append(loss)
                weights.append(len(idx))
                nfe += k
                steps += 1
                if max_steps is not None and steps >= max_steps:
                    break
            train_loss = float(np.average(losses, weights=weights))
            last = epoch == epochs or (max_steps is not None and steps >= max_steps)
            evaluated = epoch % eval_every == 0 or last
            if evaluated:
                eval_loss, acc, k = model.evaluate(params, data.x_eval, data.y_eval)
                nfe += k
            else:
                eval_loss, acc = metrics[-1].eval_loss if metrics else np.nan, metrics[-1].accuracy if metrics else 0.0
            wall = int(round((time.perf_counter() - start) * 1000)) if record_time else 0
            metrics.append(TrainMetrics(epoch, train_loss, eval_loss, acc, nfe, wall))
            if log is not None:
                log(metrics[-1])
            if evaluated:
                # patience counts evaluations, not epochs
                if eval_loss < best * (1 - 1e-4):
                    best, since_best, since_halve = eval_loss, 0, 0
                else:
                    since_best += 1
                    since_halve += 1
                if halve_patience and since_halve >= halve_patience:
                    opt.lr *= 0.5
                    since_halve = 0
            if (patience and since_best >= patience) or last:
                break
    finally:
        if pool is not None:
            pool.shutdown()
    return TrainResult(metrics, params, opt, data, steps)
