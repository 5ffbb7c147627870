"""Command-line runner: ``ncode run|grad-check|replay|gen-data``.

Exit codes: 0 success, 1 configuration error, 2 numerical failure,
3 gradient check above tolerance.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import platform
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .errors import BudgetError, ConfigError, MigrationError, NcodeError, NumericalError, OptimizerError
from .numcore import Rng, fmt17
from .odesolve import SolverConfig, integrate
from .tasks import (
    PRESET_SOLVER,
    PRESET_TRAIN,
    TaskSpec,
    evaluate_memorize,
    fit_vdp,
    make_episode,
    preset_model,
    task_grad_check,
    train_memorize,
    vdp_observe,
    vdp_rhs,
    write_dataset_csv,
    write_episodes_json,
)
from .train import FlowModel, ModelConfig, OptState, TrainConfig, score, train_run, write_metrics_csv

FORMAT_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 1, 2, 3
GRAD_CHECK_TOL = 1e-3
FLOW_TASKS = ("reflection", "annuli", "latent_flow_ae")


@dataclass
class RunConfig:
    """Task, model, solver and training blocks plus an output directory.

    ``model`` is a :class:`ModelConfig` for the flow tasks, ``None`` for
    ``memorize`` (fixed Hebbian model) and ``{"mu_init": ...}`` for
    ``vdp_fit``. Missing blocks are filled from the task presets.
    """

    task: TaskSpec
    model: object = None
    solver: SolverConfig = field(default_factory=SolverConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    out: str = "runs/out"
    variant: str = "ncode"
    grad_check: dict = field(default_factory=dict)

    def to_dict(self):
        if isinstance(self.model, ModelConfig):
            model = self.model.to_dict()
        else:
            model = self.model
        return {"task": self.task.to_dict(), "variant": self.variant, "model": model,
                "solver": self.solver.to_dict(), "train": self.train.to_dict(), "out": self.out,
                "grad_check": dict(self.grad_check)}

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {"task", "variant", "model", "solver", "train", "out", "grad_check"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}; valid: {sorted(known)}")
        if "task" not in d:
            raise ConfigError("config needs a 'task'")
        task = TaskSpec.from_dict(d["task"])
        variant = d.get("variant", "ncode")
        name = task.name
        model = d.get("model")
        if name in FLOW_TASKS:
            model = ModelConfig.from_dict(model) if model else preset_model(name, variant)
        elif name == "vdp_fit":
            model = {"mu_init": float((model or {}).get("mu_init", 0.5 * task.vdp_mu))}
        else:
            model = None
        solver = SolverConfig.from_dict(d["solver"]) if d.get("solver") else PRESET_SOLVER[name]
        train = TrainConfig.from_dict({**PRESET_TRAIN[name], **d.get("train", {})})
        return cls(task, model, solver, train, d.get("out", f"runs/{name}"), variant, dict(d.get("grad_check", {})))

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed JSON in {path} at line {e.lineno}, column {e.colno}: {e.msg}") from None
    try:
        return RunConfig.from_dict(raw)
    except TypeError as e:
        raise ConfigError(f"bad config field: {e}") from None


def apply_overrides(cfg: RunConfig, args) -> RunConfig:
    tr = {}
    if getattr(args, "seed", None) is not None:
        tr["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        tr["epochs"] = args.epochs
    if getattr(args, "threads", None) is not None:
        tr["threads"] = args.threads
    if getattr(args, "deterministic", False):
        tr["record_time"] = False
    sv = {}
    if getattr(args, "solver", None) is not None:
        sv["method"] = args.solver
    if getattr(args, "rtol", None) is not None:
        sv["rtol"] = args.rtol
    if getattr(args, "atol", None) is not None:
        sv["atol"] = args.atol
    out = args.out if getattr(args, "out", None) else cfg.out
    return replace(cfg, train=replace(cfg.train, **tr), solver=cfg.solver.replace(**sv) if sv else cfg.solver,
                   out=out)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------
def _vec(a):
    return [fmt17(v) for v in np.asarray(a, dtype=np.float64).reshape(-1)]


@dataclass
class Checkpoint:
    config: dict
    mu: list
    head: list
    rng_state: dict
    epoch: int
    format_version: int = FORMAT_VERSION

    def to_dict(self):
        return {"format_version": self.format_version, "config": self.config, "mu": self.mu,
                "head": self.head, "rng_state": self.rng_state, "epoch": self.epoch}

    def dumps(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def save(self, path):
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path):
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"malformed checkpoint {path} at line {e.lineno}: {e.msg}") from None
        v = d.get("format_version")
        if v != FORMAT_VERSION:
            raise MigrationError(f"checkpoint format_version {v!r} is not supported (expected {FORMAT_VERSION})")
        return cls(d["config"], d["mu"], d["head"], d["rng_state"], int(d["epoch"]), v)

    @property
    def params(self):
        return np.array([float(v) for v in self.mu + self.head])


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------
def _versions():
    return {"ncode": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _log(quiet):
    if quiet:
        return None

    def log(m):
        print(f"epoch {m.epoch}: train {m.train_loss:.6g} eval {m.eval_loss:.6g} acc {m.accuracy:.4f} nfe {m.n_rhs_evals}",
              file=sys.stderr)

    return log


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_batch_trajectories(path, times, states, n_x, max_theta=64):
    """Rows ``sample,t,x_*,theta_*``; theta columns are omitted above ``max_theta``."""
    states = np.asarray(states)
    n_theta = states.shape[-1] - n_x
    keep = n_x + (n_theta if n_theta <= max_theta else 0)
    header = ["sample", "t"] + [f"x_{i}" for i in range(n_x)]
    header += [f"theta_{j}" for j in range(keep - n_x)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for b in range(states.shape[1]):
            for t, row in zip(times, states[:, b, :keep]):
                w.writerow([str(b), fmt17(t)] + [fmt17(v) for v in row])


def _sample_flow(fm: FlowModel, params, inputs, n_times=21):
    mu, _ = fm.split(params)
    x0, th0 = fm.initial_state(mu, inputs)
    n_x = fm.dyn.n_x
    times = np.linspace(0.0, fm.config.T, n_times)
    z = np.concatenate([x0, th0], axis=1)
    states = [z]

    def rhs(t, y):
        Z = y.reshape(z.shape)
        dx, dth = fm.dyn.rhs(t, Z[:, :n_x], Z[:, n_x:], mu)
        return np.concatenate([dx, dth], axis=1).reshape(-1)

    for a, b in zip(times[:-1], times[1:]):
        if b > a:
            z = integrate(rhs, z.reshape(-1), a, b, fm.solver).final.reshape(z.shape)
        states.append(z)
    return times, np.stack(states)


def cmd_run(cfg: RunConfig, quiet=False) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.dumps(), encoding="utf-8")
    tr = cfg.train
    rng = Rng(tr.seed)
    name = cfg.task.name
    log = _log(quiet)
    if name in FLOW_TASKS:
        fm = FlowModel(cfg.model, cfg.solver)
        res = train_run(cfg.task, fm, OptState(tr.optimizer, tr.lr), tr.epochs, tr.batch_size, rng,
                        threads=tr.threads, microbatch=tr.microbatch, eval_every=tr.eval_every,
                        patience=tr.patience, halve_patience=tr.halve_patience, record_time=tr.record_time, log=log)
        metrics, params = res.metrics, res.params
        mu, head = fm.split(params)
        times, states = _sample_flow(fm, params, res.data.x_eval[:8])
        _write_batch_trajectories(out / "trajectories.csv", times, states, fm.dyn.n_x)
        final_loss = metrics[-1].eval_loss if metrics else fm.evaluate(params, res.data.x_eval, res.data.y_eval)[0]
        final_acc = metrics[-1].accuracy if metrics else float("nan")
    elif name == "memorize":
        res = train_memorize(cfg.task, tr, cfg.solver, rng, log=log, record_time=tr.record_time)
        metrics, mu, head = res.metrics, res.mu, np.zeros(0)
        from .control import ControlledDynamics
        from .tasks import memorize_spec, run_episodes

        dyn = ControlledDynamics(memorize_spec(cfg.task.n_bits))
        ep = make_episode(Rng(tr.seed + 1), cfg.task.n_bits, cfg.task.n_patterns, cfg.task.n_repeats,
                          cfg.task.degradation)
        _, _, segs, _ = run_episodes(dyn, mu, [ep], cfg.task.presentation, cfg.task.query, cfg.solver)
        times = [0.0] + [t + d for t, d, _, _ in segs]
        xs = [ep.patterns[ep.order[0]][None, :]] + [x for _, _, x, _ in segs]
        _write_batch_trajectories(out / "trajectories.csv", times, np.stack(xs), cfg.task.n_bits)
        if metrics:
            final_loss, final_acc = metrics[-1].eval_loss, metrics[-1].accuracy
        else:
            deg, full, _ = evaluate_memorize(dyn, mu, cfg.task, Rng(tr.seed))
            final_loss, final_acc = deg, 1.0 - full
    elif name == "vdp_fit":
        t = cfg.task
        obs = vdp_observe(t.vdp_mu, t.vdp_x0, t.vdp_theta0, t.vdp_T, t.vdp_n_obs)
        fit = fit_vdp(obs, cfg.model["mu_init"], OptState(tr.optimizer, tr.lr), steps=tr.epochs,
                      theta0=t.vdp_theta0, cfg=cfg.solver, record_time=tr.record_time, log=log)
        metrics, mu, head = fit.metrics, np.array([fit.mu_hat]), np.zeros(0)
        fitted = vdp_observe(fit.mu_hat, t.vdp_x0, t.vdp_theta0, t.vdp_T, t.vdp_n_obs)
        _write_batch_trajectories(out / "trajectories.csv", fitted.times, fitted.states[:, None, :], 1)
        final_loss = metrics[-1].train_loss if metrics else float("nan")
        final_acc = float("nan")
    else:  # pragma: no cover - TaskSpec validates names
        raise ConfigError(f"unknown task {name}")
    write_metrics_csv(metrics, out / "metrics.csv")
    ck = Checkpoint(cfg.to_dict(), _vec(mu), _vec(head), rng.get_state(), metrics[-1].epoch if metrics else 0)
    ck.save(out / "checkpoint.json")
    summary = {
        "task": name,
        "final_loss": _num(final_loss),
        "final_accuracy": _num(final_acc),
        "total_nfe": int(sum(m.n_rhs_evals for m in metrics)),
        "wall_ms": metrics[-1].wall_ms if metrics else 0,
        "seed": tr.seed,
        "versions": _versions(),
    }
    if name == "vdp_fit":
        summary["mu_hat"] = float(mu[0])
    _write_json(out / "summary.json", summary)
    if not quiet:
        print(f"wrote {out}/metrics.csv, trajectories.csv, checkpoint.json, summary.json")
    return EXIT_OK


def _num(v):
    v = float(v)
    return v if np.isfinite(v) else None


def cmd_grad_check(cfg: RunConfig, quiet=False) -> int:
    gc = {"n_draws": 1, "batch": 3, "n_coords": 8, "h": 1e-5, "rtol": 1e-8, "atol": 1e-8, "loss": "task"}
    unknown = set(cfg.grad_check) - set(gc)
    if unknown:
        raise ConfigError(f"unknown grad_check fields: {sorted(unknown)}; valid: {sorted(gc)}")
    gc.update(cfg.grad_check)
    if gc["loss"] not in ("task", "zero"):
        raise ConfigError("grad_check.loss must be 'task' or 'zero'")
    solver = SolverConfig(method="dopri5", rtol=gc["rtol"], atol=gc["atol"])
    model = cfg.model if isinstance(cfg.model, ModelConfig) else None
    rep = task_grad_check(cfg.task, model, Rng(cfg.train.seed), gc["n_draws"], gc["batch"], gc["n_coords"],
                          gc["h"], solver, zero_loss=gc["loss"] == "zero")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    rep.to_csv(out / "gradcheck.csv")
    ok = rep.max_rel_err < GRAD_CHECK_TOL
    if not quiet:
        print(f"max_rel_err {rep.max_rel_err:.3e} over {len(rep.rows)} coordinates: {'ok' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_CHECK


def read_inputs_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ConfigError(f"{path} is empty")
    header = rows[0]
    data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64).reshape(len(rows) - 1, len(header))
    cols = {h: i for i, h in enumerate(header)}
    return header, data, cols


def cmd_replay(checkpoint, inputs, out, quiet=False, grid=41) -> int:
    ck = Checkpoint.load(checkpoint)
    cfg = RunConfig.from_dict(ck.config)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    header, data, cols = read_inputs_csv(inputs)
    name = cfg.task.name
    if name == "vdp_fit":
        if "t" not in cols:
            raise ConfigError("vdp_fit replay needs a 't' column")
        t = cfg.task
        times = np.sort(data[:, cols["t"]])
        traj = _vdp_at(ck.params[0], t, times)
        with open(out / "predictions.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "x", "theta"])
            for tt, z in zip(times, traj):
                w.writerow([fmt17(tt), fmt17(z[0]), fmt17(z[1])])
        return EXIT_OK
    if name not in FLOW_TASKS:
        raise ConfigError(f"replay supports {', '.join(FLOW_TASKS + ('vdp_fit',))}; got {name}")
    fm = FlowModel(cfg.model, cfg.solver)
    xcols = [h for h in header if h.startswith("x")]
    ycols = [h for h in header if h.startswith("y")]
    n_in = fm.config.dynamics.gamma_spec.n_in if fm.config.x0_mode == "fixed" else fm.dyn.n_x
    if len(xcols) != n_in:
        raise ConfigError(f"inputs need {n_in} x-columns, found {len(xcols)}")
    X = data[:, [cols[h] for h in xcols]]
    params = ck.params
    pred, _ = fm.predict(params, X)
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(xcols + [f"p{i}" for i in range(pred.shape[1])])
        for a, b in zip(X, pred):
            w.writerow([fmt17(v) for v in a] + [fmt17(v) for v in b])
    result = {"n": int(X.shape[0])}
    if ycols:
        Y = data[:, [cols[h] for h in ycols]]
        if fm.config.head == "softmax":
            Y = Y[:, 0].astype(int)
        loss, acc = score(fm.config.head, pred, Y)
        result.update(loss=loss, accuracy=acc)
    if name == "annuli":
        g = np.linspace(-2.5, 2.5, grid)
        G = np.array([(a, b) for b in g for a in g])
        P, _ = fm.predict(params, G)
        with open(out / "decision_grid.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x0", "x1", "p1"])
            for (a, b), p in zip(G, P[:, 1]):
                w.writerow([fmt17(a), fmt17(b), fmt17(p)])
    _write_json(out / "replay.json", result)
    if not quiet:
        print(json.dumps(result))
    return EXIT_OK


def _vdp_at(mu, task, times):
    """Planar Van der Pol state at sorted ``times`` from the task's initial point."""
    out = []
    z = np.array([task.vdp_x0, task.vdp_theta0])
    t_prev = 0.0
    cfg = SolverConfig(method="dopri5", rtol=1e-10, atol=1e-10)

    def rhs(t, y):
        return np.array(vdp_rhs(y[0], y[1], mu))

    for t in times:
        if t > t_prev:
            z = integrate(rhs, z, t_prev, float(t), cfg).final
            t_prev = float(t)
        out.append(z.copy())
    return np.array(out)


def cmd_gen_data(cfg: RunConfig, quiet=False) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    t = cfg.task
    data_rng = Rng(cfg.train.seed).split(3)[0]
    if t.name in FLOW_TASKS:
        d = t.generate(data_rng)
        write_dataset_csv(out / "train.csv", d.x_train, d.y_train)
        write_dataset_csv(out / "eval.csv", d.x_eval, d.y_eval)
        files = ["train.csv", "eval.csv"]
    elif t.name == "memorize":
        eps = [make_episode(data_rng, t.n_bits, t.n_patterns, t.n_repeats, t.degradation) for _ in range(t.n_train)]
        write_episodes_json(out / "episodes.json", eps)
        files = ["episodes.json"]
    else:
        obs = vdp_observe(t.vdp_mu, t.vdp_x0, t.vdp_theta0, t.vdp_T, t.vdp_n_obs)
        write_dataset_csv(out / "observed.csv", obs.times[:, None], obs.states[:, 0])
        files = ["observed.csv"]
    if not quiet:
        print("wrote " + ", ".join(str(out / f) for f in files))
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------
def build_parser():
    p = argparse.ArgumentParser(prog="ncode", description="Neurally-controlled ODE experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config", help="JSON run configuration")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--solver", choices=["euler", "rk4", "dopri5"])
        sp.add_argument("--rtol", type=float)
        sp.add_argument("--atol", type=float)
        sp.add_argument("--out")
        sp.add_argument("--threads", type=int, default=os.cpu_count() or 1)
        sp.add_argument("--deterministic", action="store_true",
                        help="write wall_ms as 0 so repeated runs give byte-identical files")
        sp.add_argument("--quiet", action="store_true")

    common(sub.add_parser("run", help="train and write metrics, trajectories, checkpoint and summary"))
    common(sub.add_parser("grad-check", help="adjoint vs finite-difference gradient table"))
    common(sub.add_parser("gen-data", help="dump the task data sets"))
    rp = sub.add_parser("replay", help="inference from a checkpoint on an inputs CSV")
    rp.add_argument("checkpoint")
    rp.add_argument("inputs")
    rp.add_argument("--out", default="replay")
    rp.add_argument("--quiet", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "replay":
            return cmd_replay(args.checkpoint, args.inputs, args.out, args.quiet)
        cfg = apply_overrides(load_config(args.config), args)
        if args.command == "run":
            return cmd_run(cfg, args.quiet)
        if args.command == "grad-check":
            return cmd_grad_check(cfg, args.quiet)
        return cmd_gen_data(cfg, args.quiet)
    except (NumericalError, OptimizerError, BudgetError) as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, MigrationError, NcodeError, ValueError, KeyError, OSError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
