"""One test per acceptance criterion, each printing a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -s`` to see the lines as they come;
they are repeated in the session summary either way.
"""
import json
import time

import numpy as np
import pytest

from conftest import report
from ncode.adjoint import LossSpec, SquaredState, adjoint_solve, backprop_through_solver
from ncode.cli import main
from ncode.control import ControlledDynamics, DynamicsSpec
from ncode.netblocks import MlpSpec
from ncode.numcore import Rng
from ncode.odesolve import SolverConfig, flow_map, integrate
from ncode.tasks import (
    PRESET_SOLVER,
    TaskSpec,
    evaluate_memorize,
    fit_vdp,
    latent_flow_encode,
    latent_model,
    memorize_spec,
    preset_model,
    task_grad_check,
    toy_autoencode,
    train_memorize,
    vdp_observe,
)
from ncode.train import FlowModel, OptState, TrainConfig, train_run

pytestmark = pytest.mark.slow

TIGHT = SolverConfig(method="dopri5", rtol=1e-10, atol=1e-10)
SEEDS = range(5)


def _timed(fn):
    t = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t


# ---------------------------------------------------------------- 1
GRAD_SPECS = [
    ("reflection", "ncode", {}), ("reflection", "node", {}), ("reflection", "closed", {}),
    ("annuli", "ncode", {}), ("annuli", "node", {}),
    ("latent_flow_ae", "ncode", {}), ("latent_flow_ae", "sparse", {}),
    ("memorize", None, {"n_bits": 4, "n_patterns": 2}),
    ("vdp_fit", None, {"vdp_T": 3.0}),
]


def test_1_adjoint_matches_finite_differences():
    cfg = SolverConfig(method="dopri5", rtol=1e-8, atol=1e-8)
    worst, parts = 0.0, []
    t0 = time.perf_counter()
    for name, variant, kw in GRAD_SPECS:
        model = preset_model(name, variant) if variant else None
        rep = task_grad_check(TaskSpec(name, **kw), model, Rng(11), n_draws=100, batch=2, n_coords=4, cfg=cfg)
        worst = max(worst, rep.max_rel_err)
        parts.append(f"{name}/{variant or '-'} {rep.max_rel_err:.1e}")
    dt = time.perf_counter() - t0
    ok = worst < 1e-3 and dt < 300
    assert report(1, ok, f"max rel err {worst:.2e} over {len(GRAD_SPECS)} specs x 100 draws, {dt:.0f}s "
                         f"({'; '.join(parts)})")


# ---------------------------------------------------------------- 2
def random_spec(r: Rng):
    n = int(r.integers(1, 4))
    f_kind = ["mlp", "matmul", "theta", "data_control"][int(r.integers(0, 4))]
    f_spec = None
    if f_kind == "mlp":
        f_spec = MlpSpec((n, int(r.integers(2, 5)), n)) if r.uniform() < 0.5 else MlpSpec((n, n), "tanh", "identity")
    elif f_kind == "data_control":
        f_spec = MlpSpec((n + int(r.integers(1, 3)), int(r.integers(2, 5)), n))
    act = ["tanh", "sigmoid", "identity"][int(r.integers(0, 3))]
    base = DynamicsSpec(n, f_kind, f_spec, f_activation=act)
    n_th = base.n_theta
    g_modes = ["none", "mlp"] + (["hebbian"] if f_kind == "matmul" else []) + (["linear_x"] if n_th == n else [])
    g_mode = g_modes[int(r.integers(0, len(g_modes)))]
    g_spec = MlpSpec((n_th + n, int(r.integers(2, 5)), n_th)) if g_mode == "mlp" else None
    gammas = ["constant", "mlp"] + (["identity"] if n_th == n else [])
    gamma = gammas[int(r.integers(0, len(gammas)))]
    gamma_spec = MlpSpec((n, int(r.integers(2, 5)), n_th)) if gamma == "mlp" else None
    return DynamicsSpec(n, f_kind, f_spec, f_activation=act, g_mode=g_mode, g_spec=g_spec,
                        g_scale=float(r.uniform(-1, 1)), gamma_mode=gamma, gamma_spec=gamma_spec)


def test_2_dual_engine_agreement():
    r = Rng(2024)
    cfg = SolverConfig(method="rk4", fixed_dt=1e-3)
    worst, kinds = 0.0, set()
    t0 = time.perf_counter()
    for k in range(20):
        spec = random_spec(r)
        kinds.add((spec.f_kind, spec.g_mode))
        dyn = ControlledDynamics(spec)
        mu = dyn.init_mu(r) + r.normal(dyn.n_mu, 0.0, 0.2)
        x0 = r.normal((2, spec.n_x))
        z0 = (x0, dyn.gamma(mu, x0))
        loss = LossSpec("terminal" if k % 2 else "integrated", SquaredState())
        a = adjoint_solve(dyn, mu, z0, 1.0, loss, cfg)
        b = backprop_through_solver(dyn, mu, z0, 1.0, loss, cfg)
        ga = np.concatenate([a.grad_mu, a.grad_z0.reshape(-1)])
        gb = np.concatenate([b.grad_mu, b.grad_z0.reshape(-1)])
        worst = max(worst, np.max(np.abs(ga - gb)) / max(np.max(np.abs(gb)), 1e-12))
    dt = time.perf_counter() - t0
    ok = worst < 1e-4 and dt < 120
    assert report(2, ok, f"max rel diff {worst:.2e} on 20 random specs ({len(kinds)} f/g combos), {dt:.0f}s")


# ---------------------------------------------------------------- 3
def _field(dyn):
    mu = np.zeros(dyn.n_mu)
    return lambda t, x, th: tuple(v[0] for v in dyn.rhs(t, x[None], th[None], mu))


def test_3_non_injective_witnesses():
    open_neg = ControlledDynamics(DynamicsSpec(1, "theta", f_scale=-1.0, gamma_mode="identity"))
    f = _field(open_neg)
    gap = abs(flow_map(f, np.array([0.0]), np.array([0.0]), 1.0, TIGHT)[0]
              - flow_map(f, np.array([1.0]), np.array([1.0]), 1.0, TIGHT)[0])
    osc = ControlledDynamics(DynamicsSpec(1, "theta", g_mode="linear_x", g_scale=-1.0, gamma_mode="constant"))
    g = _field(osc)
    ends = [abs(flow_map(g, np.array([x0]), np.array([0.0]), np.pi / 2, TIGHT)[0]) for x0 in (-1, -0.5, 0.5, 1)]
    ok = gap < 1e-6 and max(ends) < 1e-6
    assert report(3, ok, f"open-loop |Phi(0,1)-Phi(1,1)| = {gap:.1e}; oscillator max |Phi(x0,pi/2)| = {max(ends):.1e}")


# ---------------------------------------------------------------- 4
def test_4_reflection_separation():
    task = TaskSpec("reflection", n_train=256, n_eval=200)
    rows, passes = [], 0
    t0 = time.perf_counter()
    for s in SEEDS:
        mse = {}
        for variant in ("ncode", "node"):
            fm = FlowModel(preset_model("reflection", variant), PRESET_SOLVER["reflection"])
            res = train_run(task, fm, OptState(lr=1e-2), 500, 64, Rng(s), eval_every=500, max_steps=2000)
            assert res.steps <= 2000
            mse[variant] = fm.evaluate(res.params, res.data.x_train, res.data.y_train)[0]
        passes += mse["ncode"] < 1e-3 and mse["node"] > 0.1
        rows.append(f"{mse['ncode']:.1e}/{mse['node']:.3f}")
    dt = time.perf_counter() - t0
    ok = passes >= 4 and dt < 180
    assert report(4, ok, f"{passes}/5 seeds with N-CODE MSE < 1e-3 and NODE MSE > 0.1 "
                         f"(ncode/node per seed: {', '.join(rows)}), {dt:.0f}s")


# ---------------------------------------------------------------- 5
def test_5_annuli():
    task = TaskSpec("annuli", n_train=512, n_eval=2000)
    rows, passes = [], 0
    t0 = time.perf_counter()
    for s in SEEDS:
        acc = {}
        for variant in ("ncode", "node"):
            fm = FlowModel(preset_model("annuli", variant), PRESET_SOLVER["annuli"])
            res = train_run(task, fm, OptState(lr=1e-2), 10, 64, Rng(s), eval_every=10)
            acc[variant] = res.metrics[-1].accuracy
        passes += acc["ncode"] >= 0.99 and acc["node"] <= 0.85
        rows.append(f"{acc['ncode']:.4f}/{acc['node']:.3f}")
    dt = time.perf_counter() - t0
    ok = passes >= 4 and dt < 600
    assert report(5, ok, f"{passes}/5 seeds with N-CODE acc >= 0.99 and NODE acc <= 0.85 on 2000 points "
                         f"(ncode/node: {', '.join(rows)}), {dt:.0f}s")


# ---------------------------------------------------------------- 6
def test_6_memorization():
    from ncode.control import ControlledDynamics as CD

    task = TaskSpec("memorize", n_bits=100, n_patterns=3, n_train=100, degradation=0.5)
    t0 = time.perf_counter()
    dyn = CD(memorize_spec(100))
    untrained = dyn.init_mu(Rng(0))
    _, chance, _ = evaluate_memorize(dyn, untrained, task, Rng(99), n_episodes=200)
    res = train_memorize(task, TrainConfig(lr=1e-2, epochs=10, batch_size=20, seed=0))
    trained_deg, trained_all, _ = evaluate_memorize(dyn, res.mu, task, Rng(12345), n_episodes=200)
    dt = time.perf_counter() - t0
    ok = trained_all < 0.05 and abs(chance - 0.25) <= 0.05 and dt < 900
    assert report(6, ok, f"trained per-bit error {trained_all:.4f} (degraded bits {trained_deg:.4f}) after "
                         f"1000 episodes; untrained {chance:.3f}; {dt:.0f}s")


# ---------------------------------------------------------------- 7
def test_7_van_der_pol_recovery():
    t0 = time.perf_counter()
    rows, worst = [], 0.0
    for mu_star, inits in ((1.0, (0.5, 1.5)), (2.0, (1.0, 3.0))):
        obs = vdp_observe(mu_star, 2.0, 0.0, T=5.0, n_obs=101)
        for init in inits:
            fit = fit_vdp(obs, init, OptState("adam", 0.05), steps=300, record_time=False)
            worst = max(worst, abs(fit.mu_hat - mu_star))
            rows.append(f"{mu_star:g}<-{init:g}: {fit.mu_hat:.4f}")
    dt = time.perf_counter() - t0
    ok = worst < 0.05 and dt < 300
    assert report(7, ok, f"max |mu_hat - mu*| = {worst:.1e} ({'; '.join(rows)}), {dt:.0f}s")


# ---------------------------------------------------------------- 8
def _node_field(r, n, h=8):
    W1, b1, W2 = r.normal((h, n)), r.normal(h), r.normal((n, h)) / np.sqrt(h)
    return lambda t, x: W2 @ np.tanh(W1 @ x + b1)


def test_8_flow_properties():
    t0 = time.perf_counter()
    r = Rng(8)
    cfg = SolverConfig(method="dopri5", rtol=1e-7, atol=1e-7)
    rev = 0.0
    for _ in range(20):
        f = _node_field(r, 2)
        x0 = r.normal(2)
        xT = integrate(f, x0, 0.0, 1.0, cfg).final
        rev = max(rev, np.max(np.abs(integrate(f, xT, 1.0, 0.0, cfg).final - x0)))
    f1 = _node_field(r, 1)
    xs = r.uniform(-3, 3, (1000, 2))
    order_cfg = SolverConfig(method="dopri5", rtol=1e-8, atol=1e-8)
    kept = 0
    for a, b in xs:
        if a == b:
            kept += 1
            continue
        fa = integrate(f1, np.array([a]), 0.0, 1.0, order_cfg).final[0]
        fb = integrate(f1, np.array([b]), 0.0, 1.0, order_cfg).final[0]
        kept += np.sign(fa - fb) == np.sign(a - b)
    spec = DynamicsSpec(2, "mlp", MlpSpec((2, 3, 2)), gamma_mode="mlp", gamma_spec=MlpSpec((2, 4, 17)))
    dyn = ControlledDynamics(spec)
    cons_cfg = SolverConfig(method="dopri5", rtol=1e-6, atol=1e-6, dense_record=True)
    drift = 0.0
    for _ in range(20):
        mu = dyn.init_mu(r) + r.normal(dyn.n_mu, 0.0, 0.3)
        x = r.normal(2)
        th = dyn.gamma(mu, x[None])[0]
        tr = integrate(lambda t, z: np.concatenate([v[0] for v in dyn.rhs(t, z[None, :2], z[None, 2:], mu)]),
                       np.concatenate([x, th]), 0.0, 1.0, cons_cfg)
        drift = max(drift, np.max(np.abs(tr.states[:, 2:] - th)))
    dt = time.perf_counter() - t0
    ok = rev < 10 * (cfg.rtol + cfg.atol) and kept == 1000 and drift <= cons_cfg.rtol and dt < 60
    assert report(8, ok, f"reversibility err {rev:.1e} (bound {10 * (cfg.rtol + cfg.atol):.0e}); order kept "
                         f"{kept}/1000; theta drift {drift:.1e}; {dt:.0f}s")


# ---------------------------------------------------------------- 9
def _expm(A, terms=60):
    s = max(0, int(np.ceil(np.log2(max(np.linalg.norm(A, 1), 1e-16)))) + 1)
    B, out, term = A / 2**s, np.eye(len(A)), np.eye(len(A))
    for k in range(1, terms):
        term = term @ B / k
        out = out + term
    for _ in range(s):
        out = out @ out
    return out


def test_9_latent_flow():
    t0 = time.perf_counter()
    r = Rng(9)
    err = 0.0
    for m in range(1, 7):
        for _ in range(5):
            A = r.normal((m, m)) / np.sqrt(m)
            x0 = r.normal(m)
            T = float(r.uniform(0.1, 2.0))
            err = max(err, np.max(np.abs(latent_flow_encode(A, x0, T) - _expm(A * T) @ x0)))
    task = TaskSpec("latent_flow_ae", n_train=512, n_eval=500)
    train = TrainConfig(lr=1e-2, epochs=60, batch_size=64, eval_every=5, halve_patience=2, seed=0)
    res = toy_autoencode(task, train, latent_model(task))
    mse = res.metrics[-1].eval_loss
    var = float(np.mean(np.var(res.data.x_eval, axis=0)))
    dt = time.perf_counter() - t0
    ok = err < 1e-6 and mse < 1e-2 and dt < 600
    assert report(9, ok, f"expm max err {err:.1e} for m<=6; autoencoder eval MSE {mse:.1e} "
                         f"(data variance {var:.2f}); {dt:.0f}s")


# ---------------------------------------------------------------- 10
def test_10_determinism(tmp_path):
    same = True
    for task, extra in (("reflection", {"n_train": 64, "n_eval": 50}), ("annuli", {"n_train": 64, "n_eval": 50})):
        cfg = tmp_path / f"{task}.json"
        cfg.write_text(json.dumps({"task": {"name": task, **extra},
                                   "train": {"epochs": 3, "batch_size": 16, "microbatch": 4, "seed": 7}}))
        outs = []
        for k, threads in enumerate(("1", "1", "3", "8")):
            out = tmp_path / f"{task}_{k}"
            assert main(["run", str(cfg), "--quiet", "--deterministic", "--threads", threads, "--out", str(out)]) == 0
            outs.append((out / "metrics.csv").read_bytes())
        same &= all(o == outs[0] for o in outs)
    assert report(10, same, "metrics.csv byte-identical over repeated runs with --threads 1, 1, 3, 8 "
                            "(reflection and annuli)")
