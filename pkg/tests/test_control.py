import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given

from conftest import central_diff
from ncode.control import (
    ControlledDynamics,
    DynamicsSpec,
    coupled_jacobian,
    coupled_rhs,
    gamma_init,
    node_baseline_rhs,
)
from ncode.errors import ConfigError, ShapeError
from ncode.netblocks import MlpSpec
from ncode.numcore import Rng
from ncode.odesolve import AugmentedState, SolverConfig, flow_map, integrate

TIGHT = SolverConfig(method="dopri5", rtol=1e-10, atol=1e-10)

OSC = DynamicsSpec(1, "theta", g_mode="linear_x", g_scale=-1.0, gamma_mode="constant")
OPEN_NEG = DynamicsSpec(1, "theta", f_scale=-1.0, gamma_mode="identity")

SPECS = [
    DynamicsSpec(2, "mlp", MlpSpec((2, 3, 2)), gamma_mode="mlp", gamma_spec=MlpSpec((2, 4, 17))),
    DynamicsSpec(2, "mlp", MlpSpec((2, 2), "tanh", "identity"), g_mode="mlp", g_spec=MlpSpec((8, 5, 6)),
                 gamma_mode="constant"),
    DynamicsSpec(3, "matmul", f_activation="tanh", g_mode="hebbian", gamma_mode="constant"),
    DynamicsSpec(3, "matmul", f_activation="identity", mask=((0, 0), (0, 1), (1, 1), (1, 2), (2, 2), (2, 0)),
                 gamma_mode="mlp", gamma_spec=MlpSpec((3, 6))),
    DynamicsSpec(2, "theta", g_mode="linear_x", g_scale=0.7, gamma_mode="identity"),
    DynamicsSpec(2, "data_control", MlpSpec((4, 5, 2)), gamma_mode="identity"),
    DynamicsSpec(2, "matmul", f_activation="sigmoid", g_mode="mlp", g_spec=MlpSpec((6, 3, 4)), gamma_mode="constant"),
]


def _h(dyn, mu, n_x):
    def h(z):
        dx, dth = dyn.rhs(0.0, z[None, :n_x], z[None, n_x:], mu)
        return np.concatenate([dx[0], dth[0]])

    return h


def _random(spec, seed):
    dyn = ControlledDynamics(spec)
    r = Rng(seed)
    mu = dyn.init_mu(r) + r.normal(dyn.n_mu, 0.0, 0.3)
    x = r.normal(spec.n_x)
    th = dyn.gamma(mu, x[None])[0] + r.normal(dyn.n_theta, 0.0, 0.2)
    return dyn, mu, x, th


def test_gamma_constant_mode():
    dyn = ControlledDynamics(OSC)
    mu = np.zeros(dyn.n_mu)
    mu[dyn.layout.slice("gamma")] = 0.5
    for x0 in (-3.0, 0.0, 7.0):
        assert gamma_init(OSC, mu, np.array([x0])).tolist() == [0.5]


def test_gamma_identity_mode():
    assert gamma_init(OPEN_NEG, np.zeros(0), np.array([1.0])).tolist() == [1.0]
    with pytest.raises(ShapeError):
        DynamicsSpec(2, "mlp", MlpSpec((2, 2)), gamma_mode="identity")


def test_gamma_mlp_zero_weights_gives_bias():
    spec = SPECS[0]
    dyn = ControlledDynamics(spec)
    mu = np.zeros(dyn.n_mu)
    beta = np.linspace(-1, 1, 17)
    sl = dyn.layout.slice("gamma")
    mu_g = mu[sl]
    mu_g[spec.gamma_spec.layout.slice("b1")] = beta
    mu[sl] = mu_g
    for x0 in ([0.0, 0.0], [3.0, -1.0]):
        assert np.array_equal(gamma_init(spec, mu, np.array(x0)), beta)


@given(st.integers(0, 10_000))
def test_open_loop_theta_rate_is_zero(seed):
    for spec in (SPECS[0], SPECS[3], SPECS[5]):
        dyn, mu, x, th = _random(spec, seed)
        _, dth = coupled_rhs(spec, mu, AugmentedState(x, th))
        assert np.all(dth == 0.0)
        J, _ = coupled_jacobian(spec, mu, AugmentedState(x, th))
        assert np.all(J[spec.n_x:] == 0.0)


def test_oscillator_cosine_and_jacobian():
    dyn = ControlledDynamics(OSC)
    mu = np.zeros(dyn.n_mu)
    rhs = lambda t, x, th: dyn.rhs(t, x[None], th[None], mu)  # noqa: E731

    def field(t, x, th):
        dx, dth = rhs(t, x, th)
        return dx[0], dth[0]

    assert abs(flow_map(field, np.array([1.0]), np.array([0.0]), np.pi / 2, TIGHT)[0]) < 1e-6
    tr = integrate(lambda t, z: np.concatenate(field(t, z[:1], z[1:])), np.array([1.0, 0.0]), 0.0, 1.3, TIGHT)
    assert abs(tr.final[0] - np.cos(1.3)) < 1e-8
    J, _ = coupled_jacobian(OSC, mu, AugmentedState(np.array([0.4]), np.array([-0.2])))
    assert np.array_equal(J, [[0.0, 1.0], [-1.0, 0.0]])


def test_node_baseline():
    lin = MlpSpec((1, 1), "identity", "identity")
    z = AugmentedState(np.array([0.7]), np.zeros(0))
    dx, dth = node_baseline_rhs(lin, np.zeros(2), z)
    assert dx.tolist() == [0.0] and dth.size == 0
    field = lambda t, x, th: node_baseline_rhs(lin, np.array([1.0, 0.0]), AugmentedState(x, th))  # noqa: E731
    assert abs(flow_map(field, np.array([1.0]), np.zeros(0), 1.0, TIGHT)[0] - np.e) < 1e-8
    with pytest.raises(ShapeError):
        node_baseline_rhs(lin, np.zeros(3), z)


@given(st.integers(0, 10_000))
def test_node_baseline_keeps_order(seed):
    spec = MlpSpec((1, 8, 1))
    r = Rng(seed)
    theta = r.normal(spec.n_params, 0.0, 1.5)
    field = lambda t, x, th: node_baseline_rhs(spec, theta, AugmentedState(x, th))  # noqa: E731
    cfg = SolverConfig(method="dopri5", rtol=1e-8, atol=1e-8)
    lo = flow_map(field, np.array([[-1.0]]), np.zeros((1, 0)), 1.0, cfg)
    hi = flow_map(field, np.array([[1.0]]), np.zeros((1, 0)), 1.0, cfg)
    assert lo[0, 0] < hi[0, 0]


@pytest.mark.parametrize("k", range(len(SPECS)))
@given(seed=st.integers(0, 10_000))
def test_jacobian_matches_finite_differences(k, seed):
    spec = SPECS[k]
    dyn, mu, x, th = _random(spec, seed)
    J, J_mu = coupled_jacobian(spec, mu, AugmentedState(x, th))
    z = np.concatenate([x, th])
    fd_z = central_diff(_h(dyn, mu, spec.n_x), z)
    fd_mu = central_diff(lambda m: _h(dyn, m, spec.n_x)(z), mu) if dyn.n_mu else np.zeros((z.size, 0))
    for a, b in ((J, fd_z), (J_mu, fd_mu)):
        assert np.max(np.abs(a - b), initial=0.0) <= 1e-5 * max(1.0, np.max(np.abs(b), initial=0.0))


@pytest.mark.parametrize("k", range(len(SPECS)))
def test_vjp_matches_jacobian(k):
    spec = SPECS[k]
    dyn, mu, _, _ = _random(spec, k)
    r = Rng(100 + k)
    X = r.normal((3, spec.n_x))
    TH = dyn.gamma(mu, X) + r.normal((3, dyn.n_theta), 0.0, 0.2)
    AX, ATH = r.normal((3, spec.n_x)), r.normal((3, dyn.n_theta))
    vx, vth, vmu = dyn.vjp(0.0, X, TH, mu, AX, ATH)
    ref_mu = np.zeros(dyn.n_mu)
    for b in range(3):
        J, J_mu = dyn.jacobian(0.0, X[b], TH[b], mu)
        a = np.concatenate([AX[b], ATH[b]])
        assert np.allclose(np.concatenate([vx[b], vth[b]]), a @ J, atol=1e-12)
        ref_mu += a @ J_mu
    assert np.allclose(vmu, ref_mu, atol=1e-12)


def test_gamma_jacobian_and_vjp_agree():
    spec = SPECS[0]
    dyn, mu, x, _ = _random(spec, 5)
    J_x, J_mu = dyn.gamma_jacobian(mu, x)
    assert np.allclose(J_x, central_diff(lambda v: dyn.gamma(mu, v[None])[0], x), atol=1e-8)
    a = Rng(6).normal(dyn.n_theta)
    gx, gmu = dyn.gamma_vjp(mu, x[None], a[None])
    assert np.allclose(gx[0], a @ J_x, atol=1e-12) and np.allclose(gmu, a @ J_mu, atol=1e-12)


def test_open_loop_non_injective():
    dyn = ControlledDynamics(OPEN_NEG)

    def phi(x0):
        field = lambda t, x, th: tuple(v[0] for v in dyn.rhs(t, x[None], th[None], np.zeros(0)))  # noqa: E731
        return flow_map(field, np.array([x0]), np.array([x0]), 1.0, TIGHT)[0]

    assert abs(phi(0.0) - phi(1.0)) < 1e-6


@given(st.floats(-1, 1))
def test_oscillator_collapses_interval(x0):
    dyn = ControlledDynamics(OSC)
    field = lambda t, x, th: tuple(v[0] for v in dyn.rhs(t, x[None], th[None], np.zeros(dyn.n_mu)))  # noqa: E731
    assert abs(flow_map(field, np.array([x0]), np.array([0.0]), np.pi / 2, TIGHT)[0]) < 1e-6


@given(st.integers(0, 10_000))
def test_open_loop_theta_conserved_along_trajectory(seed):
    spec = SPECS[0]
    dyn, mu, x, th = _random(spec, seed)
    n = spec.n_x
    cfg = SolverConfig(method="dopri5", rtol=1e-6, atol=1e-6, dense_record=True)
    tr = integrate(lambda t, z: np.concatenate([v[0] for v in dyn.rhs(t, z[None, :n], z[None, n:], mu)]),
                   np.concatenate([x, th]), 0.0, 1.0, cfg)
    assert np.max(np.abs(tr.states[:, n:] - th)) <= cfg.rtol


@given(st.integers(0, 10_000))
def test_closed_loop_augmented_flow_reversible(seed):
    spec = SPECS[1]
    dyn, mu, x, th = _random(spec, seed)
    n = spec.n_x
    cfg = SolverConfig(method="dopri5", rtol=1e-9, atol=1e-9)
    rhs = lambda t, z: np.concatenate([v[0] for v in dyn.rhs(t, z[None, :n], z[None, n:], mu)])  # noqa: E731
    z0 = np.concatenate([x, th])
    zT = integrate(rhs, z0, 0.0, 1.0, cfg).final
    assert np.max(np.abs(integrate(rhs, zT, 1.0, 0.0, cfg).final - z0)) < 1e-6


def test_spec_validation_and_round_trip():
    with pytest.raises(ConfigError, match="valid"):
        DynamicsSpec(2, "conv")
    with pytest.raises(ConfigError):
        DynamicsSpec(2, "mlp")
    with pytest.raises(ShapeError):
        DynamicsSpec(2, "mlp", MlpSpec((2, 2)), gamma_mode="mlp", gamma_spec=MlpSpec((2, 5)))
    with pytest.raises(ShapeError):
        DynamicsSpec(2, "mlp", MlpSpec((2, 2)), g_mode="mlp", g_spec=MlpSpec((6, 6)))
    with pytest.raises(ConfigError):
        DynamicsSpec(2, "mlp", MlpSpec((2, 2)), mask=((0, 0),))
    for spec in SPECS:
        assert DynamicsSpec.from_dict(spec.to_dict()) == spec
