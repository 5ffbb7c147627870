import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given

from conftest import central_diff
from ncode.errors import ConfigError, ShapeError
from ncode.netblocks import MlpSpec, init_params, mlp_forward, mlp_jacobians, mlp_vjp, sigmoid_vec
from ncode.numcore import Rng, flatten


def reference_forward(spec, params, x):
    """Plain loop over layers, written independently of the vectorized code."""
    a = np.asarray(x, dtype=float)
    k = 0
    for l in range(len(spec.layer_sizes) - 1):
        i, o = spec.layer_sizes[l], spec.layer_sizes[l + 1]
        W = np.array(params[k:k + o * i]).reshape(o, i)
        k += o * i
        b = np.array(params[k:k + o])
        k += o
        u = [sum(W[r, c] * a[c] for c in range(i)) + b[r] for r in range(o)]
        act = spec.final_activation if l == len(spec.layer_sizes) - 2 else spec.activation
        a = np.array([{"tanh": np.tanh, "identity": lambda v: v, "relu": lambda v: max(v, 0.0),
                       "sigmoid": lambda v: 1 / (1 + np.exp(-v))}[act](v) for v in u])
    return a


def test_identity_net_is_identity():
    spec = MlpSpec((3, 3), "identity", "identity")
    p = flatten({"W0": np.eye(3), "b0": np.zeros(3)}, spec.layout)
    x = np.array([0.3, -1.0, 2.0])
    assert np.array_equal(mlp_forward(spec, p, x), x)


def test_zero_weights_give_bias():
    spec = MlpSpec((2, 4, 3))
    p = np.zeros(spec.n_params)
    p[spec.layout.slice("b1")] = [1.0, -2.0, 0.5]
    assert np.array_equal(mlp_forward(spec, p, np.array([9.0, -9.0])), [1.0, -2.0, 0.5])


def test_matches_reference_forward():
    spec = MlpSpec((1, 4, 1))
    p = init_params(spec, Rng(3)) + 0.1
    for x in (-1.3, 0.0, 0.7):
        assert abs(mlp_forward(spec, p, np.array([x]))[0] - reference_forward(spec, p, [x])[0]) < 1e-12


def test_shape_errors():
    spec = MlpSpec((2, 3))
    with pytest.raises(ShapeError):
        mlp_forward(spec, np.zeros(5), np.zeros(2))
    with pytest.raises(ShapeError):
        mlp_forward(spec, np.zeros(spec.n_params), np.zeros(3))
    with pytest.raises(ConfigError):
        MlpSpec((3,))
    with pytest.raises(ConfigError):
        MlpSpec((2, 2), "softplus")


def test_identity_layer_jacobian_is_W():
    spec = MlpSpec((3, 2), "identity", "identity")
    p = init_params(spec, Rng(0))
    J, _ = mlp_jacobians(spec, p, np.array([0.1, 0.2, 0.3]))
    assert np.array_equal(J, spec.layout.view(p, "W0"))


def test_sigmoid_slope_at_zero():
    spec = MlpSpec((3, 2), "sigmoid", "sigmoid")
    p = init_params(spec, Rng(1))
    J, _ = mlp_jacobians(spec, p, np.zeros(3))
    W = spec.layout.view(p, "W0")
    b = spec.layout.view(p, "b0")
    assert np.allclose(J, (sigmoid_vec(b) * (1 - sigmoid_vec(b)))[:, None] * W, atol=1e-15)
    assert np.allclose(J, 0.25 * W, atol=1e-15)  # zero biases at init


@given(st.sampled_from(["tanh", "sigmoid", "identity", "relu"]), st.integers(0, 10_000))
def test_jacobians_match_finite_differences(act, seed):
    spec = MlpSpec((2, 8, 3), act, "tanh")
    r = Rng(seed)
    p = init_params(spec, r) + r.normal(spec.n_params, 0.0, 0.1)
    x = r.normal(2)
    J_x, J_p = mlp_jacobians(spec, p, x)
    fd_x = central_diff(lambda v: mlp_forward(spec, p, v), x)
    fd_p = central_diff(lambda q: mlp_forward(spec, q, x), p)
    for a, b in ((J_x, fd_x), (J_p, fd_p)):
        assert np.max(np.abs(a - b)) <= 1e-5 * max(1.0, np.max(np.abs(b)))


@given(st.integers(0, 10_000))
def test_vjp_matches_jacobians(seed):
    spec = MlpSpec((3, 5, 2))
    r = Rng(seed)
    p = init_params(spec, r)
    X = r.normal((4, 3))
    C = r.normal((4, 2))
    gx, gp = mlp_vjp(spec, p, X, C)
    ref_p = np.zeros(spec.n_params)
    for b in range(4):
        Jx, Jp = mlp_jacobians(spec, p, X[b])
        assert np.allclose(gx[b], C[b] @ Jx, atol=1e-13)
        ref_p += C[b] @ Jp
    assert np.allclose(gp, ref_p, atol=1e-12)
    # per-example parameters keep the batch axis
    P = np.stack([p] * 4)
    gx2, gp2 = mlp_vjp(spec, P, X, C)
    assert gp2.shape == (4, spec.n_params)
    assert np.allclose(gp2.sum(axis=0), gp, atol=1e-12) and np.allclose(gx2, gx, atol=1e-13)


def test_sigmoid_values():
    assert sigmoid_vec(0.0) == 0.5
    assert abs(sigmoid_vec(1.0) - 0.7310585786) < 1e-10
    with np.errstate(all="raise"):
        v = sigmoid_vec(np.array([-1000.0, 1000.0]))
    assert v[0] >= 0.0 and v[0] < 1e-300 + 1e-16 and v[1] == 1.0


def test_pure_forward():
    spec = MlpSpec((2, 6, 2))
    p = init_params(spec, Rng(4))
    x = np.array([0.2, -0.4])
    a = mlp_forward(spec, p, x)
    mlp_forward(spec, p + 1.0, x)
    assert np.array_equal(a, mlp_forward(spec, p, x))


def test_init_scale():
    spec = MlpSpec((30, 20, 10))
    p = init_params(spec, Rng(0))
    W = spec.layout.view(p, "W0")
    assert np.abs(W).max() <= np.sqrt(6 / 50)
    assert np.all(spec.layout.view(p, "b0") == 0)
