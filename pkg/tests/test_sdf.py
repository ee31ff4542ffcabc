import numpy as np
import pytest

from sdfsplat.autodiff import ContractViolation, Tape, grad_check
from sdfsplat.fields import PlaneField, QuadraticField, SphereField
from sdfsplat.sdf import (SdfConfig, SdfNetwork, clamp_to_ball, sdf_eval,
                          sdf_curvature, sdf_gradient)

TINY = SdfConfig(levels=2, table_size=2 ** 10, base_res=4, max_res=8,
                 hidden=8, geo_feat=4, color_hidden=8, active_levels_init=2)


def unit_ball_points(rng, n):
    x = rng.standard_normal((n, 3))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return x * rng.random((n, 1)) ** (1 / 3)


def test_geometric_initialization(rng):
    net = SdfNetwork(seed=7)
    x = unit_ball_points(rng, 1000)
    f, feat = sdf_eval(net, x)
    assert abs(f[np.argmin(np.linalg.norm(x, axis=1))]
               - (np.linalg.norm(x, axis=1).min() - net.cfg.r_init)) < 0.05
    # at the origin f ~ -r_init, on the init sphere |f| small
    f0, _ = sdf_eval(net, np.zeros((1, 3)))
    assert abs(f0[0] + net.cfg.r_init) < 0.05
    shell = unit_ball_points(rng, 1000)
    shell /= np.linalg.norm(shell, axis=1, keepdims=True)
    shell *= net.cfg.r_init
    fs, _ = sdf_eval(net, shell)
    assert np.abs(fs).max() < 0.05
    assert feat.shape == (1000, net.cfg.geo_feat)


def test_outside_ball_clamped():
    net = SdfNetwork(TINY, seed=0)
    far = np.array([[3.0, 0.0, 0.0]])
    on_surface = np.array([[1.0, 0.0, 0.0]])
    f1, _ = sdf_eval(net, far)
    f2, _ = sdf_eval(net, on_surface)
    assert f1[0] == f2[0]


def test_continuity_empirical_lipschitz(rng):
    net = SdfNetwork(seed=3)
    x = unit_ball_points(rng, 400) * 0.9
    delta = 1e-4
    d = rng.standard_normal((400, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    f1 = net.f_np(x)
    f2 = net.f_np(x + delta * d)
    lip = np.abs(f2 - f1).max() / delta
    assert lip < 50.0  # finite and stable for a fresh field


def test_gradient_analytic_fields():
    sph = SphereField(0.5)
    g = sdf_gradient(sph, np.array([[0.3, 0.0, 0.0]]), eps=1e-5)
    assert np.allclose(g, [[1.0, 0.0, 0.0]], atol=1e-6)
    pl = PlaneField()
    # power-of-two point and step make the central difference exact
    g = sdf_gradient(pl, np.array([[0.2, -0.1, 0.25]]), eps=2.0 ** -10)
    assert np.array_equal(g, [[0.0, 0.0, 1.0]])


def test_gradient_richardson(rng):
    # halving eps shrinks the FD error O(eps^2) on the network field
    net = SdfNetwork(SdfConfig(activation="softplus"), seed=5)
    x = unit_ball_points(rng, 8) * 0.5

    def grad_err(eps):
        g1 = sdf_gradient(net, x, eps=eps)
        g2 = sdf_gradient(net, x, eps=eps / 2)
        return np.abs(g1 - g2).max()

    # differences between successive eps levels shrink
    assert grad_err(2e-3) < grad_err(8e-3)


def test_curvature_oracles():
    assert sdf_curvature(PlaneField(), np.array([[0.1, 0.2, 0.3]]),
                         eps=1e-3)[0] == 0.0
    rho = 0.35
    c = sdf_curvature(SphereField(0.5), np.array([[rho, 0.0, 0.0]]),
                      eps=1e-3)[0]
    assert abs(c - 2.0 / rho) / (2.0 / rho) < 0.05
    q = sdf_curvature(QuadraticField(), np.array([[0.1, -0.2, 0.05]]),
                      eps=1e-3)[0]
    assert abs(q - 6.0) < 1e-6


def test_activation_bit_identical(rng):
    net = SdfNetwork(TINY, seed=1)
    net2 = SdfNetwork(SdfConfig(**{**TINY.__dict__, "active_levels_init": 1}),
                      seed=1)
    x = unit_ball_points(rng, 64)
    before = net2.f_np(x)
    net2.activate_level(1)
    after = net2.f_np(x)
    assert np.array_equal(before, after)


def test_activation_order_enforced():
    net = SdfNetwork(TINY, seed=0)
    net.cfg.levels == 2
    with pytest.raises(ContractViolation):
        net.activate_level(5)
    cfg = SdfConfig(**{**TINY.__dict__, "levels": 4, "active_levels_init": 2})
    net = SdfNetwork(cfg, seed=0)
    with pytest.raises(ContractViolation):
        net.activate_level(3)  # out of order
    net.activate_level(2)
    net.activate_level(3)
    with pytest.raises(ContractViolation):
        net.activate_level(4)  # beyond L


def test_level_becomes_trainable_after_activation(rng):
    cfg = SdfConfig(levels=3, table_size=2 ** 9, base_res=4, max_res=16,
                    hidden=8, geo_feat=4, active_levels_init=2)
    net = SdfNetwork(cfg, seed=2)
    assert np.all(net.params["table2"] == 0.0)
    net.activate_level(2)
    x = unit_ball_points(rng, 32)
    tape = Tape()
    P = net.bind(tape)
    f, _ = net.sdf_head(tape, P, x)
    tape.backward((f ** 2).sum())
    g = P["table2"].grad
    assert g is not None and np.any(g != 0.0)
    # one gradient step moves the features off zero
    net.params["table2"] -= 0.01 * g
    assert np.any(net.params["table2"] != 0.0)


def test_trilinear_vertex_exact():
    # encoding at a grid vertex equals that vertex's feature exactly
    cfg = SdfConfig(levels=1, table_size=2 ** 12, base_res=4, max_res=4,
                    hidden=8, geo_feat=2, active_levels_init=1)
    net = SdfNetwork(cfg, seed=0)
    res = net.resolutions[0]
    tape = Tape()
    P = net.bind(tape)
    # grid vertex (1, 2, 3) of the level-0 lattice
    v = np.array([1, 2, 3])
    x = (v / res) * 2.0 - 1.0
    enc = net.encode(tape, P, x[None, :])
    slot = (v[0] * (res + 1) + v[1]) * (res + 1) + v[2]
    assert np.array_equal(enc.data[0], net.params["table0"][slot])


def test_gradient_flow_touches_only_8L_vertices(rng):
    cfg = SdfConfig(levels=2, table_size=2 ** 12, base_res=4, max_res=8,
                    hidden=8, geo_feat=2, active_levels_init=2)
    net = SdfNetwork(cfg, seed=4)
    x = rng.uniform(-0.4, 0.4, (1, 3))
    tape = Tape()
    P = net.bind(tape)
    f, _ = net.sdf_head(tape, P, x)
    tape.backward(f.sum())
    for l in range(2):
        g = P[f"table{l}"].grad
        touched = np.nonzero(np.any(g != 0.0, axis=1))[0]
        assert len(touched) <= 8


def test_sdf_head_gradcheck_small(rng):
    # analytic tape gradient vs finite differences on every parameter
    net = SdfNetwork(TINY, seed=6)
    x = unit_ball_points(rng, 5) * 0.8
    names = list(net.params)

    def f(*arrs):
        tape = arrs[0].tape
        P = dict(zip(names, arrs))
        fval, _ = net.sdf_head(tape, P, x)
        return (fval ** 2).mean()

    err = grad_check(f, [net.params[k] for k in names], eps=1e-5)
    assert err < 1e-6


def test_clamp_to_ball():
    x = np.array([[2.0, 0.0, 0.0], [0.1, 0.1, 0.1]])
    out = clamp_to_ball(x)
    assert np.allclose(out[0], [1.0, 0.0, 0.0])
    assert np.array_equal(out[1], x[1])


def test_grad_eps_tracks_active_level():
    net = SdfNetwork(seed=0)
    e0 = net.grad_eps()
    net.activate_level(2)
    assert net.grad_eps() < e0
