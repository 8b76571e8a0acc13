"""Reverse-mode differentiation through recorded trajectories vs finite differences."""

import numpy as np
import pytest

from maflow import (FlowState, IntegratorConfig, MLPPotential, PotentialParams,
                    StaleTapeError, backprop, gaussian_log_density, init_params,
                    integrate, nll_loss, replay, variational_loss)
from maflow.gradcheck import central_difference, run_gradcheck
from maflow.targets import IsingEnergy, ising_spec


def random_params(n, h, seed=0, amp=3.0):
    rng = np.random.default_rng(seed)
    p = init_params(n, h, rng)
    return PotentialParams(p.W, rng.standard_normal(h) * 0.2, p.a * amp, 0.0)


def make_trajectory(params, X, eps=0.1, steps=5, direction="forward"):
    st = FlowState(X, gaussian_log_density(X), 0.0)
    return integrate(MLPPotential(params), st, IntegratorConfig(eps, steps, direction),
                     record=True)


def test_replay_reproduces_terminal_state_bitwise():
    p = random_params(3, 16, seed=1)
    X = np.random.default_rng(1).standard_normal((9, 3))
    fin, traj = make_trajectory(p, X, steps=20)
    rx, rl = replay(traj)
    assert np.array_equal(rx, fin.X)
    assert np.array_equal(rl, fin.L)


def test_zero_cotangents_give_zero_gradient():
    p = random_params(3, 8, seed=2)
    X = np.random.default_rng(2).standard_normal((4, 3))
    _, traj = make_trajectory(p, X)
    res = backprop(traj, p, np.zeros((4, 3)), np.zeros(4))
    assert np.array_equal(res.param_grad.to_vector(), np.zeros(p.size))
    assert np.array_equal(res.d_x0, np.zeros((4, 3)))


def test_single_step_laplacian_gradient_matches_fd():
    # d=1, loss = mean(L_1): only the Laplacian term enters through the a-weights
    n, h = 3, 6
    p = PotentialParams(np.random.default_rng(3).standard_normal((h, n)) * 0.5,
                        np.zeros(h), np.zeros(h), 0.0)
    X = np.random.default_rng(4).standard_normal((5, n))

    def loss(pp):
        st = FlowState(X, np.zeros(X.shape[0]), 0.0)
        fin, traj = integrate(MLPPotential(pp), st, IntegratorConfig(0.1, 1), record=True)
        return fin, traj

    fin, traj = loss(p)
    B = X.shape[0]
    res = backprop(traj, p, np.zeros_like(X), np.full(B, 1.0 / B))
    g = res.param_grad.to_vector()
    vec = p.to_vector()
    for j in np.random.default_rng(5).choice(p.size, 15, replace=False):
        up, dn = vec.copy(), vec.copy()
        up[j] += 1e-6
        dn[j] -= 1e-6
        lp = loss(PotentialParams.from_vector(up, n, h))[0].L.mean()
        lm = loss(PotentialParams.from_vector(dn, n, h))[0].L.mean()
        fd = (lp - lm) / 2e-6
        assert abs(g[j] - fd) <= 1e-6 * max(abs(fd), abs(g[j]), 1e-3)


def test_full_pipeline_nll_gradient_matches_fd():
    p = random_params(4, 16, seed=6)
    X = np.random.default_rng(7).standard_normal((8, 4)) * 1.3
    cfg = IntegratorConfig(0.1, 20)
    res = nll_loss(p, X, cfg)
    g = res.grad.to_vector()
    rng = np.random.default_rng(8)
    checked = 0
    for j in rng.choice(p.size, 20, replace=False):
        fd = central_difference(
            lambda pp: nll_loss(pp, X, cfg, want_grad=False).value, p, int(j))
        assert abs(g[j] - fd) <= 1e-4 * max(abs(fd), abs(g[j]), 1e-5)
        checked += 1
    assert checked >= 20


def test_variational_gradient_matches_fd():
    p = random_params(4, 16, seed=9)
    energy = IsingEnergy(ising_spec(2))
    cfg = IntegratorConfig(0.1, 20)

    def loss(pp, want_grad=True):
        return variational_loss(pp, energy, 8, cfg, np.random.default_rng(55),
                                want_grad=want_grad)

    g = loss(p).grad.to_vector()
    for j in np.random.default_rng(10).choice(p.size, 20, replace=False):
        fd = central_difference(lambda pp: loss(pp, want_grad=False).value, p, int(j))
        assert abs(g[j] - fd) <= 1e-4 * max(abs(fd), abs(g[j]), 1e-5)


def test_gradient_linearity_in_cotangents():
    p = random_params(3, 8, seed=11)
    X = np.random.default_rng(11).standard_normal((6, 3))
    _, traj = make_trajectory(p, X, steps=10)
    rng = np.random.default_rng(12)
    dx1, dl1 = rng.standard_normal((6, 3)), rng.standard_normal(6)
    dx2, dl2 = rng.standard_normal((6, 3)), rng.standard_normal(6)
    a, b = 0.7, -1.3
    g1 = backprop(traj, p, dx1, dl1).param_grad.to_vector()
    g2 = backprop(traj, p, dx2, dl2).param_grad.to_vector()
    g = backprop(traj, p, a * dx1 + b * dx2, a * dl1 + b * dl2).param_grad.to_vector()
    assert np.abs(g - (a * g1 + b * g2)).max() < 1e-9 * max(1.0, np.abs(g).max())


def test_gradient_exact_at_coarse_steps():
    # differentiate-the-discretization: exactness does not depend on epsilon
    p = random_params(3, 8, seed=13, amp=1.0)
    X = np.random.default_rng(13).standard_normal((4, 3))
    cfg = IntegratorConfig(0.7, 3)
    res = nll_loss(p, X, cfg)
    g = res.grad.to_vector()
    for j in np.random.default_rng(14).choice(p.size, 10, replace=False):
        fd = central_difference(
            lambda pp: nll_loss(pp, X, cfg, want_grad=False).value, p, int(j))
        assert abs(g[j] - fd) <= 1e-4 * max(abs(fd), abs(g[j]), 1e-5)


def test_input_cotangents_match_fd():
    # d loss / d x_data, needed when the inputs are the data themselves
    p = random_params(3, 8, seed=15)
    X = np.random.default_rng(15).standard_normal((4, 3))
    cfg = IntegratorConfig(0.1, 10)

    def loss_of_data(Xv):
        return nll_loss(p, Xv, cfg, want_grad=False).value

    st = FlowState(X, np.zeros(4), cfg.total_time)
    fin, traj = integrate(MLPPotential(p), st, cfg.reversed(), record=True)
    d_x = fin.X / 4
    d_l = np.full(4, 1.0 / 4)
    res = backprop(traj, p, d_x, d_l)
    h = 1e-6
    for (i, j) in [(0, 0), (1, 2), (3, 1)]:
        up, dn = X.copy(), X.copy()
        up[i, j] += h
        dn[i, j] -= h
        fd = (loss_of_data(up) - loss_of_data(dn)) / (2 * h)
        assert abs(res.d_x0[i, j] - fd) <= 1e-5 * max(abs(fd), 1e-4)


def test_stale_tape_rejected():
    p = random_params(3, 8, seed=16)
    X = np.random.default_rng(16).standard_normal((4, 3))
    _, traj = make_trajectory(p, X)
    other = PotentialParams(p.W, p.b, p.a * 1.001, p.c)
    with pytest.raises(StaleTapeError):
        backprop(traj, other, np.zeros((4, 3)), np.zeros(4))


def test_backward_direction_tape():
    p = random_params(3, 8, seed=17)
    X = np.random.default_rng(17).standard_normal((5, 3))
    fin, traj = make_trajectory(p, X, steps=8, direction="backward")
    rx, rl = replay(traj)
    assert np.array_equal(rx, fin.X)
    res = backprop(traj, p, np.ones_like(X), np.zeros(5))
    assert np.isfinite(res.param_grad.to_vector()).all()


def test_gradcheck_suite():
    assert run_gradcheck(seed=0) < 1e-4
