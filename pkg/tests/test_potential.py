"""Potential evaluation against finite-difference oracles and trivial cases."""

import numpy as np
import pytest

from maflow import (MLPPotential, PotentialParams, eval_batch, eval_potential,
                    init_params, param_vjp)

LN2 = 0.6931471805599453


def random_params(n, h, seed=0, amp=3.0):
    rng = np.random.default_rng(seed)
    p = init_params(n, h, rng)
    return PotentialParams(p.W, rng.standard_normal(h) * 0.3, p.a * amp, rng.standard_normal())


def fd_gradient(params, x, h=1e-4):
    g = np.zeros_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (eval_potential(params, x + e).value - eval_potential(params, x - e).value) / (2 * h)
    return g


def fd_hessian_trace(params, x, h=1e-4):
    v0 = eval_potential(params, x).value
    tr = 0.0
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        vp = eval_potential(params, x + e).value
        vm = eval_potential(params, x - e).value
        tr += (vp - 2.0 * v0 + vm) / h ** 2
    return tr


def test_constant_potential():
    p = PotentialParams(np.zeros((3, 2)), np.zeros(3), np.zeros(3), 5.0)
    ev = eval_potential(p, np.array([0.3, -1.2]))
    assert ev.value == 5.0
    assert np.array_equal(ev.grad, np.zeros(2))
    assert ev.laplacian == 0.0


def test_single_unit_at_origin():
    p = PotentialParams(np.array([[1.0]]), np.zeros(1), np.ones(1), 0.0)
    ev = eval_potential(p, np.zeros(1))
    assert ev.value == pytest.approx(LN2, abs=1e-15)
    assert ev.grad[0] == pytest.approx(0.5, abs=1e-15)
    assert ev.laplacian == pytest.approx(0.25, abs=1e-15)


def test_gradient_matches_finite_differences():
    p = random_params(3, 8, seed=42)
    rng = np.random.default_rng(1)
    for _ in range(5):
        x = rng.standard_normal(3)
        ev = eval_potential(p, x)
        fd = fd_gradient(p, x)
        assert np.abs(ev.grad - fd).max() <= 1e-5 * max(1.0, np.abs(fd).max())


def test_laplacian_matches_hessian_trace():
    rng = np.random.default_rng(9)
    for seed in range(5):
        p = random_params(4, 8, seed=seed)
        x = rng.standard_normal(4)
        ev = eval_potential(p, x)
        tr = fd_hessian_trace(p, x)
        assert abs(ev.laplacian - tr) <= 1e-4 * max(1.0, abs(tr))


def test_gradient_is_curl_free_in_2d():
    # cross-partials of a gradient field must agree
    p = random_params(2, 10, seed=3)
    x = np.array([0.4, -0.7])
    h = 1e-5

    def grad_at(pt):
        return eval_potential(p, pt).grad

    d_gx_dy = (grad_at(x + [0, h])[0] - grad_at(x - [0, h])[0]) / (2 * h)
    d_gy_dx = (grad_at(x + [h, 0])[1] - grad_at(x - [h, 0])[1]) / (2 * h)
    assert abs(d_gx_dy - d_gy_dx) < 1e-7


def test_constant_offset_only_shifts_value():
    p = random_params(3, 6, seed=5)
    shifted = PotentialParams(p.W, p.b, p.a, p.c + 2.5)
    x = np.array([0.1, 0.2, -0.3])
    e0, e1 = eval_potential(p, x), eval_potential(shifted, x)
    assert e1.value == pytest.approx(e0.value + 2.5, abs=1e-12)
    assert np.array_equal(e0.grad, e1.grad)
    assert e0.laplacian == e1.laplacian


def test_eval_is_pure():
    p = random_params(3, 8, seed=7)
    x = np.array([0.5, -1.0, 2.0])
    a, b = eval_potential(p, x), eval_potential(p, x)
    assert a.value == b.value
    assert np.array_equal(a.grad, b.grad)
    assert a.laplacian == b.laplacian


def test_batch_matches_per_row_bitwise():
    p = random_params(16, 512, seed=21)
    X = np.random.default_rng(2).standard_normal((64, 16))
    batch = eval_batch(p, X)
    for i in range(64):
        row = eval_potential(p, X[i])
        assert batch.value[i] == row.value
        assert np.array_equal(batch.grad[i], row.grad)
        assert batch.laplacian[i] == row.laplacian


def test_batch_of_one_identical_to_eval():
    p = random_params(3, 4, seed=1)
    x = np.array([1.0, -2.0, 0.5])
    b = eval_batch(p, x[None])
    e = eval_potential(p, x)
    assert b.value[0] == e.value and np.array_equal(b.grad[0], e.grad)


def test_batch_duplicate_rows_identical():
    p = random_params(2, 4, seed=2)
    X = np.array([[0.3, 0.4], [0.3, 0.4]])
    b = eval_batch(p, X)
    assert b.value[0] == b.value[1]
    assert np.array_equal(b.grad[0], b.grad[1])


def test_shape_errors():
    p = random_params(3, 4)
    with pytest.raises(ValueError):
        eval_potential(p, np.zeros(2))
    with pytest.raises(ValueError):
        eval_batch(p, np.zeros((4, 2)))
    with pytest.raises(ValueError):
        PotentialParams(np.zeros((2, 2)), np.zeros(3), np.zeros(2), 0.0)
    with pytest.raises(ValueError):
        PotentialParams(np.array([[np.nan]]), np.zeros(1), np.zeros(1), 0.0)


def test_param_vjp_zero_weights_give_zero():
    p = random_params(3, 5, seed=11)
    g, dx = param_vjp(p, np.ones(3), np.zeros(3), 0.0)
    assert np.array_equal(g.to_vector(), np.zeros(p.size))
    assert np.array_equal(dx, np.zeros(3))


def test_param_vjp_c_component_always_zero():
    p = random_params(3, 5, seed=12)
    g, _ = param_vjp(p, np.ones(3), np.array([1.0, -2.0, 0.3]), 0.7)
    assert g.c == 0.0


def test_param_vjp_matches_finite_differences():
    p = random_params(4, 6, seed=13)
    rng = np.random.default_rng(4)
    x = rng.standard_normal(4)
    wg = rng.standard_normal(4)
    wl = rng.standard_normal()

    def scalar(pp, xx):
        ev = eval_potential(pp, xx)
        return wg @ ev.grad + wl * ev.laplacian

    g, dx = param_vjp(p, x, wg, wl)
    vec, gvec = p.to_vector(), g.to_vector()
    h = 1e-6
    for j in rng.choice(p.size, 20, replace=False):
        up, dn = vec.copy(), vec.copy()
        up[j] += h
        dn[j] -= h
        fd = (scalar(PotentialParams.from_vector(up, 4, 6), x)
              - scalar(PotentialParams.from_vector(dn, 4, 6), x)) / (2 * h)
        assert abs(gvec[j] - fd) <= 1e-4 * max(abs(fd), abs(gvec[j]), 1e-5)
    for j in range(4):
        e = np.zeros(4)
        e[j] = h
        fd = (scalar(p, x + e) - scalar(p, x - e)) / (2 * h)
        assert abs(dx[j] - fd) <= 1e-4 * max(abs(fd), 1e-5)


def test_vectorized_engine_agrees_with_reference():
    # the BLAS engine reassociates sums; agreement is near machine precision
    p = random_params(5, 32, seed=15)
    X = np.random.default_rng(5).standard_normal((10, 5))
    ref = eval_batch(p, X)
    eng = MLPPotential(p)
    v, G, lap = eng.value_grad_lap(X)
    assert np.abs(v - ref.value).max() < 1e-12
    assert np.abs(G - ref.grad).max() < 1e-12
    assert np.abs(lap - ref.laplacian).max() < 1e-12


def test_engine_vjp_matches_per_point_vjp():
    p = random_params(4, 16, seed=16)
    rng = np.random.default_rng(6)
    X = rng.standard_normal((7, 4))
    WG = rng.standard_normal((7, 4))
    WL = rng.standard_normal(7)
    eng = MLPPotential(p)
    flat, dX = eng.vjp(X, WG, WL)
    acc = np.zeros(p.size)
    for i in range(7):
        g, dx = param_vjp(p, X[i], WG[i], WL[i])
        acc += g.to_vector()
        assert np.abs(dX[i] - dx).max() < 1e-12
    assert np.abs(flat - acc).max() < 1e-10


def test_to_from_vector_roundtrip():
    p = random_params(3, 5, seed=17)
    q = PotentialParams.from_vector(p.to_vector(), 3, 5)
    assert np.array_equal(p.W, q.W) and np.array_equal(p.b, q.b)
    assert np.array_equal(p.a, q.a) and p.c == q.c


def test_init_params_scales():
    rng = np.random.default_rng(0)
    p = init_params(9, 100, rng)
    assert np.abs(p.W).max() <= 1.0 / 3.0
    assert np.abs(p.a).max() <= 0.1
    assert np.array_equal(p.b, np.zeros(100)) and p.c == 0.0
