"""Linearized and adjoint equations, reduced gradient, KKT residuals."""

import numpy as np
import pytest

from tvlearn import add_noise, phantom
from tvlearn.adjoint import (active_mask, kkt_residuals, linearized_operator,
                             multipliers, reduced_gradient, solve_adjoint,
                             solve_linearized)
from tvlearn.fidelity import (GAUSSIAN, POISSON, FidelitySpec,
                              tracking_gradient)
from tvlearn.grid import ImageGrid, inner, norm_l2
from tvlearn.regularizer import C1_FORM, HuberParams
from tvlearn.state_solver import SolverConfig, solve_gaussian
from tvlearn import fidelity as fid


CFG = SolverConfig(huber=HuberParams(100.0, 1.0, C1_FORM))


def gaussian_setup(n=24, lam=150.0, seed=0):
    truth = phantom(n)
    f = add_noise(truth, "gaussian", seed, variance=0.005)
    u, _, _ = solve_gaussian(f, lam, CFG)
    specs = [FidelitySpec(GAUSSIAN, f)]
    return truth, f, u, specs


def test_zero_direction_gives_zero_sensitivity():
    _, _, u, specs = gaussian_setup()
    z = solve_linearized(u, [150.0], [0.0], specs, CFG)
    assert np.max(np.abs(z.values)) == 0.0


def test_linearized_matches_directional_fd():
    truth = phantom(32)
    f = add_noise(truth, "gaussian", 1, variance=0.005)
    lam, xi, t = 150.0, 1.0, 1e-5
    u, _, _ = solve_gaussian(f, lam, CFG)
    up, _, _ = solve_gaussian(f, lam + t * xi, CFG, u0=u)
    fd = ImageGrid((up.values - u.values) / t, u.h)
    z = solve_linearized(u, [lam], [xi], [FidelitySpec(GAUSSIAN, f)], CFG)
    err = norm_l2(ImageGrid(z.values - fd.values, u.h)) / norm_l2(fd)
    assert err < 1e-3


def test_adjoint_zero_rhs_gives_zero():
    _, _, u, specs = gaussian_setup()
    rhs = ImageGrid(np.zeros(u.shape), u.h)
    p = solve_adjoint(u, [150.0], rhs, specs, CFG)
    assert np.max(np.abs(p.values)) == 0.0


def test_duality_identity():
    truth, f, u, specs = gaussian_setup(seed=2)
    rhs = tracking_gradient(u, truth)
    p = solve_adjoint(u, [150.0], rhs, specs, CFG)
    rng = np.random.default_rng(3)
    for _ in range(10):
        xi = rng.standard_normal(1)
        z = solve_linearized(u, [150.0], xi, specs, CFG)
        lhs = inner(rhs, z)
        rhs_sum = sum(x * inner(fid.dphi(u, s), p)
                      for x, s in zip(xi, specs))
        assert abs(lhs - rhs_sum) <= 1e-10


def test_operator_transpose_consistency():
    _, _, u, specs = gaussian_setup(seed=4)
    L = linearized_operator(u, [150.0], specs, CFG)
    rng = np.random.default_rng(5)
    for _ in range(10):
        a = rng.standard_normal(u.values.size)
        b = rng.standard_normal(u.values.size)
        assert abs((L @ a) @ b - a @ (L.T @ b)) <= \
            1e-12 * max(abs((L @ a) @ b), 1.0)


def test_gaussian_operator_self_adjoint():
    # with the Gaussian fidelity the linearized operator is symmetric, so
    # the adjoint solve equals the forward operator inverse applied to -rhs
    truth, f, u, specs = gaussian_setup(seed=6)
    L = linearized_operator(u, [150.0], specs, CFG)
    assert abs(L - L.T).max() <= 1e-10
    rhs = tracking_gradient(u, truth)
    p = solve_adjoint(u, [150.0], rhs, specs, CFG)
    from tvlearn.state_solver import band_solve
    direct = band_solve(L, -rhs.ravel())
    assert np.max(np.abs(p.ravel() - direct)) <= 1e-10


def test_operator_positive_definite():
    _, _, u, specs = gaussian_setup(seed=7)
    L = linearized_operator(u, [150.0], specs, CFG)
    rng = np.random.default_rng(8)
    for _ in range(100):
        v = rng.standard_normal(u.values.size)
        assert v @ (L @ v) > 0.0


def test_reduced_gradient_with_zero_adjoint():
    _, _, u, specs = gaussian_setup(seed=9)
    p = ImageGrid(np.zeros(u.shape), u.h)
    lam = np.array([42.0])
    beta = 1e-6
    np.testing.assert_allclose(reduced_gradient(lam, u, p, specs, beta),
                               2 * beta * lam)


def test_active_mask_only_for_poisson():
    _, f, u, specs = gaussian_setup(seed=10)
    assert active_mask(u, [150.0], specs, CFG) is None
    specs_gp = [FidelitySpec(GAUSSIAN, f), FidelitySpec(POISSON, f)]
    m = active_mask(u, [150.0, 10.0], specs_gp, CFG)
    assert m is not None and set(np.unique(m)) <= {0.0, 1.0}


def test_kkt_residuals():
    stat, compl, feas = kkt_residuals([2.0, 0.0], [0.0, 0.5])
    assert (stat, compl, feas) == (0.0, 0.0, 0.0)
    stat, compl, feas = kkt_residuals([2.0, -0.1], [-0.3, 0.5])
    assert stat == pytest.approx(0.3)
    assert compl == pytest.approx(0.6)
    assert feas == pytest.approx(0.1)


def test_multipliers_equal_reduced_gradient():
    truth, _, u, specs = gaussian_setup(seed=11)
    rhs = tracking_gradient(u, truth)
    p = solve_adjoint(u, [150.0], rhs, specs, CFG)
    lam = np.array([150.0])
    np.testing.assert_allclose(
        multipliers(lam, u, p, specs, 1e-10),
        reduced_gradient(lam, u, p, specs, 1e-10))
