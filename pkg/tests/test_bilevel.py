"""Outer optimization: reduced cost, FD gradients, projected BFGS, training."""

from types import SimpleNamespace

import numpy as np
import pytest

from tvlearn import add_noise, phantom
from tvlearn.bilevel import (BilevelConfig, DenoiseProblem, default_lambda0,
                             fd_gradient, learn_weights, projected_bfgs,
                             reduced_cost, train_on_set)
from tvlearn.fidelity import GAUSSIAN, IMPULSE, POISSON
from tvlearn.grid import ImageGrid, inner, spacing
from tvlearn.regularizer import HuberParams
from tvlearn.state_solver import SolverConfig


class LinearMapProblem:
    """Mock inner problem with the closed-form solution map
    u(lam) = sum_i lam_i * b_i, making the reduced cost quadratic."""

    def __init__(self, bases, u_o):
        self.bases = bases
        self.u_o = u_o
        self.dim = len(bases)
        self.calls = []

    def solve(self, lams, u0=None):
        lams = np.asarray(lams, dtype=float)
        self.calls.append(lams.copy())
        vals = sum(l * b.values for l, b in zip(lams, self.bases))
        return (ImageGrid(vals, self.u_o.h),
                SimpleNamespace(iterations=1))

    def analytic_gradient(self, lams, beta):
        u, _ = self.solve(lams)
        d = ImageGrid(u.values - self.u_o.values, u.h)
        return np.array([inner(b, d) for b in self.bases]) \
            + 2 * beta * np.asarray(lams, dtype=float)


def make_mock(target=(2.0, 3.0)):
    n = 8
    h = spacing(n)
    b0 = np.zeros((n, n))
    b0[:, : n // 2] = 1.0
    b1 = 1.0 - b0
    bases = [ImageGrid(b0, h), ImageGrid(b1, h)]
    u_o = ImageGrid(target[0] * b0 + target[1] * b1, h)
    return LinearMapProblem(bases, u_o)


def test_config_validation():
    with pytest.raises(ValueError):
        BilevelConfig(beta=0.0)
    with pytest.raises(ValueError):
        BilevelConfig(alpha=1.5)
    with pytest.raises(ValueError):
        BilevelConfig(grad_mode="spectral")
    with pytest.raises(ValueError):
        BilevelConfig(lambda0=[-1.0])


def test_problem_validation():
    f = phantom(16)
    with pytest.raises(ValueError):
        DenoiseProblem(f, phantom(24))
    with pytest.raises(ValueError):
        DenoiseProblem(f, f, kinds=(POISSON,))


def test_reduced_cost_at_zero_weights():
    truth = phantom(16)
    f = add_noise(truth, "gaussian", 0, variance=0.01)
    problem = DenoiseProblem(f, truth)
    beta = 1e-10
    value, u, _ = reduced_cost(np.zeros(1), problem, beta)
    assert np.max(np.abs(u.values)) <= 1e-10
    assert value == pytest.approx(0.5 * inner(truth, truth), rel=1e-8)


def test_reduced_cost_lower_bound():
    truth = phantom(16)
    f = add_noise(truth, "gaussian", 1, variance=0.01)
    problem = DenoiseProblem(f, truth)
    beta = 1e-6
    for lam in (1.0, 50.0, 400.0):
        value, _, _ = reduced_cost(np.array([lam]), problem, beta)
        assert value >= beta * lam ** 2


def test_fd_gradient_matches_quadratic_oracle():
    mock = make_mock()
    beta = 1e-8
    for lam in ([1.0, 1.0], [4.0, 0.5], [0.3, 6.0]):
        lam = np.array(lam)
        g_fd = fd_gradient(lam, mock, beta, scheme="central")
        g_ref = mock.analytic_gradient(lam, beta)
        assert np.linalg.norm(g_fd - g_ref) <= \
            1e-6 * max(np.linalg.norm(g_ref), 1.0)


def test_fd_gradient_stays_feasible_at_zero():
    mock = make_mock()
    lam = np.array([0.0, 2.0])
    fd_gradient(lam, mock, 1e-8, scheme="central")
    evaluated = np.array(mock.calls)
    assert np.all(evaluated >= 0.0)


def bfgs_on_mock(mock, lam0, beta=1e-10, max_iter=200):
    state = {}

    def cost_fn(lams):
        u, tr = mock.solve(lams)
        d = ImageGrid(u.values - mock.u_o.values, u.h)
        return 0.5 * inner(d, d) + beta * float(np.sum(lams ** 2)), 1

    def gradient(lams, value):
        return mock.analytic_gradient(lams, beta)

    cfg = BilevelConfig(beta=beta, lambda0=np.array(lam0), tol_grad=1e-12,
                        tol_cost=1e-16, max_iter=max_iter)
    return projected_bfgs(mock, cfg, gradient=gradient, cost_fn=cost_fn)


def test_projected_bfgs_solves_quadratic():
    mock = make_mock(target=(2.0, 3.0))
    lam, value, g, trace = bfgs_on_mock(mock, [1.0, 1.0])
    assert trace.converged
    np.testing.assert_allclose(lam, [2.0, 3.0], atol=1e-5)
    # feasibility of every iterate, exactly
    assert all(np.all(l >= 0.0) for l in trace.lambdas)


def test_projected_bfgs_activates_bound():
    # unconstrained optimum at (-1, 3): the projection pins lambda_0 at 0
    mock = make_mock(target=(-1.0, 3.0))
    lam, _, _, trace = bfgs_on_mock(mock, [1.0, 1.0])
    assert lam[0] == 0.0
    np.testing.assert_allclose(lam[1], 3.0, atol=1e-5)


def test_projected_bfgs_terminates_at_stationary_start():
    mock = make_mock(target=(2.0, 3.0))
    lam, _, _, trace = bfgs_on_mock(mock, [2.0, 3.0], beta=1e-14)
    assert trace.iterations <= 2
    np.testing.assert_allclose(lam, [2.0, 3.0], atol=1e-6)


def test_projected_bfgs_hook_validation():
    mock = make_mock()
    with pytest.raises(ValueError):
        projected_bfgs(mock, BilevelConfig(), gradient=lambda l, v: l)


def test_default_lambda0():
    truth = phantom(32)
    f = add_noise(truth, "gaussian", 2, variance=0.01)
    p = DenoiseProblem(f, truth)
    lam0 = default_lambda0(p)
    assert lam0.shape == (1,) and 1.0 <= lam0[0] <= 1e4
    # roughly the reciprocal noise variance
    assert 0.2 / 0.01 <= lam0[0] <= 5.0 / 0.01
    p2 = DenoiseProblem(f, truth, kinds=(GAUSSIAN, POISSON))
    np.testing.assert_allclose(default_lambda0(p2), [10.0, 10.0])


def learn_gaussian(variance, seed=3, n=32):
    truth = phantom(n)
    f = add_noise(truth, "gaussian", seed, variance=variance)
    problem = DenoiseProblem(f, truth)
    cfg = BilevelConfig()
    lam, trace, data, u = learn_weights(problem, cfg)
    return lam, trace, problem, cfg


def test_learned_weight_is_locally_optimal():
    lam, trace, problem, cfg = learn_gaussian(0.005)
    assert trace.converged
    best, _, _ = reduced_cost(lam, problem, cfg.beta)
    lo, _, _ = reduced_cost(lam / 10.0, problem, cfg.beta)
    hi, _, _ = reduced_cost(lam * 10.0, problem, cfg.beta)
    assert best < lo and best < hi


def test_weight_decreases_with_noise_variance():
    lams = [learn_gaussian(v)[0][0] for v in (0.002, 0.01, 0.02)]
    assert lams[0] > lams[1] > lams[2]


def test_learn_is_deterministic():
    lam1, tr1, _, _ = learn_gaussian(0.005, seed=4)
    lam2, tr2, _, _ = learn_gaussian(0.005, seed=4)
    assert np.array_equal(lam1, lam2)
    assert tr1.costs == tr2.costs
    assert all(np.array_equal(a, b)
               for a, b in zip(tr1.lambdas, tr2.lambdas))


def test_train_single_pair_matches_learn():
    truth = phantom(32)
    f = add_noise(truth, "gaussian", 5, variance=0.005)
    solver = SolverConfig()
    cfg = BilevelConfig()
    lam_single, trace_single, _, _ = learn_weights(
        DenoiseProblem(f, truth, solver=solver), cfg)
    lam_train, trace_train = train_on_set([(f, truth)], (GAUSSIAN,),
                                          solver, cfg)
    np.testing.assert_allclose(lam_train, lam_single, rtol=1e-10)
    np.testing.assert_allclose(trace_train.costs, trace_single.costs,
                               rtol=1e-10)


def test_train_duplicate_pairs_match_single():
    truth = phantom(32)
    f = add_noise(truth, "gaussian", 6, variance=0.005)
    solver = SolverConfig()
    cfg = BilevelConfig()
    lam1, _ = train_on_set([(f, truth)], (GAUSSIAN,), solver, cfg)
    lam2, _ = train_on_set([(f, truth), (f, truth)], (GAUSSIAN,),
                           solver, cfg)
    np.testing.assert_allclose(lam2, lam1, rtol=1e-8)


def test_train_mixed_noise_levels_interpolates():
    truth = phantom(32)
    f_lo = add_noise(truth, "gaussian", 7, variance=0.002)
    f_hi = add_noise(truth, "gaussian", 8, variance=0.02)
    solver = SolverConfig()
    cfg = BilevelConfig()
    lam_lo, _ = train_on_set([(f_lo, truth)], (GAUSSIAN,), solver, cfg)
    lam_hi, _ = train_on_set([(f_hi, truth)], (GAUSSIAN,), solver, cfg)
    lam_mix, _ = train_on_set([(f_lo, truth), (f_hi, truth)], (GAUSSIAN,),
                              solver, cfg)
    lo, hi = sorted([lam_lo[0], lam_hi[0]])
    assert lo < lam_mix[0] < hi


def test_train_validation():
    truth = phantom(16)
    with pytest.raises(ValueError):
        train_on_set([], (GAUSSIAN,), SolverConfig(), BilevelConfig())
    with pytest.raises(ValueError):
        train_on_set([(truth, truth), (phantom(24), phantom(24))],
                     (GAUSSIAN,), SolverConfig(), BilevelConfig())


def test_impulse_learning_improves_reconstruction():
    truth = phantom(32)
    f = add_noise(truth, "salt_pepper", 9, density=0.08)
    solver = SolverConfig(huber=HuberParams(50.0))
    problem = DenoiseProblem(f, truth, kinds=(IMPULSE,), solver=solver)
    lam, trace, data, u = learn_weights(problem, BilevelConfig())
    assert trace.costs[-1] < 0.5 * trace.costs[0]
