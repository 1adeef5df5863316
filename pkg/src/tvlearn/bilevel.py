"""Outer optimization over the fidelity weights: projected BFGS.

The reduced cost is 1/2 ||u(lam) - u_o||^2 + beta*sum(lam_i^2), where
u(lam) solves the inner denoising problem. Gradients are evaluated either
by forward finite differences of the reduced cost (default) or by one
adjoint solve per outer iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import adjoint as adj
from . import fidelity as fid
from . import state_solver as ss
from .grid import ImageGrid

FORWARD_FD = "forward_fd"
ADJOINT = "adjoint"


@dataclass
class DenoiseProblem:
    """One training pair plus the inner-solver setup.

    kinds selects the lower-level model: ('gaussian',), ('gaussian',
    'poisson') or ('impulse',). gamma_l1 defaults to the TV Huber gamma.
    """

    f: ImageGrid
    u_o: ImageGrid
    kinds: tuple = (fid.GAUSSIAN,)
    solver: ss.SolverConfig = field(default_factory=ss.SolverConfig)
    gamma_l1: float = None

    def __post_init__(self):
        if self.f.shape != self.u_o.shape:
            raise ValueError("noisy and ground-truth images must match")
        valid = ((fid.GAUSSIAN,), (fid.GAUSSIAN, fid.POISSON), (fid.IMPULSE,))
        if tuple(self.kinds) not in valid:
            raise ValueError(f"unsupported model combination {self.kinds!r}")

    @property
    def dim(self):
        return len(self.kinds)

    def specs(self):
        gl1 = self.gamma_l1 if self.gamma_l1 is not None \
            else self.solver.huber.gamma
        return [fid.FidelitySpec(k, self.f, gamma_l1=gl1,
                                 u_floor=self.solver.u_floor)
                for k in self.kinds]

    def solve(self, lams, u0=None):
        """Inner solve; returns (u, trace).

        A failed warm-started solve is retried once from a cold start
        before the error is propagated.
        """
        try:
            return self._solve(lams, u0)
        except ss.SsnError:
            if u0 is None:
                raise
            return self._solve(lams, None)

    def _solve(self, lams, u0):
        kinds = tuple(self.kinds)
        if kinds == (fid.GAUSSIAN,):
            u, _, trace = ss.solve_gaussian(self.f, lams[0], self.solver,
                                            u0=u0)
        elif kinds == (fid.GAUSSIAN, fid.POISSON):
            u, _, trace = ss.solve_gauss_poisson(self.f, lams[0], lams[1],
                                                 self.solver, u0=u0)
        else:
            gl1 = self.gamma_l1 if self.gamma_l1 is not None \
                else self.solver.huber.gamma
            u, _, _, trace = ss.solve_impulse(self.f, lams[0], self.solver,
                                              gamma_l1=gl1, u0=u0)
        return u, trace


@dataclass
class BilevelConfig:
    beta: float = 1e-10
    alpha: float = 0.5           # fixed line-search step length
    grad_mode: str = FORWARD_FD
    fd_step: float = 1e-3        # step delta_i = fd_step * max(1, lam_i)
    tol_grad: float = 1e-9
    tol_cost: float = 1e-11
    max_iter: int = 60
    lambda0: np.ndarray = None
    backtracking: bool = False
    max_backtracks: int = 8
    max_rel_step: float = 1.0    # cap ||step|| at max_rel_step*(1+||lam||)

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must be in (0, 1]")
        if self.grad_mode not in (FORWARD_FD, ADJOINT):
            raise ValueError(f"unknown grad_mode {self.grad_mode!r}")
        if self.lambda0 is not None:
            self.lambda0 = np.asarray(self.lambda0, dtype=float)
            if np.any(self.lambda0 < 0):
                raise ValueError("lambda0 must be nonnegative")


@dataclass
class BfgsTrace:
    lambdas: list = field(default_factory=list)
    costs: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    ssn_iterations: list = field(default_factory=list)
    converged: bool = False
    kkt: tuple = None

    @property
    def iterations(self):
        return len(self.costs)


def reduced_cost(lams, problem: DenoiseProblem, beta, u0=None):
    """Cost value, inner solution and its trace at weights lams."""
    lams = np.asarray(lams, dtype=float)
    u, trace = problem.solve(lams, u0=u0)
    value = fid.tracking_cost(u, problem.u_o) + beta * float(np.sum(lams ** 2))
    return value, u, trace


def fd_gradient(lams, problem: DenoiseProblem, beta, base=None, u_base=None,
                scheme="forward", step_scale=1e-3):
    """Finite-difference reduced gradient. Forward differences stay
    feasible at lam_i = 0; perturbed solves warm-start from u(lam)."""
    lams = np.asarray(lams, dtype=float)
    if base is None or u_base is None:
        base, u_base, _ = reduced_cost(lams, problem, beta)
    g = np.zeros_like(lams)
    for i in range(len(lams)):
        delta = step_scale * max(1.0, lams[i])
        lp = lams.copy()
        lp[i] += delta
        fp, _, _ = reduced_cost(lp, problem, beta, u0=u_base)
        if scheme == "central" and lams[i] - delta >= 0:
            lm = lams.copy()
            lm[i] -= delta
            fm, _, _ = reduced_cost(lm, problem, beta, u0=u_base)
            g[i] = (fp - fm) / (2 * delta)
        else:
            g[i] = (fp - base) / delta
    return g


def adjoint_gradient(lams, problem: DenoiseProblem, beta, u=None):
    """Reduced gradient via one adjoint solve; returns (gradient, p)."""
    lams = np.asarray(lams, dtype=float)
    if u is None:
        _, u, _ = reduced_cost(lams, problem, beta)
    specs = problem.specs()
    rhs = fid.tracking_gradient(u, problem.u_o)
    p = adj.solve_adjoint(u, lams, rhs, specs, problem.solver)
    return adj.reduced_gradient(lams, u, p, specs, beta), p


def _projected_gradient_norm(lams, g):
    return float(np.linalg.norm(lams - np.maximum(0.0, lams - g)))


def default_lambda0(problem: DenoiseProblem):
    """Gaussian-only heuristic 1/sigma^2 clipped to [1, 1e4]; 10 per
    component otherwise.

    The noise variance is estimated robustly from horizontal first
    differences of f (MAD scaled for a Gaussian), which discounts the
    image content for piecewise-smooth images.
    """
    if tuple(problem.kinds) == (fid.GAUSSIAN,):
        d = np.diff(problem.f.values, axis=1).ravel()
        sigma = 1.4826 * np.median(np.abs(d - np.median(d))) / np.sqrt(2.0)
        v = float(sigma ** 2)
        return np.array([np.clip(1.0 / max(v, 1e-12), 1.0, 1e4)])
    return np.full(problem.dim, 10.0)


def projected_bfgs(problem: DenoiseProblem, cfg: BilevelConfig,
                   gradient=None, cost_fn=None):
    """Projected BFGS over lam >= 0 with fixed step length alpha.

    gradient/cost_fn hooks allow training-set aggregation and testing with
    closed-form inner maps; defaults evaluate the single-pair reduced cost.
    """
    beta = cfg.beta
    if cost_fn is None and gradient is not None or \
            cost_fn is not None and gradient is None:
        raise ValueError("provide both cost_fn and gradient hooks, or neither")
    if cost_fn is None:
        state = {"u": None}

        def cost_fn(lams):
            value, u, trace = reduced_cost(lams, problem, beta,
                                           u0=state["u"])
            state["u"] = u
            return value, trace.iterations

    if gradient is None:
        if cfg.grad_mode == ADJOINT:
            def gradient(lams, value):
                g, _ = adjoint_gradient(lams, problem, beta, u=state["u"])
                return g
        else:
            def gradient(lams, value):
                return fd_gradient(lams, problem, beta, base=value,
                                   u_base=state["u"],
                                   step_scale=cfg.fd_step)

    lam = (cfg.lambda0 if cfg.lambda0 is not None
           else default_lambda0(problem)).astype(float).copy()
    d = len(lam)
    trace = BfgsTrace()

    value, nssn = cost_fn(lam)
    g = gradient(lam, value)
    H = np.eye(d) / max(float(np.linalg.norm(g)), 1e-14)

    for _ in range(cfg.max_iter):
        pg = _projected_gradient_norm(lam, g)
        trace.lambdas.append(lam.copy())
        trace.costs.append(value)
        trace.grad_norms.append(pg)
        trace.ssn_iterations.append(nssn)

        if pg <= cfg.tol_grad * (1.0 + abs(value)):
            trace.converged = True
            break
        if len(trace.costs) > 3 and \
                trace.costs[-4] - value < cfg.tol_cost:
            trace.converged = True
            break

        direction = -H @ g
        # trust-region style cap: without it the scaled first steps can
        # jump across a narrow cost valley onto a flat plateau
        cap = cfg.max_rel_step * (1.0 + float(np.linalg.norm(lam)))
        dnorm = float(np.linalg.norm(direction))
        if dnorm > cap:
            direction *= cap / dnorm
        alpha = cfg.alpha
        lam_new = np.maximum(0.0, lam + alpha * direction)
        value_new, nssn = cost_fn(lam_new)
        if cfg.backtracking:
            bt = 0
            while value_new > value and bt < cfg.max_backtracks:
                alpha *= 0.5
                bt += 1
                lam_new = np.maximum(0.0, lam + alpha * direction)
                value_new, nssn = cost_fn(lam_new)
        g_new = gradient(lam_new, value_new)

        s = lam_new - lam
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            rho = 1.0 / sy
            V = np.eye(d) - rho * np.outer(s, y)
            H = V @ H @ V.T + rho * np.outer(s, s)
        lam, value, g = lam_new, value_new, g_new

    return lam, value, g, trace


def _finalize(problem, lam, cfg, trace):
    _, u, _ = reduced_cost(lam, problem, cfg.beta)
    specs = problem.specs()
    rhs = fid.tracking_gradient(u, problem.u_o)
    p = adj.solve_adjoint(u, lam, rhs, specs, problem.solver)
    mu = adj.multipliers(lam, u, p, specs, cfg.beta)
    grad_f = adj.reduced_gradient(lam, u, p, specs, cfg.beta)
    trace.kkt = adj.kkt_residuals(lam, mu)
    return adj.AdjointData(p=p, mu=mu, grad_f=grad_f), u


def learn_weights(problem: DenoiseProblem, cfg: BilevelConfig):
    """Full single-pair run: projected BFGS plus KKT data at the optimum.

    Returns (lambda_star, trace, adjoint_data, u_star).
    """
    lam, _, _, trace = projected_bfgs(problem, cfg)
    data, u = _finalize(problem, lam, cfg, trace)
    return lam, trace, data, u


def train_on_set(pairs, kinds, solver_cfg, cfg: BilevelConfig,
                 gamma_l1=None):
    """Learn one weight vector from several (noisy, ground truth) pairs by
    minimizing the averaged reduced cost."""
    if not pairs:
        raise ValueError("training set must contain at least one pair")
    problems = [DenoiseProblem(f, u_o, kinds, solver_cfg, gamma_l1)
                for f, u_o in pairs]
    shape = problems[0].f.shape
    for pr in problems:
        if pr.f.shape != shape:
            raise ValueError("all training pairs must share dimensions")
    n = len(problems)
    beta = cfg.beta
    warm = [None] * n
    if cfg.lambda0 is None:
        # combine the per-pair heuristics (geometric mean) so one clean
        # pair cannot start the run far from the averaged-cost optimum
        from dataclasses import replace
        lam0s = np.log([default_lambda0(pr) for pr in problems])
        cfg = replace(cfg, lambda0=np.exp(np.mean(lam0s, axis=0)))

    def cost_fn(lams):
        total, nssn = 0.0, 0
        for i, pr in enumerate(problems):
            u, tr = pr.solve(lams, u0=warm[i])
            warm[i] = u
            total += fid.tracking_cost(u, pr.u_o) / n
            nssn += tr.iterations
        return total + beta * float(np.sum(lams ** 2)), nssn

    def gradient(lams, value):
        g = np.zeros(len(lams))
        for i, pr in enumerate(problems):
            if cfg.grad_mode == ADJOINT:
                gi, _ = adjoint_gradient(lams, pr, beta, u=warm[i])
            else:
                base = fid.tracking_cost(warm[i], pr.u_o) \
                    + beta * float(np.sum(lams ** 2))
                gi = fd_gradient(lams, pr, beta, base=base, u_base=warm[i],
                                 step_scale=cfg.fd_step)
            # each gi already carries the shared Tikhonov part 2*beta*lam
            g += (gi - 2 * beta * lams) / n
        return g + 2 * beta * lams

    lam, _, _, trace = projected_bfgs(problems[0], cfg, gradient=gradient,
                                      cost_fn=cost_fn)
    return lam, trace
