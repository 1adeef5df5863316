"""Inner denoising problems: modified semismooth Newton iterations.

Solves the regularized Euler-Lagrange systems for u at fixed fidelity
weights. All linear systems are 9-point-stencil banded and solved exactly
by a band LU factorization. Each solve returns the primal iterate, the TV
dual iterate q and a residual trace.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from . import fidelity as fid
from .grid import DIRICHLET, ImageGrid, VectorField, diff_ops
from .regularizer import (C1_FORM, MAX_FORM, HuberParams, h_gamma,
                          huber_value, newton_diffusion_matrix)

ABS_RESIDUAL_FLOOR = 1e-14


@dataclass
class SolverConfig:
    epsilon: float = 1e-12
    huber: HuberParams = field(default_factory=lambda: HuberParams(100.0))
    tol_ssn: float = 1e-8
    max_ssn: int = 100
    max_backtracks: int = 10  # 0 disables damping
    boundary: str = DIRICHLET
    u_floor: float = 1e-6

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.tol_ssn < 1:
            raise ValueError("tol_ssn must be in (0, 1)")
        if self.max_ssn < 1:
            raise ValueError("max_ssn must be >= 1")


@dataclass
class SsnTrace:
    residuals: list = field(default_factory=list)
    converged: bool = False
    backtracks: int = 0
    clamp_fractions: list = field(default_factory=list)

    @property
    def iterations(self):
        return max(len(self.residuals) - 1, 0)


class SsnError(RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


def band_solve(A, b):
    """Solve A x = b via LU factorization in banded storage (LAPACK gbsv)."""
    Ad = sp.dia_matrix(A)
    offsets = np.asarray(Ad.offsets)
    k = int(np.max(np.abs(offsets)))
    n = Ad.shape[0]
    ab = np.zeros((2 * k + 1, n))
    for m, off in enumerate(offsets):
        ab[k - off, :] = Ad.data[m, :]
    try:
        x = scipy.linalg.solve_banded((k, k), ab, b)
    except (scipy.linalg.LinAlgError, ValueError) as exc:
        raise SsnError(f"band LU failed: {exc}") from exc
    scale = np.linalg.norm(b) + np.finfo(float).tiny
    if np.linalg.norm(A @ x - b) > 1e-13 * scale:
        # one step of iterative refinement
        x = x + scipy.linalg.solve_banded((k, k), ab, b - A @ x)
    if not np.all(np.isfinite(x)):
        raise SsnError("band LU produced non-finite solution")
    if np.linalg.norm(A @ x - b) > 1e-9 * scale:
        raise SsnError("band LU residual too large (singular system?)")
    return x


def stiffness(ny, nx, h, boundary=DIRICHLET):
    """Discrete -Laplacian Dx^T Dx + Dy^T Dy (coefficient space)."""
    Dx, Dy = diff_ops(ny, nx, h, boundary)
    return (Dx.T @ Dx + Dy.T @ Dy).tocsr()


def _tv_matrix(Dx, Dy, J):
    """G^T J G for a per-cell 2x2 field J of shape (N, 2, 2)."""
    return (Dx.T @ sp.diags(J[:, 0, 0]) @ Dx
            + Dx.T @ sp.diags(J[:, 0, 1]) @ Dy
            + Dy.T @ sp.diags(J[:, 1, 0]) @ Dx
            + Dy.T @ sp.diags(J[:, 1, 1]) @ Dy)


def _apply_J(J, v):
    """Pointwise 2x2 times 2-vector, shapes (N,2,2) x (N,2) -> (N,2)."""
    return np.einsum("nij,nj->ni", J, v)


def assemble_newton_system(u: ImageGrid, q: VectorField, lams, specs,
                           cfg: SolverConfig, p_duals=None, modified=True):
    """Newton matrix and residual for the primal equation
    -eps*lap(u) - div h_gamma(grad u) + sum_i lam_i dphi_i(u) = 0.

    Returns (A, R) in coefficient space; A is a banded sparse matrix with
    9-point stencil bandwidth.
    """
    ny, nx = u.shape
    Dx, Dy = diff_ops(ny, nx, u.h, cfg.boundary)
    v = u.ravel()
    z = np.stack([Dx @ v, Dy @ v], axis=-1)
    hg = h_gamma(z, cfg.huber)
    R = (cfg.epsilon * ((Dx.T @ (Dx @ v)) + (Dy.T @ (Dy @ v)))
         + Dx.T @ hg[:, 0] + Dy.T @ hg[:, 1])
    c = np.zeros_like(v)
    for i, (lam, spec) in enumerate(zip(lams, specs)):
        R = R + lam * fid.dphi(u, spec).ravel()
        dual = None
        if spec.kind == fid.IMPULSE and p_duals is not None:
            dual = p_duals[i]
        c = c + lam * fid.d2phi(u, spec, dual=dual).ravel()
    use_mod = modified and cfg.huber.variant == MAX_FORM
    J = newton_diffusion_matrix(z, q.stacked() if use_mod else None,
                                cfg.huber, modified=use_mod)
    K = Dx.T @ Dx + Dy.T @ Dy
    A = (cfg.epsilon * K + _tv_matrix(Dx, Dy, J) + sp.diags(c)).tocsr()
    return A, R


def _solve_primal(f: ImageGrid, lams, specs, cfg: SolverConfig, u0=None):
    """Shared SSN loop for the Gaussian and impulse lower-level problems."""
    for lam in lams:
        if lam < 0:
            raise ValueError("fidelity weights must be nonnegative")
    ny, nx = f.shape
    h = f.h
    Dx, Dy = diff_ops(ny, nx, h, cfg.boundary)
    K = (Dx.T @ Dx + Dy.T @ Dy).tocsr()
    hp = cfg.huber
    use_mod = hp.variant == MAX_FORM

    if hp.variant == C1_FORM and u0 is None:
        # the plain C1 Newton is only locally fast; globalize by warm
        # starting from the modified max-form iterate
        from dataclasses import replace
        pre = replace(cfg, huber=HuberParams(hp.gamma, hp.g_cap, MAX_FORM),
                      tol_ssn=1e-6)
        try:
            u0, _, _, _ = _solve_primal(f, lams, specs, pre)
        except SsnError:
            u0 = None

    clamp = any(s.kind == fid.POISSON for s in specs)

    def project(uv):
        return np.maximum(uv, cfg.u_floor) if clamp else uv

    u = project((u0.values if u0 is not None else f.values).copy().ravel())
    z = np.stack([Dx @ u, Dy @ u], axis=-1)
    q = h_gamma(z, hp)
    p_duals = [fid.dphi(ImageGrid(u.reshape(ny, nx), h), s).ravel()
               if s.kind == fid.IMPULSE else None for s in specs]

    def residual(uv):
        zz = np.stack([Dx @ uv, Dy @ uv], axis=-1)
        hg = h_gamma(zz, hp)
        R = (cfg.epsilon * (Dx.T @ (Dx @ uv) + Dy.T @ (Dy @ uv))
             + Dx.T @ hg[:, 0] + Dy.T @ hg[:, 1])
        ug = ImageGrid(uv.reshape(ny, nx), h)
        for lam, spec in zip(lams, specs):
            R = R + lam * fid.dphi(ug, spec).ravel()
        return R

    def energy(uv):
        # discrete energy in coefficient scale (h^2 factored out); the
        # residual R is its gradient, so R-descent or E-descent both
        # certify progress toward the unique minimizer
        zz = np.stack([Dx @ uv, Dy @ uv], axis=-1)
        ug = ImageGrid(uv.reshape(ny, nx), h)
        val = 0.5 * cfg.epsilon * np.sum(zz ** 2) \
            + np.sum(huber_value(zz, hp))
        for lam, spec in zip(lams, specs):
            val += lam * fid.phi(ug, spec) / h ** 2
        return val

    def res_norm(uv, R):
        # projected (KKT) residual: at the positivity bound only the part
        # pushing below the floor counts as unresolved
        if clamp:
            R = np.where((uv <= cfg.u_floor) & (R > 0), 0.0, R)
        return h * np.linalg.norm(R)

    trace = SsnTrace()
    R = residual(u)
    rnorm = res_norm(u, R)
    E = energy(u)
    trace.residuals.append(rnorm)
    # tolerance is relative to the problem-scale residual at the cold
    # start u = f, so warm starts keep the same absolute target
    f0 = project(f.ravel())
    r_ref = max(rnorm, res_norm(f0, residual(f0))
                if u0 is not None else rnorm)
    tol = max(cfg.tol_ssn * r_ref, ABS_RESIDUAL_FLOOR)
    escapes = 0

    for _ in range(cfg.max_ssn):
        if rnorm <= tol:
            trace.converged = True
            break
        z = np.stack([Dx @ u, Dy @ u], axis=-1)
        J = newton_diffusion_matrix(z, q if use_mod else None, hp,
                                    modified=use_mod)
        c = np.zeros_like(u)
        ug = ImageGrid(u.reshape(ny, nx), h)
        for i, (lam, spec) in enumerate(zip(lams, specs)):
            if spec.kind == fid.IMPULSE:
                c += lam * fid.d2phi(ug, spec, dual=p_duals[i]).ravel()
            else:
                c += lam * fid.d2phi(ug, spec).ravel()
        def damp(du):
            # accept on residual OR energy decrease: the energy test keeps
            # the globalization effective at nonsmooth kinks where the
            # residual norm is locally non-descending
            step = 1.0
            u_new = project(u + du)
            R_new = residual(u_new)
            rnorm_new = res_norm(u_new, R_new)
            E_new = energy(u_new)
            bt = 0
            while not (rnorm_new < rnorm or E_new < E) and \
                    bt < cfg.max_backtracks:
                step *= 0.5
                bt += 1
                u_new = project(u + step * du)
                R_new = residual(u_new)
                rnorm_new = res_norm(u_new, R_new)
                E_new = energy(u_new)
            return step, u_new, R_new, rnorm_new, E_new, bt

        def isotropic_system():
            # zero-dual, SPD safeguard system (lagged-diffusivity style)
            J0 = newton_diffusion_matrix(z, np.zeros_like(z),
                                         HuberParams(hp.gamma), modified=True)
            c0 = np.zeros_like(u)
            for lam, spec in zip(lams, specs):
                if spec.kind == fid.IMPULSE:
                    c0 += lam * fid.d2phi(ug, spec,
                                          dual=np.zeros_like(u)).ravel()
                else:
                    c0 += lam * fid.d2phi(ug, spec).ravel()
            A0 = (cfg.epsilon * K + _tv_matrix(Dx, Dy, J0)
                  + sp.diags(c0)).tocsr()
            return A0, J0

        def freeze_active(A, rhs):
            # active-set reduction: variables held at the positivity bound
            # by a positive residual get an identity row (du = 0)
            if not clamp:
                return A, rhs
            m = np.where((u <= cfg.u_floor) & (R > 0), 0.0, 1.0)
            Dm = sp.diags(m)
            return (Dm @ A @ Dm + sp.diags(1.0 - m)).tocsr(), rhs * m

        A = (cfg.epsilon * K + _tv_matrix(Dx, Dy, J) + sp.diags(c)).tocsr()
        A, rhs = freeze_active(A, -R)
        try:
            du = band_solve(A, rhs)
            step, u_new, R_new, rnorm_new, E_new, bt = damp(du)
            trace.backtracks += bt
            accepted = rnorm_new < rnorm or E_new < E
        except SsnError:
            accepted = False
        if not accepted:
            A, J = isotropic_system()
            A, rhs = freeze_active(A, -R)
            du = band_solve(A, rhs)
            step, u_new, R_new, rnorm_new, E_new, bt = damp(du)
            trace.backtracks += bt
            if not (rnorm_new < rnorm or E_new < E) and escapes < 10:
                # both directions blocked by a nonsmooth kink: accept the
                # safeguard step non-monotonically to move past it
                escapes += 1
                step = 1.0
                u_new = project(u + du)
                R_new = residual(u_new)
                rnorm_new = res_norm(u_new, R_new)
                E_new = energy(u_new)

        gdu = np.stack([Dx @ (step * du), Dy @ (step * du)], axis=-1)
        q = h_gamma(z, hp) + _apply_J(J, gdu)
        for i, spec in enumerate(specs):
            if spec.kind == fid.IMPULSE:
                coef = fid.d2phi(ug, spec, dual=p_duals[i]).ravel()
                p_duals[i] = fid.dphi(ug, spec).ravel() + coef * step * du
        if clamp:
            trace.clamp_fractions.append(
                float(np.mean(u + step * du < cfg.u_floor)))
        u, R, rnorm, E = u_new, R_new, rnorm_new, E_new
        trace.residuals.append(rnorm)
    else:
        if rnorm <= tol:
            trace.converged = True

    if not trace.converged:
        raise SsnError(
            f"SSN did not converge in {cfg.max_ssn} iterations "
            f"(residual {rnorm:.3e}, target {tol:.3e})", trace)

    ug = ImageGrid(u.reshape(ny, nx), h)
    qf = VectorField(q[:, 0].reshape(ny, nx), q[:, 1].reshape(ny, nx), h)
    return ug, qf, p_duals, trace


def solve_gaussian(f: ImageGrid, lam, cfg: SolverConfig, u0=None):
    """Solve -eps*lap(u) - div h_gamma(grad u) + lam*(u - f) = 0."""
    spec = fid.FidelitySpec(fid.GAUSSIAN, f)
    u, q, _, trace = _solve_primal(f, [lam], [spec], cfg, u0=u0)
    return u, q, trace


def solve_impulse(f: ImageGrid, lam, cfg: SolverConfig, gamma_l1=None,
                  u0=None):
    """Huberized L1-TV problem: -eps*lap(u) - div q + lam*p = 0 with both
    q and p given by their Huber formulas."""
    if gamma_l1 is None:
        gamma_l1 = cfg.huber.gamma  # common regularization parameter
    spec = fid.FidelitySpec(fid.IMPULSE, f, gamma_l1=gamma_l1)
    u, q, p_duals, trace = _solve_primal(f, [lam], [spec], cfg, u0=u0)
    p = ImageGrid(p_duals[0].reshape(f.shape), f.h)
    return u, q, p, trace


def gaussian_energy(u: ImageGrid, f: ImageGrid, lam, cfg: SolverConfig):
    """Discrete energy eps/2 ||grad u||^2 + int huber(grad u) + lam/2 ||u-f||^2."""
    from .grid import grad, inner
    from .regularizer import huber_value
    gu = grad(u, cfg.boundary)
    z = gu.stacked()
    tv = u.h ** 2 * np.sum(huber_value(z, cfg.huber))
    d = ImageGrid(u.values - f.values, u.h)
    return 0.5 * cfg.epsilon * inner(gu, gu) + tv + 0.5 * lam * inner(d, d)


def solve_gauss_poisson(f: ImageGrid, lam1, lam2, cfg: SolverConfig, u0=None):
    """Mixed Gaussian+Poisson lower-level problem.

    The optimality condition is the u-multiplied Euler-Lagrange equation
        u * (-eps*lap(u) - div q + lam1*(u-f)) + lam2*(u-f) = 0.
    The iteration works on the equivalent un-multiplied gradient equation
    (the Kullback-Leibler derivative 1 - f/u kept finite by clamping u to
    u_floor), whose Newton systems stay positive definite; the multiplied
    residual vanishes together with it since it equals u times the plain
    one. Convergence is certified on the multiplied residual.
    """
    if lam1 < 0 or lam2 < 0:
        raise ValueError("fidelity weights must be nonnegative")
    if lam1 == 0 and lam2 == 0:
        raise ValueError("at least one weight must be positive")
    if lam2 > 0 and np.any(f.values < 0):
        raise ValueError("Poisson fidelity requires nonnegative data")

    fpos = ImageGrid(np.maximum(f.values, 0.0), f.h)
    specs = [fid.FidelitySpec(fid.GAUSSIAN, f),
             fid.FidelitySpec(fid.POISSON, fpos, u_floor=cfg.u_floor)]
    u, q, _, trace = _solve_primal(f, [lam1, lam2], specs, cfg, u0=u0)
    return u, q, trace


def gauss_poisson_residual(u: ImageGrid, f: ImageGrid, lam1, lam2,
                           cfg: SolverConfig):
    """h-weighted norm of the multiplied-equation residual at u."""
    Dx, Dy = diff_ops(u.shape[0], u.shape[1], u.h, cfg.boundary)
    uv = u.ravel()
    z = np.stack([Dx @ uv, Dy @ uv], axis=-1)
    hg = h_gamma(z, cfg.huber)
    gauss = (cfg.epsilon * (Dx.T @ (Dx @ uv) + Dy.T @ (Dy @ uv))
             + Dx.T @ hg[:, 0] + Dy.T @ hg[:, 1] + lam1 * (uv - f.ravel()))
    return float(u.h * np.linalg.norm(uv * gauss + lam2 * (uv - f.ravel())))
