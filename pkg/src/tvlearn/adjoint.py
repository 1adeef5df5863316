"""Linearized state equation, adjoint equation and the reduced gradient.

The linearized operator is assembled from the C1 smoothing of the TV term
(the max-form smoothing is not differentiable); when the state was solved
with the max form, the C1 diffusion matrix is assembled at the same gamma
with cap 1, which keeps both smoothings within 1/(2*gamma) of each other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import fidelity as fid
from .grid import ImageGrid, diff_ops, inner
from .regularizer import h_gamma, newton_diffusion_matrix
from .state_solver import SolverConfig, _tv_matrix, band_solve


@dataclass
class AdjointData:
    p: ImageGrid
    mu: np.ndarray
    grad_f: np.ndarray


def active_mask(u_bar: ImageGrid, lams, specs, cfg: SolverConfig):
    """0/1 mask of pixels free to move; None when no bound is involved.

    With a Poisson term the state solver keeps u at the positivity floor
    wherever the optimality residual pushes below it. The solution map is
    insensitive to the weights at those pixels, so the linearized and
    adjoint systems replace the corresponding rows by identity rows,
    mirroring the solver's active-set freezing.
    """
    if not any(s.kind == fid.POISSON for s in specs):
        return None
    ny, nx = u_bar.shape
    Dx, Dy = diff_ops(ny, nx, u_bar.h, cfg.boundary)
    v = u_bar.ravel()
    z = np.stack([Dx @ v, Dy @ v], axis=-1)
    hg = h_gamma(z, cfg.huber)
    R = (cfg.epsilon * (Dx.T @ (Dx @ v) + Dy.T @ (Dy @ v))
         + Dx.T @ hg[:, 0] + Dy.T @ hg[:, 1])
    for lam, spec in zip(lams, specs):
        R = R + lam * fid.dphi(u_bar, spec).ravel()
    return np.where((v <= cfg.u_floor) & (R > 0), 0.0, 1.0)


def linearized_operator(u_bar: ImageGrid, lams, specs, cfg: SolverConfig,
                        mask=None):
    """Coefficient-space matrix of the linearized state equation
    eps*(Dz,Dv) + (h'(Du)Dz,Dv) + sum_i lam_i (phi_i''(u) z, v),
    with rows/columns of bound-active pixels replaced by identity."""
    ny, nx = u_bar.shape
    Dx, Dy = diff_ops(ny, nx, u_bar.h, cfg.boundary)
    v = u_bar.ravel()
    z = np.stack([Dx @ v, Dy @ v], axis=-1)
    hp = cfg.huber.as_c1()
    M = newton_diffusion_matrix(z, None, hp)
    c = np.zeros_like(v)
    for lam, spec in zip(lams, specs):
        c1 = spec.kind == fid.IMPULSE
        c = c + lam * fid.d2phi(u_bar, spec, c1=c1).ravel()
    K = Dx.T @ Dx + Dy.T @ Dy
    L = cfg.epsilon * K + _tv_matrix(Dx, Dy, M) + sp.diags(c)
    if mask is not None:
        Dm = sp.diags(mask)
        L = Dm @ L @ Dm + sp.diags(1.0 - mask)
    return L.tocsr()


def solve_linearized(u_bar: ImageGrid, lams, xi, specs, cfg: SolverConfig,
                     operator=None) -> ImageGrid:
    """Directional derivative z of the solution map at u_bar in direction xi."""
    mask = active_mask(u_bar, lams, specs, cfg)
    L = linearized_operator(u_bar, lams, specs, cfg, mask) if operator is None \
        else operator
    rhs = np.zeros(u_bar.values.size)
    for x, spec in zip(xi, specs):
        rhs -= x * fid.dphi(u_bar, spec).ravel()
    if mask is not None:
        rhs *= mask
    z = band_solve(L, rhs)
    return ImageGrid(z.reshape(u_bar.shape), u_bar.h)


def solve_adjoint(u_bar: ImageGrid, lams, rhs: ImageGrid, specs,
                  cfg: SolverConfig, operator=None) -> ImageGrid:
    """Adjoint state p: L^T p = -rhs with rhs = g'(u_bar).

    Components at bound-active pixels are zeroed so pairings with the
    fidelity derivatives only see the free pixels.
    """
    mask = active_mask(u_bar, lams, specs, cfg)
    L = linearized_operator(u_bar, lams, specs, cfg, mask) if operator is None \
        else operator
    p = band_solve(L.T.tocsr(), -rhs.ravel())
    if mask is not None:
        p = p * mask
    return ImageGrid(p.reshape(u_bar.shape), u_bar.h)


def reduced_gradient(lams, u_bar: ImageGrid, p: ImageGrid, specs, beta):
    """Component i: 2*beta*lam_i + inner(dphi_i(u_bar), p)."""
    lams = np.asarray(lams, dtype=float)
    out = 2.0 * beta * lams
    for i, spec in enumerate(specs):
        out[i] += inner(fid.dphi(u_bar, spec), p)
    return out


def multipliers(lams, u_bar: ImageGrid, p: ImageGrid, specs, beta):
    """KKT multipliers mu_i = 2*beta*lam_i + int p * dphi_i(u_bar)."""
    return reduced_gradient(lams, u_bar, p, specs, beta)


def kkt_residuals(lams, mu):
    """(stationarity, complementarity, feasibility) max-norm residuals."""
    lams = np.asarray(lams, dtype=float)
    mu = np.asarray(mu, dtype=float)
    stationarity = float(np.max(np.maximum(0.0, -mu), initial=0.0))
    complementarity = float(np.max(np.abs(mu * lams), initial=0.0))
    feasibility = float(np.max(np.maximum(0.0, -lams), initial=0.0))
    return stationarity, complementarity, feasibility
