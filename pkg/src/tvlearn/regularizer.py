"""Huber smoothing of the total variation integrand.

Two interchangeable smoothings of the vector norm |z| are provided:

* MAX_FORM:  h(z) = gamma*z / max(1, gamma*|z|), the derivative of the
  Huber function. Used by the inner semismooth Newton solvers.
* C1_FORM:   a three-branch C^1 capped variant with cap parameter g_cap,
  needed wherever the smoothing itself must be differentiable (linearized
  and adjoint equations).

All functions are vectorized over leading axes; 2-vectors live on the
last axis of shape (..., 2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_FORM = "max"
C1_FORM = "c1"

_I2 = np.eye(2)


@dataclass(frozen=True)
class HuberParams:
    gamma: float
    g_cap: float = 1.0
    variant: str = MAX_FORM

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.variant not in (MAX_FORM, C1_FORM):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant == C1_FORM and not self.g_cap > 1.0 / (2.0 * self.gamma):
            raise ValueError("C1 form requires g_cap > 1/(2*gamma)")

    def as_c1(self):
        return HuberParams(self.gamma, self.g_cap, C1_FORM)


def _norm(z):
    z = np.asarray(z, dtype=float)
    return np.sqrt(np.sum(z * z, axis=-1))


def huber_value(z, p: HuberParams):
    """Huberized norm: |z| - 1/(2*gamma) above the kink 1/gamma,
    (gamma/2)|z|^2 below it."""
    g = p.gamma
    nz = _norm(z)
    return np.where(nz >= 1.0 / g, nz - 0.5 / g, 0.5 * g * nz ** 2)


def huber_value_scalar(r, gamma):
    """1D Huberized absolute value (for the L1 fidelity term)."""
    r = np.abs(np.asarray(r, dtype=float))
    return np.where(r >= 1.0 / gamma, r - 0.5 / gamma, 0.5 * gamma * r ** 2)


def h_gamma(z, p: HuberParams):
    z = np.asarray(z, dtype=float)
    nz = _norm(z)[..., None]
    g = p.gamma
    if p.variant == MAX_FORM:
        return g * z / np.maximum(1.0, g * nz)
    # C1 form: gamma*z below, capped at g_cap above, quadratic blend between.
    cap = p.g_cap
    safe = np.maximum(nz, np.finfo(float).tiny)
    direction = z / safe
    blend = cap - 0.5 * g * (cap - g * nz + 0.5 / g) ** 2
    out = np.where(g * nz <= cap - 0.5 / g, g * z,
                   np.where(g * nz >= cap + 0.5 / g, cap * direction,
                            blend * direction))
    return out


def chi_gamma(z, p: HuberParams):
    """Scalar factor of the C1 smoothing: h_gamma(z) = (z/|z|) * chi_gamma(z)."""
    if p.variant != C1_FORM:
        raise ValueError("chi_gamma is defined for the C1 variant only")
    g, cap = p.gamma, p.g_cap
    nz = _norm(z)
    blend = cap - 0.5 * g * (cap - g * nz + 0.5 / g) ** 2
    return np.where(g * nz <= cap - 0.5 / g, g * nz,
                    np.where(g * nz >= cap + 0.5 / g, cap, blend))


def _chi_gamma_prime(nz, p: HuberParams):
    """Derivative of chi_gamma with respect to |z|."""
    g, cap = p.gamma, p.g_cap
    return np.where(g * nz <= cap - 0.5 / g, g,
                    np.where(g * nz >= cap + 0.5 / g, 0.0,
                             g ** 2 * (cap - g * nz + 0.5 / g)))


def newton_diffusion_matrix(grad_u, dual_q=None, p: HuberParams = None,
                            modified=False):
    """Per-cell generalized Jacobian of z -> h_gamma(z), shape (..., 2, 2).

    MAX_FORM active set: gamma/max(1,gamma|z|) * I minus the rank-one term
    gamma^2/max(...)^2 * (w z^T) with w = z/|z| (plain Newton) or
    w = q/max(1,|q|) (modified iteration, dual_q required).
    C1_FORM: the three-branch diffusion matrix; at z = 0 the inactive
    branch gives gamma*I.
    """
    z = np.asarray(grad_u, dtype=float)
    g = p.gamma
    nz = _norm(z)
    safe = np.maximum(nz, np.finfo(float).tiny)

    if p.variant == MAX_FORM:
        m = np.maximum(1.0, g * nz)
        J = (g / m)[..., None, None] * _I2
        active = (g * nz >= 1.0)
        if modified:
            if dual_q is None:
                raise ValueError("modified Jacobian needs the dual iterate q")
            q = np.asarray(dual_q, dtype=float)
            w = q / np.maximum(1.0, _norm(q))[..., None]
        else:
            w = z / safe[..., None]
        rank1 = (g ** 2 / m ** 2)[..., None, None] * (
            w[..., :, None] * z[..., None, :])
        return J - active[..., None, None] * rank1

    # C1 form: (chi/|z|)(I - zhat zhat^T) + chi'(|z|) zhat zhat^T,
    # collapsing to gamma*I on the inactive branch (covers z = 0).
    chi = chi_gamma(z, p)
    chip = _chi_gamma_prime(nz, p)
    zhat = z / safe[..., None]
    proj = zhat[..., :, None] * zhat[..., None, :]
    J = (chi / safe)[..., None, None] * (_I2 - proj) + chip[..., None, None] * proj
    inactive = (g * nz <= p.g_cap - 0.5 / g)
    return np.where(inactive[..., None, None], g * _I2, J)
