"""Noise-model fidelity terms: value and pointwise derivatives in u.

Supported models: Gaussian (squared L2), Poisson (Kullback-Leibler) and
impulse noise via a Huberized L1 distance. Each model exposes its value
phi, the pointwise first derivative dphi and a pointwise second-derivative
coefficient field d2phi used in Newton and adjoint assemblies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import ImageGrid, inner

GAUSSIAN = "gaussian"
POISSON = "poisson"
IMPULSE = "impulse"

KINDS = (GAUSSIAN, POISSON, IMPULSE)


@dataclass(frozen=True)
class FidelitySpec:
    """One noise model phi_i attached to a noisy image f."""

    kind: str
    data: ImageGrid
    gamma_l1: float = 100.0  # Huber parameter of the L1 term (impulse only)
    u_floor: float = 1e-6    # positivity floor (Poisson only)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown fidelity kind {self.kind!r}")
        if not self.gamma_l1 > 0:
            raise ValueError("gamma_l1 must be positive")
        if not self.u_floor > 0:
            raise ValueError("u_floor must be positive")
        if self.kind == POISSON and np.any(self.data.values < 0):
            raise ValueError("Poisson fidelity requires nonnegative data")


def phi(u: ImageGrid, s: FidelitySpec) -> float:
    f = s.data.values
    r = u.values - f
    if s.kind == GAUSSIAN:
        return float(0.5 * u.h ** 2 * np.sum(r * r))
    if s.kind == POISSON:
        if np.any(u.values <= 0):
            raise ValueError("Poisson fidelity needs u > 0 (clamp to u_floor)")
        with np.errstate(divide="ignore", invalid="ignore"):
            kl = u.values - np.where(f > 0, f * np.log(u.values), 0.0)
        return float(u.h ** 2 * np.sum(kl))
    g = s.gamma_l1
    ar = np.abs(r)
    hub = np.where(ar >= 1.0 / g, ar - 0.5 / g, 0.5 * g * ar ** 2)
    return float(u.h ** 2 * np.sum(hub))


def dphi(u: ImageGrid, s: FidelitySpec) -> ImageGrid:
    f = s.data.values
    r = u.values - f
    if s.kind == GAUSSIAN:
        return ImageGrid(r, u.h)
    if s.kind == POISSON:
        if np.any(u.values <= 0):
            raise ValueError("Poisson fidelity needs u > 0 (clamp to u_floor)")
        return ImageGrid(1.0 - f / u.values, u.h)
    g = s.gamma_l1
    return ImageGrid(g * r / np.maximum(1.0, g * np.abs(r)), u.h)


def d2phi(u: ImageGrid, s: FidelitySpec, dual=None, c1=False) -> ImageGrid:
    """Pointwise second-derivative coefficient of phi.

    For the impulse model the derivative of the dual map r -> p(r) is
    set-valued on the active set; three selections are available:
    the plain generalized derivative (default), the modified one built
    from the dual iterate p/max(1,|p|) (pass ``dual``), and the 1D C^1
    capped form used by the adjoint machinery (``c1=True``).
    """
    f = s.data.values
    if s.kind == GAUSSIAN:
        return ImageGrid(np.ones_like(u.values), u.h)
    if s.kind == POISSON:
        if np.any(u.values <= 0):
            raise ValueError("Poisson fidelity needs u > 0 (clamp to u_floor)")
        return ImageGrid(f / u.values ** 2, u.h)
    g = s.gamma_l1
    r = u.values - f
    ar = np.abs(r)
    if c1:
        # 1D analogue of the C1 diffusion matrix, cap fixed at 1.
        coef = np.where(g * ar <= 1.0 - 0.5 / g, g,
                        np.where(g * ar >= 1.0 + 0.5 / g, 0.0,
                                 g ** 2 * (1.0 - g * ar + 0.5 / g)))
        return ImageGrid(coef, u.h)
    m = np.maximum(1.0, g * ar)
    coef = g / m
    active = g * ar >= 1.0
    if dual is not None:
        p = np.asarray(dual, dtype=float).reshape(r.shape)
        w = p / np.maximum(1.0, np.abs(p))
    else:
        w = np.sign(r)
    coef = coef - active * (g ** 2 * r / m ** 2) * w
    return ImageGrid(coef, u.h)


def tracking_cost(u: ImageGrid, u_o: ImageGrid) -> float:
    """g(u) = 0.5 * ||u - u_o||_L2^2."""
    d = ImageGrid(u.values - u_o.values, u.h)
    return 0.5 * inner(d, d)


def tracking_gradient(u: ImageGrid, u_o: ImageGrid) -> ImageGrid:
    return ImageGrid(u.values - u_o.values, u.h)
