"""Bundled synthetic test images and reproducible noise generation.

The phantom mixes piecewise-constant shapes with a smooth bump and decays
to zero at the boundary, matching the homogeneous Dirichlet setting of the
solvers. Noise sequences use numpy's PCG64 generator seeded explicitly, so
a (seed, size, kind) triple always yields the same field.
"""

from __future__ import annotations

import numpy as np

from .grid import ImageGrid, spacing


def phantom(n: int, m: int = None) -> ImageGrid:
    """Piecewise-constant shapes plus a smooth blob on an n x m grid."""
    if m is None:
        m = n
    y, x = np.meshgrid(np.linspace(0, 1, n), np.linspace(0, 1, m),
                       indexing="ij")
    img = np.zeros((n, m))
    # rectangle
    img[(x > 0.15) & (x < 0.55) & (y > 0.2) & (y < 0.5)] = 0.6
    # disk
    img[(x - 0.68) ** 2 + (y - 0.68) ** 2 < 0.03] = 0.9
    # smooth Gaussian bump
    img += 0.35 * np.exp(-(((x - 0.3) ** 2 + (y - 0.75) ** 2) / 0.008))
    # taper to zero at the boundary (Dirichlet-compatible)
    taper = (np.sin(np.pi * x) * np.sin(np.pi * y)) ** 0.25
    img = np.clip(img * taper, 0.0, 1.0)
    return ImageGrid(img, spacing(m, n))


def chirp(n: int, omega: float = 80.0) -> ImageGrid:
    """Radial chirp sin(omega*pi*r^2): oscillations tighten away from the
    center, so finer grids keep resolving new detail. Useful for mesh
    refinement studies where the optimal fidelity weight should keep
    responding to the resolution."""
    x = np.linspace(0.0, 1.0, n)
    X, Y = np.meshgrid(x, x)
    r2 = (X - 0.5) ** 2 + (Y - 0.5) ** 2
    img = np.clip(0.5 + 0.4 * np.sin(omega * np.pi * r2), 0.0, 1.0)
    return ImageGrid(img, spacing(n))


def ramp(n: int) -> ImageGrid:
    """Smooth radial ramp, zero on the boundary."""
    y, x = np.meshgrid(np.linspace(0, 1, n), np.linspace(0, 1, n),
                       indexing="ij")
    img = np.clip(1.2 * np.sin(np.pi * x) * np.sin(np.pi * y), 0.0, 1.0)
    return ImageGrid(img, spacing(n))


def add_noise(grid: ImageGrid, kind: str, seed: int, mean: float = 0.0,
              variance: float = 0.002, scale: float = 100.0,
              density: float = 0.1) -> ImageGrid:
    """Corrupt an image in [0, 1]; output is clipped back to [0, 1].

    gaussian: i.i.d. N(mean, variance) added per pixel.
    poisson:  Poisson(scale * u) / scale.
    salt_pepper: a `density` fraction of pixels set to 0 or 1 equiprobably.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    u = grid.values
    if kind == "gaussian":
        if variance < 0:
            raise ValueError("variance must be nonnegative")
        out = u + rng.normal(mean, np.sqrt(variance), size=u.shape)
    elif kind == "poisson":
        if scale <= 0:
            raise ValueError("scale must be positive")
        out = rng.poisson(scale * np.clip(u, 0.0, None)) / scale
    elif kind == "salt_pepper":
        if not 0 <= density <= 1:
            raise ValueError("density must be in [0, 1]")
        out = u.copy()
        hit = rng.random(u.shape) < density
        out[hit] = rng.integers(0, 2, size=int(hit.sum())).astype(float)
    else:
        raise ValueError(f"unknown noise kind {kind!r}")
    return ImageGrid(np.clip(out, 0.0, 1.0), grid.h)


def psnr(u: ImageGrid, reference: ImageGrid) -> float:
    """Peak signal-to-noise ratio for [0, 1] images: 10*log10(1/MSE)."""
    mse = float(np.mean((u.values - reference.values) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)
