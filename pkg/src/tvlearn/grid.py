"""Discrete calculus on uniform 2D grids.

Images live on the nodes of a uniform grid with spacing h. The gradient is
a forward difference with homogeneous Dirichlet ghost values (u = 0 outside
the domain), and the divergence is defined as the exact negative adjoint of
the gradient under the h^2-weighted inner product. An optional homogeneous
Neumann closure is available for practical denoising runs.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

DIRICHLET = "dirichlet"
NEUMANN = "neumann"


def spacing(nx, ny=None):
    """Grid spacing for an nx x ny image: 1/(n-1) with the min-dimension
    convention for rectangular grids."""
    n = nx if ny is None else min(nx, ny)
    if n < 3:
        raise ValueError("grid needs at least 3 nodes per dimension")
    return 1.0 / (n - 1)


@dataclass
class ImageGrid:
    """Scalar field on a uniform (ny, nx) grid, row-major, spacing h."""

    values: np.ndarray
    h: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ValueError("ImageGrid values must be 2D")
        ny, nx = self.values.shape
        if nx < 3 or ny < 3:
            raise ValueError("grid dimensions must be >= 3")
        if not self.h > 0:
            raise ValueError("grid spacing must be positive")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid values must be finite")

    @classmethod
    def from_array(cls, a, h=None):
        a = np.asarray(a, dtype=float)
        if h is None:
            h = spacing(a.shape[1], a.shape[0])
        return cls(a, h)

    @property
    def ny(self):
        return self.values.shape[0]

    @property
    def nx(self):
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape

    def copy(self):
        return ImageGrid(self.values.copy(), self.h)

    def ravel(self):
        return self.values.ravel()


@dataclass
class VectorField:
    """Two-component field (qx, qy) on the same nodes as an ImageGrid."""

    qx: np.ndarray
    qy: np.ndarray
    h: float

    def __post_init__(self):
        self.qx = np.asarray(self.qx, dtype=float)
        self.qy = np.asarray(self.qy, dtype=float)
        if self.qx.shape != self.qy.shape:
            raise ValueError("qx and qy must have matching shapes")
        if not (np.all(np.isfinite(self.qx)) and np.all(np.isfinite(self.qy))):
            raise ValueError("field values must be finite")

    @property
    def shape(self):
        return self.qx.shape

    def magnitude(self):
        return np.hypot(self.qx, self.qy)

    def stacked(self):
        """(N, 2) view-copy of the components, row-major raveled."""
        return np.stack([self.qx.ravel(), self.qy.ravel()], axis=-1)

    @classmethod
    def from_stacked(cls, z, shape, h):
        z = np.asarray(z, dtype=float)
        return cls(z[:, 0].reshape(shape), z[:, 1].reshape(shape), h)


@lru_cache(maxsize=64)
def diff_ops(ny, nx, h, boundary=DIRICHLET):
    """Sparse forward-difference operators (Dx, Dy) on the raveled grid.

    Dirichlet: the ghost value beyond the last node is 0, so the last
    difference is -u/h. Neumann: the last difference is 0.
    """
    if boundary not in (DIRICHLET, NEUMANN):
        raise ValueError(f"unknown boundary mode {boundary!r}")

    def band(n):
        main = -np.ones(n)
        if boundary == NEUMANN:
            main[-1] = 0.0
        return sp.diags([main, np.ones(n - 1)], [0, 1], format="csr") / h

    Dx = sp.kron(sp.identity(ny, format="csr"), band(nx), format="csr")
    Dy = sp.kron(band(ny), sp.identity(nx, format="csr"), format="csr")
    return Dx, Dy


def grad(u: ImageGrid, boundary=DIRICHLET) -> VectorField:
    Dx, Dy = diff_ops(u.ny, u.nx, u.h, boundary)
    v = u.ravel()
    return VectorField((Dx @ v).reshape(u.shape), (Dy @ v).reshape(u.shape), u.h)


def div(q: VectorField, boundary=DIRICHLET) -> ImageGrid:
    """Exact negative adjoint of grad: inner(grad u, q) = -inner(u, div q)."""
    ny, nx = q.shape
    Dx, Dy = diff_ops(ny, nx, q.h, boundary)
    out = -(Dx.T @ q.qx.ravel() + Dy.T @ q.qy.ravel())
    return ImageGrid(out.reshape(q.shape), q.h)


def laplacian(u: ImageGrid, boundary=DIRICHLET) -> ImageGrid:
    return div(grad(u, boundary), boundary)


def inner(a, b) -> float:
    """Quadrature-weighted inner product h^2 * sum(a*b)."""
    if isinstance(a, ImageGrid):
        if a.shape != b.shape:
            raise ValueError("dimension mismatch")
        return float(a.h ** 2 * np.sum(a.values * b.values))
    if isinstance(a, VectorField):
        if a.shape != b.shape:
            raise ValueError("dimension mismatch")
        return float(a.h ** 2 * np.sum(a.qx * b.qx + a.qy * b.qy))
    raise TypeError(f"unsupported operand type {type(a)!r}")


def norm_l2(a) -> float:
    return np.sqrt(max(inner(a, a), 0.0))


def norm_inf(a) -> float:
    if isinstance(a, ImageGrid):
        return float(np.max(np.abs(a.values)))
    if isinstance(a, VectorField):
        return float(np.max(a.magnitude()))
    raise TypeError(f"unsupported operand type {type(a)!r}")
