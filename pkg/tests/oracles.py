"""Independent reference computations used by the tests.

These deliberately avoid the library's Newton machinery: the energy
minimizer below is a plain projected gradient descent on the discrete
energy, so agreement with the semismooth Newton solver is a genuine
cross-check rather than a tautology.
"""

import numpy as np

from tvlearn.grid import diff_ops
from tvlearn.regularizer import h_gamma, huber_value


def gaussian_energy_minimizer(f, lam, cfg, grad_tol=1e-10, max_iter=500000):
    """Minimize eps/2||grad u||^2 + sum huber(grad u) h^2 + lam/2 ||u-f||^2
    by gradient descent with a Lipschitz step, run to h-weighted gradient
    norm <= grad_tol. Returns the minimizer as a 2D array."""
    ny, nx = f.shape
    h = f.h
    Dx, Dy = diff_ops(ny, nx, h, cfg.boundary)
    fv = f.ravel()
    u = fv.copy()
    # crude Lipschitz bound: 8/h^2 per difference operator product
    L = (cfg.epsilon + cfg.huber.gamma) * 8.0 / h ** 2 + lam
    step = 1.0 / L
    for _ in range(max_iter):
        z = np.stack([Dx @ u, Dy @ u], axis=-1)
        hg = h_gamma(z, cfg.huber)
        g = (cfg.epsilon * (Dx.T @ (Dx @ u) + Dy.T @ (Dy @ u))
             + Dx.T @ hg[:, 0] + Dy.T @ hg[:, 1] + lam * (u - fv))
        if h * np.linalg.norm(g) <= grad_tol:
            break
        u = u - step * g
    else:
        raise RuntimeError("gradient descent oracle did not converge")
    return u.reshape(ny, nx)


def discrete_energy(u_flat, f, lam, cfg):
    """The same discrete Gaussian energy the oracle minimizes."""
    ny, nx = f.shape
    h = f.h
    Dx, Dy = diff_ops(ny, nx, h, cfg.boundary)
    z = np.stack([Dx @ u_flat, Dy @ u_flat], axis=-1)
    return h ** 2 * (0.5 * cfg.epsilon * np.sum(z ** 2)
                     + np.sum(huber_value(z, cfg.huber))
                     + 0.5 * lam * np.sum((u_flat - f.ravel()) ** 2))
