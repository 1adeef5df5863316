"""tvlearn: learning fidelity weights for mixed-noise TV denoising.

Inner Huber-regularized TV problems are solved by modified semismooth
Newton iterations with banded LU linear solves; the outer problem over the
nonnegative fidelity weights is solved by a projected BFGS method with
finite-difference or adjoint-based reduced gradients.
"""

__version__ = "0.1.0"

from .grid import (DIRICHLET, NEUMANN, ImageGrid, VectorField, div, grad,
                   inner, laplacian, norm_inf, norm_l2, spacing)
from .regularizer import (C1_FORM, MAX_FORM, HuberParams, chi_gamma, h_gamma,
                          huber_value, newton_diffusion_matrix)
from .fidelity import (GAUSSIAN, IMPULSE, POISSON, FidelitySpec, d2phi, dphi,
                       phi, tracking_cost, tracking_gradient)
from .state_solver import (SolverConfig, SsnError, SsnTrace, band_solve,
                           solve_gauss_poisson, solve_gaussian, solve_impulse)
from .adjoint import (AdjointData, kkt_residuals, reduced_gradient,
                      solve_adjoint, solve_linearized)
from .bilevel import (ADJOINT, FORWARD_FD, BfgsTrace, BilevelConfig,
                      DenoiseProblem, adjoint_gradient, fd_gradient,
                      learn_weights, projected_bfgs, reduced_cost,
                      train_on_set)
from .phantoms import add_noise, chirp, phantom, psnr
