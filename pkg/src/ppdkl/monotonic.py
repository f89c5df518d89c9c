"""Monotonicity constraints via virtual derivative observations.

A GP's derivative is itself a GP, so the joint prior over function values
at the data and signed derivatives at a set of virtual locations is
Gaussian with cross-covariance blocks built from kernel input derivatives
(RBF family; for warped kernels the constrained axis must be a passthrough
coordinate). The constraint "the signed derivative is positive here" enters
as a probit factor Phi(sign * f' / nu) per virtual point, and the
non-Gaussian posterior is handled with a Laplace approximation: Newton
iterations with a backtracking line search find the mode (the objective is
log-concave, so convergence is expected, not hoped for), and the curvature
at the mode supplies the predictive variance.

Small nu makes the constraint nearly hard; the unconstrained GP is
recovered either as nu grows large or when no virtual points are given.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr

from . import kernels
from .gp import GPModel, kernel_inputs, validate_model
from .numerics import (
    CholFactor,
    check_symmetric,
    cholesky_psd,
    solve_lower,
    solve_lower_t,
)

__all__ = [
    "VirtualDerivativeSet",
    "LaplaceState",
    "StateNotConverged",
    "build_joint_prior",
    "laplace_fit",
    "monotone_predict",
    "time_grid_virtual_points",
]

LOG_2PI = float(np.log(2.0 * np.pi))


class StateNotConverged(Exception):
    """Prediction was requested from a Laplace state that did not converge."""


@dataclass
class VirtualDerivativeSet:
    """Locations where the signed input derivative is forced positive.

    ``dim`` is the constrained input coordinate (the time axis in the
    disease-progression setting); ``sign`` is +1 for targets that rise with
    severity and -1 for targets that fall. ``nu`` controls the probit
    steepness; small values approximate a hard constraint.
    """

    locations: np.ndarray
    dim: int
    sign: float = 1.0
    nu: float = 1e-6

    @property
    def num_points(self) -> int:
        return self.locations.shape[0]


@dataclass
class LaplaceState:
    """Mode and curvature of the Laplace approximation.

    ``mode`` stacks latent function values at the data followed by signed
    derivatives at the virtual points (mean-subtracted scale). ``alpha`` is
    the dual representation with ``mode = K alpha``, which keeps gradients
    and predictions numerically exact even when K is nearly singular.
    ``hessian_chol`` factors I + sqrt(W) K sqrt(W), the whitened curvature
    used by the predictive equations; ``neg_hess_diag`` holds W itself.
    """

    mode: np.ndarray
    alpha: np.ndarray
    hessian_chol: CholFactor
    neg_hess_diag: np.ndarray
    converged: bool
    iterations: int
    grad_norm: float


def time_grid_virtual_points(
    X,
    dim: int,
    n_points: int = 10,
    sign: float = 1.0,
    nu: float = 1e-6,
    expand: float = 0.2,
) -> VirtualDerivativeSet:
    """Uniform grid of virtual points along one axis of the data hull.

    The grid spans the observed range of coordinate ``dim`` inflated by
    ``expand`` (half on each side); all other coordinates sit at their
    column means.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    lo, hi = float(X[:, dim].min()), float(X[:, dim].max())
    pad = 0.5 * expand * (hi - lo)
    grid = np.linspace(lo - pad, hi + pad, n_points)
    locs = np.tile(X.mean(axis=0), (n_points, 1))
    locs[:, dim] = grid
    return VirtualDerivativeSet(locations=locs, dim=dim, sign=float(sign), nu=float(nu))


def _check_hull(X: np.ndarray, V: VirtualDerivativeSet) -> None:
    lo = X.min(axis=0)
    hi = X.max(axis=0)
    pad = 0.1 * (hi - lo) + 1e-9
    if np.any(V.locations < lo - pad - 1e-12) or np.any(V.locations > hi + pad + 1e-12):
        raise ValueError("virtual points lie outside the expanded data hull")


def build_joint_prior(model: GPModel, X, V: VirtualDerivativeSet) -> np.ndarray:
    """Joint prior covariance over [f(X); sign * df/dx_dim at V].

    Requires an RBF base kernel; with a warp the constrained axis must be a
    passthrough coordinate.
    """
    validate_model(model)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if V.num_points == 0:
        return kernels.eval_kernel(model.kernel, X, X)
    if V.nu <= 0:
        raise ValueError("nu must be positive")
    _check_hull(X, V)
    n, m = X.shape[0], V.num_points
    K_ff = kernels.eval_kernel(model.kernel, X, X)
    G_vf = np.empty((m, n))
    for a in range(m):
        G_vf[a] = kernels.kernel_grad_input(model.kernel, V.locations[a : a + 1], X, V.dim)
    K_gg = kernels.kernel_grad_input_input(
        model.kernel, V.locations, V.locations, V.dim, V.dim
    )
    top = np.hstack([K_ff, V.sign * G_vf.T])
    bottom = np.hstack([V.sign * G_vf, K_gg])
    joint = np.vstack([top, bottom])
    return check_symmetric(0.5 * (joint + joint.T))


def _probit_terms(g: np.ndarray, nu: float):
    """log Phi(g/nu) plus its first derivative and negative curvature."""
    t = g / nu
    loglik = log_ndtr(t)
    # phi(t)/Phi(t), stable for very negative t via log-space subtraction
    log_pdf = -0.5 * t**2 - 0.5 * LOG_2PI
    ratio = np.exp(log_pdf - loglik)
    grad = ratio / nu
    curv = (t * ratio + ratio**2) / nu**2
    return loglik, grad, np.maximum(curv, 0.0)


def laplace_fit(
    model: GPModel,
    X,
    y,
    V: VirtualDerivativeSet,
    max_iter: int = 50,
    grad_tol: float = 1e-6,
) -> LaplaceState:
    """Newton-with-line-search mode finding for the constrained posterior.

    The likelihood is Gaussian at the data sites and probit at the virtual
    derivative sites. Returns a state with ``converged=False`` after the
    iteration cap rather than raising; callers decide.
    """
    validate_model(model)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    n, m = X.shape[0], V.num_points
    K = build_joint_prior(model, X, V)
    s2 = model.noise_variance
    r = y - model.mean  # latent is kept on the mean-subtracted scale
    dim = n + m

    def loglik_parts(u):
        f, g = u[:n], u[n:]
        ll = -0.5 * float(np.sum((r - f) ** 2)) / s2 - 0.5 * n * (np.log(s2) + LOG_2PI)
        grad = np.empty(dim)
        W = np.empty(dim)
        grad[:n] = (r - f) / s2
        W[:n] = 1.0 / s2
        if m:
            pl, pg, pw = _probit_terms(g, V.nu)
            ll += float(np.sum(pl))
            grad[n:] = pg
            W[n:] = pw
        return ll, grad, W

    # Iterates are kept in the dual representation u = K @ alpha, so the
    # objective u' K^-1 u = u' alpha and the gradient (loglik_grad - alpha)
    # never touch K^-1 (K is often numerically singular for smooth kernels).
    def psi_of(alpha, u):
        ll, _, _ = loglik_parts(u)
        return -0.5 * float(u @ alpha) + ll

    alpha = np.zeros(dim)
    u = np.zeros(dim)
    psi_u = psi_of(alpha, u)
    converged = False
    grad_norm = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        _, grad, W = loglik_parts(u)
        grad_norm = float(np.max(np.abs(grad - alpha)))
        if grad_norm < grad_tol:
            converged = True
            break
        sW = np.sqrt(W)
        B = np.eye(dim) + (sW[:, None] * K) * sW[None, :]
        LB = cholesky_psd(B)
        b = W * u + grad
        alpha_new = b - sW * solve_lower_t(LB, solve_lower(LB, sW * (K @ b)))
        # backtracking line search keeps the concave objective ascending
        step = 1.0
        improved = False
        while step > 1e-10:
            a_c = alpha + step * (alpha_new - alpha)
            u_c = K @ a_c
            psi_c = psi_of(a_c, u_c)
            if psi_c >= psi_u:
                improved = psi_c > psi_u or step == 1.0
                alpha, u, psi_u = a_c, u_c, psi_c
                break
            step *= 0.5
        if not improved:
            # flat or no ascent left; gradient norm will be re-reported below
            _, grad, _ = loglik_parts(u)
            grad_norm = float(np.max(np.abs(grad - alpha)))
            converged = grad_norm < grad_tol
            break

    _, _, W = loglik_parts(u)
    sW = np.sqrt(W)
    B = np.eye(dim) + (sW[:, None] * K) * sW[None, :]
    LB = cholesky_psd(B)
    return LaplaceState(
        mode=u,
        alpha=alpha,
        hessian_chol=LB,
        neg_hess_diag=W,
        converged=converged,
        iterations=it,
        grad_norm=grad_norm,
    )


def _cross_cov(model: GPModel, X, V: VirtualDerivativeSet, X_star) -> np.ndarray:
    """Cov(f(x*), [f(X); sign * df at V]), shape (n*, n+m)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    X_star = np.atleast_2d(np.asarray(X_star, dtype=float))
    k_sf = kernels.eval_kernel(model.kernel, X_star, X)
    if V.num_points == 0:
        return k_sf
    k_sg = np.empty((X_star.shape[0], V.num_points))
    for a in range(V.num_points):
        k_sg[:, a] = kernels.kernel_grad_input(
            model.kernel, V.locations[a : a + 1], X_star, V.dim
        )
    return np.hstack([k_sf, V.sign * k_sg])


def monotone_predict(
    state: LaplaceState,
    model: GPModel,
    X,
    y,
    V: VirtualDerivativeSet,
    X_star,
    include_noise: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Laplace-approximate predictive mean and variance at new points."""
    if not state.converged:
        raise StateNotConverged(
            f"laplace_fit stopped after {state.iterations} iterations "
            f"with gradient norm {state.grad_norm:.3e}"
        )
    validate_model(model)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    X_star = np.atleast_2d(np.asarray(X_star, dtype=float))
    k_star = _cross_cov(model, X, V, X_star)  # (n*, n+m)
    mean = model.mean + k_star @ state.alpha
    U_star, _ = kernel_inputs(model, X_star)
    from .gp import _base_spec, _outscale

    prior = _outscale(model) * kernels.eval_kernel_diag(_base_spec(model), U_star)
    sW = np.sqrt(state.neg_hess_diag)
    Vt = solve_lower(state.hessian_chol, sW[:, None] * k_star.T)
    var = np.maximum(prior - np.sum(Vt**2, axis=0), 0.0)
    if include_noise:
        var = var + model.noise_variance
    return mean, var
