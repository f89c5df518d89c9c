"""Variational inducing-point approximation with the collapsed bound.

The evidence lower bound is

    log N(y; mean, Q_nn + noise*I) - trace(K_nn - Q_nn) / (2 * noise)

with Q_nn = K_nm K_mm^-1 K_mn. It never exceeds the exact log marginal
likelihood and matches it when the inducing set equals the data. All
algebra is kept in the low-rank form (O(n M^2) time, O(n M) space), and
gradients are chained by hand to every hyperparameter, the feature net,
and the inducing locations themselves.

Inducing points live either in the original data space (the warped-kernel
arrangement, where they are trainable) or in the net's feature space (the
plain deep-kernel arrangement, where they stay fixed after initialization).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import featurenet, kernels
from .gp import (
    GPModel,
    LOG_2PI,
    NET_FEATURES,
    RAW,
    WARPED_KERNEL,
    _base_spec,
    _net_out_dim,
    _net_trainable,
    _outscale,
    kernel_inputs,
    trainable_params,
    validate_model,
    with_params,
)
from .numerics import DimensionMismatch, cholesky_psd, solve_lower, solve_lower_t
from .optimize import OptimizerConfig, adam_minimize

__all__ = [
    "SparseConfig",
    "InducingSet",
    "EmptyData",
    "elbo",
    "elbo_gradients",
    "select_inducing",
    "sparse_predict",
    "train_sparse",
]

DATA_SPACE = "data"
FEATURE_SPACE = "feature"
SUBSET = "subset"
KMEANS = "kmeans"


class EmptyData(ValueError):
    """No points to draw inducing locations from."""


@dataclass
class SparseConfig:
    num_inducing: int = 64
    inducing_space: str = DATA_SPACE
    init_strategy: str = SUBSET
    # None: trainable in data space, fixed in feature space.
    trainable: bool | None = None

    def resolved_trainable(self) -> bool:
        if self.trainable is None:
            return self.inducing_space == DATA_SPACE
        return bool(self.trainable)


@dataclass
class InducingSet:
    Z: np.ndarray
    trainable: bool = True

    @property
    def num_inducing(self) -> int:
        return self.Z.shape[0]

    def copy(self) -> "InducingSet":
        return InducingSet(Z=self.Z.copy(), trainable=self.trainable)


def select_inducing(X, M: int, strategy: str = SUBSET, seed: int = 0) -> InducingSet:
    """Choose M inducing locations from the candidate points.

    ``"subset"`` draws uniformly without replacement; ``"kmeans"`` runs ten
    Lloyd iterations from a seeded start. With M >= n the full candidate
    set is returned in order (clamping, with a warning when M > n).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[0]
    if n == 0:
        raise EmptyData("cannot select inducing points from an empty set")
    if M < 1:
        raise ValueError("M must be >= 1")
    if M >= n:
        if M > n:
            warnings.warn(f"requested {M} inducing points but only {n} candidates; clamping")
        return InducingSet(Z=X.copy())
    rng = np.random.default_rng(seed)
    if strategy == SUBSET:
        idx = np.sort(rng.choice(n, size=M, replace=False))
        return InducingSet(Z=X[idx].copy())
    if strategy != KMEANS:
        raise ValueError(f"unknown init strategy {strategy!r}")
    centers = X[np.sort(rng.choice(n, size=M, replace=False))].copy()
    for _ in range(10):
        d2 = (
            np.sum(X**2, axis=1)[:, None]
            + np.sum(centers**2, axis=1)[None, :]
            - 2.0 * X @ centers.T
        )
        assign = np.argmin(d2, axis=1)
        for j in range(M):
            mask = assign == j
            if np.any(mask):
                centers[j] = X[mask].mean(axis=0)
    return InducingSet(Z=centers)


# ---------------------------------------------------------------------------
# input mapping for the three arrangements
# ---------------------------------------------------------------------------


def _inducing_inputs(model: GPModel, Z: np.ndarray, with_tape: bool = False):
    """Map inducing locations into the kernel space.

    In feature-space mode Z already lives where the kernel operates; in the
    warped arrangement Z sits in data space and goes through the warp.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    if model.feature_mode == WARPED_KERNEL:
        return kernels.warp_inputs(model.kernel.warp, Z, with_tape=with_tape)
    return Z, None


def _blocks(model: GPModel, Z: np.ndarray, X: np.ndarray):
    base = _base_spec(model)
    q = _outscale(model)
    Uz, _ = _inducing_inputs(model, Z)
    Ux, _ = kernel_inputs(model, X)
    Kmm = q * kernels.eval_kernel(base, Uz, Uz)
    Kmn = q * kernels.eval_kernel(base, Uz, Ux)
    knn = q * kernels.eval_kernel_diag(base, Ux)
    return Kmm, Kmn, knn


def _check_sparse_args(model, Z, X, y):
    validate_model(model)
    Z = np.atleast_2d(np.asarray(Z.Z if isinstance(Z, InducingSet) else Z, dtype=float))
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.size:
        raise DimensionMismatch(f"{X.shape[0]} inputs but {y.size} targets")
    return Z, X, y


# ---------------------------------------------------------------------------
# bound, prediction, gradients
# ---------------------------------------------------------------------------


def _core_factors(model: GPModel, Kmm, Kmn, r):
    """Shared Cholesky pipeline: returns (Lm, A, LB, c)."""
    s2 = model.noise_variance
    M = Kmm.shape[0]
    Lm = cholesky_psd(Kmm)
    A = solve_lower(Lm, Kmn)  # M x n
    B = np.eye(M) + (A @ A.T) / s2
    LB = cholesky_psd(B)
    c = solve_lower(LB, A @ r)  # M vector
    return Lm, A, LB, c


def elbo(model: GPModel, Z, X, y) -> float:
    """Collapsed variational bound on the log marginal likelihood."""
    Z, X, y = _check_sparse_args(model, Z, X, y)
    Kmm, Kmn, knn = _blocks(model, Z, X)
    s2 = model.noise_variance
    n = y.size
    r = y - model.mean
    Lm, A, LB, c = _core_factors(model, Kmm, Kmn, r)
    logdet = 2.0 * float(np.sum(np.log(np.diag(LB.lower)))) + n * float(np.log(s2))
    quad = (float(r @ r) - float(c @ c) / s2) / s2
    trace_term = float(np.sum(knn) - np.sum(A**2))
    return -0.5 * (n * LOG_2PI + logdet + quad) - trace_term / (2.0 * s2)


def sparse_predict(
    model: GPModel, Z, X, y, X_star, include_noise: bool = True
) -> tuple[np.ndarray, np.ndarray]:
    """Predictive mean and variance under the optimal variational posterior.

    With Z = X this matches the exact posterior. With no training data it
    falls back to the prior.
    """
    Z, X, y = _check_sparse_args(model, Z, X, y)
    X_star = np.atleast_2d(np.asarray(X_star, dtype=float))
    base = _base_spec(model)
    q = _outscale(model)
    Uz, _ = _inducing_inputs(model, Z)
    Ustar, _ = kernel_inputs(model, X_star)
    k_sm = q * kernels.eval_kernel(base, Uz, Ustar)  # M x n*
    k_ss = q * kernels.eval_kernel_diag(base, Ustar)
    s2 = model.noise_variance

    Kmm, Kmn, _ = _blocks(model, Z, X)
    r = y - model.mean
    Lm, A, LB, c = _core_factors(model, Kmm, Kmn, r)
    W = solve_lower(Lm, k_sm)  # M x n*
    V = solve_lower(LB, W)
    mean = model.mean + (V.T @ c) / s2
    var = k_ss - np.sum(W**2, axis=0) + np.sum(V**2, axis=0)
    var = np.maximum(var, 0.0)
    if include_noise:
        var = var + s2
    return mean, var


def _elbo_value_and_grads(model: GPModel, Z: np.ndarray, X, y):
    """ELBO plus gradients for model parameters and inducing locations.

    Returns ``(elbo, model_grad, Z_grad)`` where ``model_grad`` follows the
    layout of :func:`ppdkl.gp.trainable_params` and ``Z_grad`` has Z's
    shape. All adjoints stay in low-rank form so cost is O(n M^2).
    """
    Z, X, y = _check_sparse_args(model, Z, X, y)
    base = _base_spec(model)
    q = _outscale(model)
    s2 = model.noise_variance
    n = y.size
    M = Z.shape[0]
    r = y - model.mean

    tape_z = tape_x = None
    if model.feature_mode == WARPED_KERNEL:
        Uz, tape_z = _inducing_inputs(model, Z, with_tape=True)
        Ux, tape_x = kernel_inputs(model, X, with_tape=True)
    elif model.feature_mode == NET_FEATURES:
        Uz = Z
        Ux, tape_x = kernel_inputs(model, X, with_tape=True)
    else:
        Uz, Ux = Z, np.atleast_2d(np.asarray(X, dtype=float))

    Kmm_base = kernels.eval_kernel(base, Uz, Uz)
    Kmn_base = kernels.eval_kernel(base, Uz, Ux)
    knn_base = kernels.eval_kernel_diag(base, Ux)
    Kmm, Kmn, knn = q * Kmm_base, q * Kmn_base, q * knn_base

    Lm, A, LB, c = _core_factors(model, Kmm, Kmn, r)
    logdet = 2.0 * float(np.sum(np.log(np.diag(LB.lower)))) + n * float(np.log(s2))
    quad = (float(r @ r) - float(c @ c) / s2) / s2
    trace_term = float(np.sum(knn) - np.sum(A**2))
    value = -0.5 * (n * LOG_2PI + logdet + quad) - trace_term / (2.0 * s2)

    # Low-rank adjoints. With P = (Q + s2 I)^-1 and p = P r, the adjoint of
    # the bound with respect to Q is G = (D^T D + p p^T) / 2, D = LB^-1 A / s2;
    # the trace part contributes -1/(2 s2) on the diagonal of K_nn and
    # cancels the -P/2 identity component analytically.
    D = solve_lower(LB, A) / s2  # M x n
    Binv_Ar = solve_lower_t(LB, c)  # B^-1 A r via two triangular solves
    p = (r - (A.T @ Binv_Ar) / s2) / s2  # p = (Q + s2 I)^-1 r

    Kmn_p = Kmn @ p  # M
    Kmn_Dt = Kmn @ D.T  # M x M
    KG = 0.5 * (Kmn_Dt @ D + np.outer(Kmn_p, p))  # Kmn G, M x n

    def kmm_solve(T):
        return solve_lower_t(Lm, solve_lower(Lm, T))

    C_Kmn = 2.0 * kmm_solve(KG)
    mid = 0.5 * (Kmn_Dt @ Kmn_Dt.T + np.outer(Kmn_p, Kmn_p))
    C_Kmm = -kmm_solve(kmm_solve(mid).T)
    C_Kmm = 0.5 * (C_Kmm + C_Kmm.T)
    c_knn = -0.5 / s2

    # scalar pieces
    AAt = A @ A.T
    trP = (n - float(np.trace(solve_lower_t(LB, solve_lower(LB, AAt)))) / s2) / s2
    d_s2 = -0.5 * (trP - float(p @ p)) + trace_term / (2.0 * s2**2)
    d_log_noise = s2 * d_s2
    d_mean = float(np.sum(p))

    # hyperparameters of the base kernel (and the warp outscale)
    hyper_mm = kernels.kernel_grad_hyper(base, Uz, Uz)
    hyper_mn = kernels.kernel_grad_hyper(base, Uz, Ux)
    hyper_nn = kernels.kernel_grad_hyper_diag(base, Ux)
    hyper_grads = [
        q * (float(np.sum(C_Kmm * dmm)) + float(np.sum(C_Kmn * dmn)) + c_knn * float(np.sum(dnn)))
        for dmm, dmn, dnn in zip(hyper_mm, hyper_mn, hyper_nn)
    ]
    model_parts = list(hyper_grads)
    if model.feature_mode == WARPED_KERNEL:
        d_outscale = (
            float(np.sum(C_Kmm * Kmm))
            + float(np.sum(C_Kmn * Kmn))
            + c_knn * float(np.sum(knn))
        )
        model_parts.append(d_outscale)
    model_parts.extend([d_log_noise, d_mean])
    model_grad = np.asarray(model_parts, dtype=float)

    # inducing locations: chain through first-argument kernel derivatives
    P_mm = kernels.grad_first_input(base, Uz, Uz)  # M x M x dz
    P_mn = kernels.grad_first_input(base, Uz, Ux)  # M x n x dz
    dUz = q * (
        np.einsum("ij,ijd->id", C_Kmm + C_Kmm.T, P_mm)
        + np.einsum("ij,ijd->id", C_Kmn, P_mn)
    )

    # data-side kernel inputs (needed when a net is trainable)
    dUx = None
    if _net_trainable(model):
        P_nm = kernels.grad_first_input(base, Ux, Uz)  # n x M x dz
        dUx = q * np.einsum("ij,ijd->id", C_Kmn.T, P_nm)
        diag_d = kernels.grad_first_input_diag(base, Ux)
        dUx += q * c_knn * 2.0 * diag_d

    net_grad = None
    Z_grad = dUz
    if model.feature_mode == WARPED_KERNEL:
        out_dim = _net_out_dim(model)
        dWx, dbx, _ = featurenet.backward(
            model.net, tape_x, dUx[:, :out_dim], include_decay=False
        )
        dWz, dbz, dZ_block = featurenet.backward(
            model.net, tape_z, dUz[:, :out_dim], include_decay=False
        )
        net_grad = featurenet.flatten_grads(
            [a + b for a, b in zip(dWx, dWz)], [a + b for a, b in zip(dbx, dbz)]
        )
        # assemble Z gradient in data-space coordinates
        warp = model.kernel.warp
        block = kernels.warp_block_dims(warp, Z.shape[1])
        Z_grad = np.zeros_like(Z)
        Z_grad[:, block] = dZ_block
        for j, dim in enumerate(warp.passthrough_dims):
            Z_grad[:, dim] = dUz[:, out_dim + j]
    elif model.feature_mode == NET_FEATURES:
        dWx, dbx, _ = featurenet.backward(model.net, tape_x, dUx, include_decay=False)
        net_grad = featurenet.flatten_grads(dWx, dbx)

    if net_grad is not None:
        # the bound is maximized, so the ridge enters with a minus sign
        if model.net.l2_coeff:
            w = featurenet.flatten_params(model.net)
            net_grad = net_grad - model.net.l2_coeff * w
            value -= 0.5 * model.net.l2_coeff * float(np.sum(w**2))
        model_grad = np.concatenate([model_grad, net_grad])
    return value, model_grad, Z_grad


def elbo_gradients(model: GPModel, Z, X, y):
    """Gradients of the bound for all model parameters and Z.

    Returns ``(model_grad, Z_grad)``; the model part follows the layout of
    :func:`ppdkl.gp.trainable_params`. When a net is trainable the value
    being differentiated is the bound minus the L2 ridge, matching the
    exact-GP training objective.
    """
    Zarr = Z.Z if isinstance(Z, InducingSet) else Z
    _, mg, zg = _elbo_value_and_grads(model, np.asarray(Zarr, dtype=float), X, y)
    return mg, zg


def train_sparse(
    model: GPModel,
    Z: InducingSet,
    X,
    y,
    opt: OptimizerConfig | None = None,
):
    """ADAM on the negative bound over model parameters (and Z if trainable).

    Returns ``(model, inducing set, loss trace)``; the trace holds the
    negative bound (without the L2 term) before each update.
    """
    opt = opt or OptimizerConfig()
    z_shape = Z.Z.shape
    z_train = Z.trainable

    x0 = trainable_params(model)
    if z_train:
        x0 = np.concatenate([x0, Z.Z.ravel()])
    n_model = trainable_params(model).size

    ridge_half = 0.5 * model.net.l2_coeff if _net_trainable(model) else 0.0

    def value_and_grad(vec):
        m = with_params(model, vec[:n_model])
        Zc = vec[n_model:].reshape(z_shape) if z_train else Z.Z
        val, mg, zg = _elbo_value_and_grads(m, Zc, X, y)
        if ridge_half:
            # report the pure negative bound; ADAM still sees the decayed grad
            val += ridge_half * float(np.sum(featurenet.flatten_params(m.net) ** 2))
        g = -mg if not z_train else np.concatenate([-mg, -zg.ravel()])
        return -val, g

    x_opt, trace = adam_minimize(value_and_grad, x0, opt)
    model_out = with_params(model, x_opt[:n_model])
    Z_out = InducingSet(
        Z=x_opt[n_model:].reshape(z_shape) if z_train else Z.Z.copy(),
        trainable=z_train,
    )
    return model_out, Z_out, trace
