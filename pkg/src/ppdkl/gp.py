"""Exact GP regression: marginal likelihood, joint gradients, prediction,
and the ADAM training loop.

A :class:`GPModel` bundles a kernel spec, a learnable constant mean, a
log-domain noise variance, and (for the deep variants) a feature net. The
``feature_mode`` field selects how inputs reach the kernel:

``"raw"``
    the kernel sees the inputs as given;
``"net_features"``
    inputs are mapped through the net and a plain kernel acts on the
    features (inducing points for this mode live in feature space);
``"warped_kernel"``
    the kernel itself carries the net as a warp, so the model operates in
    the original data space (inducing points live there too).

All trainable parameters, including every net weight, receive exact
gradients of the negative log marginal likelihood, chained through the
kernel by hand. The flat parameter layout is
``[kernel log-params, (log outscale), log noise, mean, net params]``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import featurenet, kernels
from .featurenet import FeatureNet
from .kernels import KernelSpec
from .numerics import (
    CholFactor,
    DimensionMismatch,
    chol_logdet,
    cholesky_psd,
    solve_chol,
    solve_lower,
)
from .optimize import OptimizerConfig, adam_minimize

__all__ = [
    "GPModel",
    "FittedGP",
    "fit_gp",
    "log_marginal_likelihood",
    "nll_gradients",
    "posterior_predict",
    "posterior_cov",
    "train",
    "trainable_params",
    "with_params",
    "variance_clamp_count",
]

RAW = "raw"
NET_FEATURES = "net_features"
WARPED_KERNEL = "warped_kernel"
FEATURE_MODES = (RAW, NET_FEATURES, WARPED_KERNEL)

LOG_2PI = float(np.log(2.0 * np.pi))

# Diagnostic counter for negative predictive variances clamped to zero.
_clamp_diagnostics = {"count": 0}


def variance_clamp_count() -> int:
    return _clamp_diagnostics["count"]


@dataclass
class GPModel:
    kernel: KernelSpec
    mean: float = 0.0
    log_noise: float = float(np.log(0.1))
    net: FeatureNet | None = None
    feature_mode: str = RAW

    @property
    def noise_variance(self) -> float:
        return float(np.exp(self.log_noise))

    def copy(self) -> "GPModel":
        kernel = self.kernel.copy()
        if self.feature_mode == WARPED_KERNEL:
            # the model's net and the warp's net are the same object
            net = kernel.warp.net
        else:
            net = self.net.copy() if self.net is not None else None
        return GPModel(
            kernel=kernel,
            mean=self.mean,
            log_noise=self.log_noise,
            net=net,
            feature_mode=self.feature_mode,
        )


def validate_model(model: GPModel) -> None:
    if model.feature_mode not in FEATURE_MODES:
        raise ValueError(f"unknown feature_mode {model.feature_mode!r}")
    if not np.isfinite(model.noise_variance) or model.noise_variance <= 0:
        raise ValueError("noise variance must be finite and positive")
    if model.feature_mode in (NET_FEATURES, WARPED_KERNEL) and model.net is None:
        raise ValueError(f"feature_mode {model.feature_mode!r} requires a net")
    if model.feature_mode == WARPED_KERNEL and model.kernel.warp is None:
        raise ValueError("warped_kernel mode requires kernel.warp")
    if model.feature_mode != WARPED_KERNEL and model.kernel.warp is not None:
        raise ValueError("kernel.warp is set but feature_mode is not warped_kernel")


def make_warped(
    kernel: KernelSpec,
    net: FeatureNet,
    log_outscale: float = 0.0,
    passthrough_dims: tuple[int, ...] = (),
    mean: float = 0.0,
    log_noise: float = float(np.log(0.1)),
) -> GPModel:
    """Convenience constructor for a warped-kernel model."""
    warp = kernels.WarpSpec(
        net=net, log_outscale=log_outscale, passthrough_dims=tuple(passthrough_dims)
    )
    spec = replace(kernel, warp=warp)
    return GPModel(
        kernel=spec, mean=mean, log_noise=log_noise, net=net, feature_mode=WARPED_KERNEL
    )


# ---------------------------------------------------------------------------
# input mapping
# ---------------------------------------------------------------------------


def _as_2d(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return X


def kernel_inputs(model: GPModel, X, with_tape: bool = False):
    """Map raw inputs into the space the base kernel sees.

    Returns ``(U, tape)`` where the tape is None unless requested and a net
    is involved.
    """
    X = _as_2d(X)
    if model.feature_mode == RAW:
        return X, None
    if model.feature_mode == NET_FEATURES:
        F, tape = featurenet.forward(model.net, X)
        return F, (tape if with_tape else None)
    return kernels.warp_inputs(model.kernel.warp, X, with_tape=with_tape)


def _base_spec(model: GPModel) -> KernelSpec:
    return kernels.strip_warp(model.kernel)


def _outscale(model: GPModel) -> float:
    if model.feature_mode == WARPED_KERNEL:
        return model.kernel.warp.outscale
    return 1.0


def _net_out_dim(model: GPModel) -> int:
    return model.net.output_dim if model.net is not None else 0


def _net_trainable(model: GPModel) -> bool:
    return model.feature_mode in (NET_FEATURES, WARPED_KERNEL)


# ---------------------------------------------------------------------------
# marginal likelihood and prediction
# ---------------------------------------------------------------------------


@dataclass
class FittedGP:
    """A model conditioned on training data via one Cholesky factorization."""

    model: GPModel
    X_train: np.ndarray
    y_train: np.ndarray
    chol: CholFactor
    alpha: np.ndarray


def _noisy_cov(model: GPModel, U: np.ndarray) -> np.ndarray:
    K = _outscale(model) * kernels.eval_kernel(_base_spec(model), U, U)
    return K + model.noise_variance * np.eye(U.shape[0])


def fit_gp(model: GPModel, X, y) -> FittedGP:
    """Condition the model on observations; no hyperparameters move."""
    validate_model(model)
    X = _as_2d(X)
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.size:
        raise DimensionMismatch(f"{X.shape[0]} inputs but {y.size} targets")
    U, _ = kernel_inputs(model, X)
    L = cholesky_psd(_noisy_cov(model, U))
    alpha = solve_chol(L, y - model.mean) if y.size else np.zeros(0)
    return FittedGP(model=model, X_train=X, y_train=y, chol=L, alpha=alpha)


def log_marginal_likelihood(model: GPModel, X, y) -> float:
    """log N(y; mean, K + noise*I), computed via Cholesky."""
    fit = fit_gp(model, X, y)
    n = fit.y_train.size
    if n == 0:
        return 0.0
    r = fit.y_train - model.mean
    return float(-0.5 * r @ fit.alpha - 0.5 * chol_logdet(fit.chol) - 0.5 * n * LOG_2PI)


def posterior_predict(
    fit: FittedGP, X_star, include_noise: bool = True
) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and variance at new points.

    Variance is the latent predictive variance plus the observation noise
    unless ``include_noise`` is False. With no training data this returns
    the prior. Negative variances from round-off are clamped at zero and
    counted in a module diagnostic.
    """
    model = fit.model
    X_star = _as_2d(X_star)
    if X_star.shape[1] != fit.X_train.shape[1] and fit.X_train.size:
        raise DimensionMismatch(
            f"train dim {fit.X_train.shape[1]} vs query dim {X_star.shape[1]}"
        )
    U_star, _ = kernel_inputs(model, X_star)
    prior = _outscale(model) * kernels.eval_kernel_diag(_base_spec(model), U_star)
    if fit.y_train.size == 0:
        mean = np.full(X_star.shape[0], model.mean)
        var = prior.copy()
    else:
        U_train, _ = kernel_inputs(model, fit.X_train)
        K_s = _outscale(model) * kernels.eval_kernel(_base_spec(model), U_train, U_star)
        mean = model.mean + K_s.T @ fit.alpha
        V = solve_lower(fit.chol, K_s)
        var = prior - np.sum(V**2, axis=0)
    neg = var < 0.0
    if np.any(neg):
        _clamp_diagnostics["count"] += int(np.sum(neg))
        var = np.where(neg, 0.0, var)
    if include_noise:
        var = var + model.noise_variance
    return mean, var


def posterior_cov(fit: FittedGP, X_star) -> np.ndarray:
    """Full latent posterior covariance at the query points."""
    model = fit.model
    X_star = _as_2d(X_star)
    U_star, _ = kernel_inputs(model, X_star)
    K_ss = _outscale(model) * kernels.eval_kernel(_base_spec(model), U_star, U_star)
    if fit.y_train.size == 0:
        return K_ss
    U_train, _ = kernel_inputs(model, fit.X_train)
    K_s = _outscale(model) * kernels.eval_kernel(_base_spec(model), U_train, U_star)
    V = solve_lower(fit.chol, K_s)
    return K_ss - V.T @ V


# ---------------------------------------------------------------------------
# flat parameter vector
# ---------------------------------------------------------------------------


def trainable_params(model: GPModel) -> np.ndarray:
    """Flat copy of every trainable parameter of the model."""
    parts = [np.asarray(model.kernel.log_params, dtype=float)]
    if model.feature_mode == WARPED_KERNEL:
        parts.append([model.kernel.warp.log_outscale])
    parts.append([model.log_noise, model.mean])
    if _net_trainable(model):
        parts.append(featurenet.flatten_params(model.net))
    return np.concatenate([np.atleast_1d(np.asarray(p, dtype=float)) for p in parts])


def with_params(model: GPModel, vec) -> GPModel:
    """A copy of the model with parameters taken from a flat vector."""
    vec = np.asarray(vec, dtype=float)
    out = model.copy()
    nk = np.asarray(model.kernel.log_params).size
    pos = 0
    out.kernel.log_params = vec[pos : pos + nk].copy()
    pos += nk
    if out.feature_mode == WARPED_KERNEL:
        out.kernel.warp.log_outscale = float(vec[pos])
        pos += 1
    out.log_noise = float(vec[pos])
    out.mean = float(vec[pos + 1])
    pos += 2
    if _net_trainable(out):
        n_net = featurenet.num_params(out.net)
        featurenet.set_params(out.net, vec[pos : pos + n_net])
        pos += n_net
    if pos != vec.size:
        raise DimensionMismatch(f"expected {pos} parameters, got {vec.size}")
    return out


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def _feature_adjoint(base: KernelSpec, U: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Chain a symmetric adjoint on K(U, U) to the kernel inputs U."""
    P = kernels.grad_first_input(base, U, U)  # (n, n, d)
    return np.einsum("ij,ijd->id", G + G.T, P)


def _nll_value_and_grad(model: GPModel, X, y) -> tuple[float, np.ndarray]:
    validate_model(model)
    X = _as_2d(X)
    y = np.asarray(y, dtype=float).ravel()
    n = y.size
    U, tape = kernel_inputs(model, X, with_tape=True)
    base = _base_spec(model)
    q = _outscale(model)
    Kbase = kernels.eval_kernel(base, U, U)
    s2 = model.noise_variance
    L = cholesky_psd(q * Kbase + s2 * np.eye(n))
    r = y - model.mean
    alpha = solve_chol(L, r)
    nll = 0.5 * float(r @ alpha) + 0.5 * chol_logdet(L) + 0.5 * n * LOG_2PI

    Kinv = solve_chol(L, np.eye(n))
    G = 0.5 * (Kinv - np.outer(alpha, alpha))  # dNLL / dK_y

    parts = []
    hyper = kernels.kernel_grad_hyper(base, U, U)
    parts.extend(float(np.sum(G * (q * dK))) for dK in hyper)
    if model.feature_mode == WARPED_KERNEL:
        parts.append(float(np.sum(G * (q * Kbase))))
    parts.append(s2 * float(np.trace(G)))  # d / d log noise
    parts.append(-float(np.sum(alpha)))  # d / d mean
    flat = np.asarray(parts)

    if _net_trainable(model):
        dU = q * _feature_adjoint(base, U, G)
        upstream = dU[:, : _net_out_dim(model)]
        dWs, dbs, _ = featurenet.backward(model.net, tape, upstream)
        flat = np.concatenate([flat, featurenet.flatten_grads(dWs, dbs)])
        nll += 0.5 * model.net.l2_coeff * float(
            np.sum(featurenet.flatten_params(model.net) ** 2)
        )
    return float(nll), flat


def nll_gradients(model: GPModel, X, y) -> np.ndarray:
    """Gradient of the negative log marginal likelihood.

    The flat layout matches :func:`trainable_params`: kernel log-params,
    log outscale (warped mode), log noise, mean, then net parameters. Net
    gradients include the L2 decay term; the matching ridge penalty is part
    of the training objective but not of the reported loss trace.
    """
    return _nll_value_and_grad(model, X, y)[1]


def train(model: GPModel, X, y, opt: OptimizerConfig | None = None):
    """Jointly train all model parameters by ADAM on the NLL.

    Returns ``(trained model, loss trace)``. The trace records the pure NLL
    (no L2 term) before each update.
    """
    opt = opt or OptimizerConfig()
    x0 = trainable_params(model)
    ridge_half = (
        0.5 * model.net.l2_coeff if (_net_trainable(model) and model.net is not None) else 0.0
    )

    def value_and_grad(vec):
        m = with_params(model, vec)
        f, g = _nll_value_and_grad(m, X, y)
        if ridge_half:
            # report the pure NLL in the trace; ADAM still sees the decayed grad
            f -= ridge_half * float(np.sum(featurenet.flatten_params(m.net) ** 2))
        return f, g

    x_opt, trace = adam_minimize(value_and_grad, x0, opt)
    return with_params(model, x_opt), trace
