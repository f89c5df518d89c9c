"""Covariance kernels, log-domain hyperparameter gradients, and the
input-derivative cross-covariances needed for monotonicity constraints.

Three families are supported:

``"rbf"``
    k(x, x') = sf2 * exp(-||x - x'||^2 / (2 * ls2)) with log_params
    [log sf2, log ls2] (signal variance, squared length scale).
``"rq"``
    k(x, x') = sf2 * (1 + ||x - x'||^2 / (2 * alpha * ls2))^(-alpha) with
    log_params [log sf2, log ls2, log alpha]. For large alpha this
    approaches the RBF kernel.
``"polynomial"``
    k(x, x') = (scale * <x, x'> + offset)^degree with log_params
    [log scale, log offset] and integer ``degree`` >= 1.

A spec may carry a :class:`WarpSpec`: inputs are mapped through a feature
net (selected coordinates may bypass the net and pass straight through),
the base kernel is applied in the warped space, and the result is scaled
by ``exp(log_outscale)``. All hyperparameters live in the log domain so
that unconstrained optimization preserves positivity.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import featurenet
from .featurenet import FeatureNet, GradientTape
from .numerics import DimensionMismatch

__all__ = [
    "KernelSpec",
    "WarpSpec",
    "InvalidHyperparameter",
    "UnsupportedKernel",
    "eval_kernel",
    "eval_kernel_diag",
    "kernel_grad_hyper",
    "kernel_grad_hyper_diag",
    "kernel_grad_input",
    "kernel_grad_input_input",
    "rbf",
    "rational_quadratic",
    "polynomial",
]

RBF = "rbf"
RQ = "rq"
POLYNOMIAL = "polynomial"

_FAMILIES = {RBF: 2, RQ: 3, POLYNOMIAL: 2}


class InvalidHyperparameter(ValueError):
    """A hyperparameter is missing, non-finite, or out of its domain."""


class UnsupportedKernel(Exception):
    """The requested derivative is not available for this kernel family."""


@dataclass
class WarpSpec:
    """Feature-net warp around a base kernel.

    ``passthrough_dims`` lists input coordinates that bypass the net and are
    appended raw after the net outputs, so the kernel input layout is
    ``[net outputs..., passthrough coords in listed order]``. Keeping e.g.
    the time axis out of the net preserves analytic kernel derivatives along
    it, which the monotonicity machinery requires.
    """

    net: FeatureNet
    log_outscale: float = 0.0
    passthrough_dims: tuple[int, ...] = ()

    @property
    def outscale(self) -> float:
        return float(np.exp(self.log_outscale))


@dataclass
class KernelSpec:
    family: str
    log_params: np.ndarray
    degree: int = 1
    warp: WarpSpec | None = None

    def copy(self) -> "KernelSpec":
        warp = None
        if self.warp is not None:
            warp = WarpSpec(
                net=self.warp.net.copy(),
                log_outscale=self.warp.log_outscale,
                passthrough_dims=tuple(self.warp.passthrough_dims),
            )
        return KernelSpec(
            family=self.family,
            log_params=np.asarray(self.log_params, dtype=float).copy(),
            degree=self.degree,
            warp=warp,
        )


def rbf(signal_variance: float = 1.0, lengthscale_sq: float = 1.0) -> KernelSpec:
    return KernelSpec(RBF, np.log([signal_variance, lengthscale_sq]))


def rational_quadratic(
    signal_variance: float = 1.0, lengthscale_sq: float = 1.0, alpha: float = 1.0
) -> KernelSpec:
    return KernelSpec(RQ, np.log([signal_variance, lengthscale_sq, alpha]))


def polynomial(scale: float = 1.0, offset: float = 1.0, degree: int = 1) -> KernelSpec:
    return KernelSpec(POLYNOMIAL, np.log([scale, offset]), degree=degree)


def validate_spec(spec: KernelSpec) -> None:
    if spec.family not in _FAMILIES:
        raise InvalidHyperparameter(f"unknown kernel family {spec.family!r}")
    lp = np.asarray(spec.log_params, dtype=float)
    if lp.shape != (_FAMILIES[spec.family],):
        raise InvalidHyperparameter(
            f"{spec.family} expects {_FAMILIES[spec.family]} log-params, got {lp.shape}"
        )
    if not np.all(np.isfinite(lp)) or not np.all(np.isfinite(np.exp(lp))):
        raise InvalidHyperparameter("log-params must map to finite positive values")
    if spec.family == POLYNOMIAL and int(spec.degree) < 1:
        raise InvalidHyperparameter("polynomial degree must be >= 1")


def strip_warp(spec: KernelSpec) -> KernelSpec:
    """The base kernel of a (possibly warped) spec; shares log_params."""
    if spec.warp is None:
        return spec
    return replace(spec, warp=None)


def num_hyperparams(spec: KernelSpec) -> int:
    """Trainable log-domain hyperparameter count (including the outscale)."""
    return _FAMILIES[spec.family] + (1 if spec.warp is not None else 0)


# ---------------------------------------------------------------------------
# warped input mapping
# ---------------------------------------------------------------------------


def warp_block_dims(warp: WarpSpec, input_dim: int) -> list[int]:
    """Input coordinates consumed by the net (the non-passthrough ones)."""
    keep = set(warp.passthrough_dims)
    return [j for j in range(input_dim) if j not in keep]


def warp_inputs(
    warp: WarpSpec, X: np.ndarray, with_tape: bool = False
) -> tuple[np.ndarray, GradientTape | None]:
    """Map raw inputs into the kernel space of a warped spec."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    block = warp_block_dims(warp, X.shape[1])
    F, tape = featurenet.forward(warp.net, X[:, block])
    if warp.passthrough_dims:
        F = np.hstack([F, X[:, list(warp.passthrough_dims)]])
    return F, (tape if with_tape else None)


# ---------------------------------------------------------------------------
# base-family evaluation
# ---------------------------------------------------------------------------


def _as_points(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise DimensionMismatch(f"expected a 2-D point set, got shape {X.shape}")
    return X


def _check_pair(X1, X2) -> tuple[np.ndarray, np.ndarray, bool]:
    same = X1 is X2
    X1, X2 = _as_points(X1), _as_points(X2)
    if X1.shape[1] != X2.shape[1]:
        raise DimensionMismatch(
            f"point sets have dims {X1.shape[1]} and {X2.shape[1]}"
        )
    same = same or (X1.shape == X2.shape and np.array_equal(X1, X2))
    return X1, X2, same


def _sqdist(X1: np.ndarray, X2: np.ndarray) -> np.ndarray:
    s1 = np.sum(X1**2, axis=1)[:, None]
    s2 = np.sum(X2**2, axis=1)[None, :]
    return np.maximum(s1 + s2 - 2.0 * (X1 @ X2.T), 0.0)


def _base_eval(spec: KernelSpec, X1: np.ndarray, X2: np.ndarray) -> np.ndarray:
    p = np.exp(np.asarray(spec.log_params, dtype=float))
    if spec.family == RBF:
        sf2, ls2 = p
        return sf2 * np.exp(-_sqdist(X1, X2) / (2.0 * ls2))
    if spec.family == RQ:
        sf2, ls2, alpha = p
        B = 1.0 + _sqdist(X1, X2) / (2.0 * alpha * ls2)
        return sf2 * B ** (-alpha)
    if spec.family == POLYNOMIAL:
        scale, offset = p
        return (scale * (X1 @ X2.T) + offset) ** int(spec.degree)
    raise InvalidHyperparameter(f"unknown kernel family {spec.family!r}")


def eval_kernel(spec: KernelSpec, X1, X2) -> np.ndarray:
    """Evaluate the kernel matrix between two point sets.

    For a warped spec, points are first mapped through the feature net
    (with passthrough coordinates appended raw), the base kernel is applied
    in that space, and the result is scaled by ``exp(log_outscale)``.
    Evaluating a set against itself yields an exactly symmetric matrix.
    """
    validate_spec(spec)
    X1, X2, same = _check_pair(X1, X2)
    if spec.warp is not None:
        U1, _ = warp_inputs(spec.warp, X1)
        U2 = U1 if same else warp_inputs(spec.warp, X2)[0]
        K = spec.warp.outscale * _base_eval(strip_warp(spec), U1, U2)
    else:
        K = _base_eval(spec, X1, X2)
    if same:
        K = 0.5 * (K + K.T)
    return K


def eval_kernel_diag(spec: KernelSpec, X) -> np.ndarray:
    """The diagonal k(x_i, x_i) without forming the full matrix."""
    validate_spec(spec)
    X = _as_points(X)
    if spec.warp is not None:
        U, _ = warp_inputs(spec.warp, X)
        return spec.warp.outscale * _base_diag(strip_warp(spec), U)
    return _base_diag(spec, X)


def _base_diag(spec: KernelSpec, X: np.ndarray) -> np.ndarray:
    p = np.exp(np.asarray(spec.log_params, dtype=float))
    n = X.shape[0]
    if spec.family == RBF:
        return np.full(n, p[0])
    if spec.family == RQ:
        return np.full(n, p[0])
    scale, offset = p
    return (scale * np.sum(X**2, axis=1) + offset) ** int(spec.degree)


# ---------------------------------------------------------------------------
# gradients with respect to log-domain hyperparameters
# ---------------------------------------------------------------------------


def _base_grad_hyper(
    spec: KernelSpec, X1: np.ndarray, X2: np.ndarray
) -> list[np.ndarray]:
    p = np.exp(np.asarray(spec.log_params, dtype=float))
    if spec.family == RBF:
        sf2, ls2 = p
        d2 = _sqdist(X1, X2)
        K = sf2 * np.exp(-d2 / (2.0 * ls2))
        return [K, K * d2 / (2.0 * ls2)]
    if spec.family == RQ:
        sf2, ls2, alpha = p
        d2 = _sqdist(X1, X2)
        B = 1.0 + d2 / (2.0 * alpha * ls2)
        K = sf2 * B ** (-alpha)
        dK_ls2 = sf2 * B ** (-alpha - 1.0) * d2 / (2.0 * ls2)
        dK_alpha = K * (-alpha * np.log(B) + d2 / (2.0 * ls2 * B))
        return [K, dK_ls2, dK_alpha]
    scale, offset = p
    deg = int(spec.degree)
    S = scale * (X1 @ X2.T) + offset
    Spow = S ** (deg - 1)
    return [deg * Spow * scale * (X1 @ X2.T), deg * Spow * offset]


def kernel_grad_hyper(spec: KernelSpec, X1, X2) -> list[np.ndarray]:
    """dK/d(log theta_j) for each trainable hyperparameter.

    Order matches ``log_params``; for a warped spec a final matrix for the
    log output scale is appended (it equals the kernel matrix itself).
    """
    validate_spec(spec)
    X1, X2, same = _check_pair(X1, X2)
    if spec.warp is None:
        return _base_grad_hyper(spec, X1, X2)
    U1, _ = warp_inputs(spec.warp, X1)
    U2 = U1 if same else warp_inputs(spec.warp, X2)[0]
    q = spec.warp.outscale
    base = strip_warp(spec)
    grads = [q * G for G in _base_grad_hyper(base, U1, U2)]
    grads.append(q * _base_eval(base, U1, U2))
    return grads


def kernel_grad_hyper_diag(spec: KernelSpec, X) -> list[np.ndarray]:
    """Diagonal of each dK/d(log theta_j), matching kernel_grad_hyper."""
    validate_spec(spec)
    X = _as_points(X)
    if spec.warp is not None:
        U, _ = warp_inputs(spec.warp, X)
        q = spec.warp.outscale
        base = strip_warp(spec)
        grads = [q * g for g in _base_grad_hyper_diag(base, U)]
        grads.append(q * _base_diag(base, U))
        return grads
    return _base_grad_hyper_diag(spec, X)


def _base_grad_hyper_diag(spec: KernelSpec, X: np.ndarray) -> list[np.ndarray]:
    p = np.exp(np.asarray(spec.log_params, dtype=float))
    n = X.shape[0]
    if spec.family == RBF:
        return [np.full(n, p[0]), np.zeros(n)]
    if spec.family == RQ:
        return [np.full(n, p[0]), np.zeros(n), np.zeros(n)]
    scale, offset = p
    deg = int(spec.degree)
    sq = np.sum(X**2, axis=1)
    Spow = (scale * sq + offset) ** (deg - 1)
    return [deg * Spow * scale * sq, deg * Spow * offset]


# ---------------------------------------------------------------------------
# derivatives with respect to inputs (monotonicity cross-covariances)
# ---------------------------------------------------------------------------


def _rbf_params(spec: KernelSpec) -> tuple[float, float]:
    if spec.family != RBF:
        raise UnsupportedKernel(
            f"input derivatives are available for the RBF family only, "
            f"not {spec.family!r}"
        )
    sf2, ls2 = np.exp(np.asarray(spec.log_params, dtype=float))
    return float(sf2), float(ls2)


def _warped_deriv_coord(spec: KernelSpec, dim: int) -> int:
    """Kernel-space coordinate of a passthrough input dim, or raise."""
    warp = spec.warp
    if dim not in warp.passthrough_dims:
        raise UnsupportedKernel(
            "input derivatives through the feature net are not supported; "
            f"dim {dim} must be a passthrough coordinate"
        )
    return warp.net.output_dim + warp.passthrough_dims.index(dim)


def kernel_grad_input(spec: KernelSpec, x, X, dim: int) -> np.ndarray:
    """d k(x, x_j) / d x_dim for each x_j (RBF family only).

    For a warped spec the derivative is taken along a passthrough
    coordinate, where the warp chain rule is the identity.
    """
    validate_spec(spec)
    x = _as_points(x)
    X = _as_points(X)
    if x.shape != (1, X.shape[1]):
        raise DimensionMismatch("x must be a single point matching X's dim")
    if not 0 <= dim < X.shape[1]:
        raise DimensionMismatch(f"dim {dim} out of range for inputs of dim {X.shape[1]}")
    _, ls2 = _rbf_params(strip_warp(spec))
    if spec.warp is not None:
        coord = _warped_deriv_coord(spec, dim)
        u, _ = warp_inputs(spec.warp, x)
        U, _ = warp_inputs(spec.warp, X)
        Krow = spec.warp.outscale * _base_eval(strip_warp(spec), u, U)[0]
        return -(u[0, coord] - U[:, coord]) / ls2 * Krow
    Krow = _base_eval(spec, x, X)[0]
    return -(x[0, dim] - X[:, dim]) / ls2 * Krow


def kernel_grad_input_input(spec: KernelSpec, X1, X2, dim1: int, dim2: int) -> np.ndarray:
    """Mixed second derivative d^2 k / (d x_dim1 d x'_dim2), RBF only."""
    validate_spec(spec)
    X1, X2, _ = _check_pair(X1, X2)
    d = X1.shape[1]
    if not (0 <= dim1 < d and 0 <= dim2 < d):
        raise DimensionMismatch(f"dims ({dim1}, {dim2}) out of range for dim {d}")
    _, ls2 = _rbf_params(strip_warp(spec))
    if spec.warp is not None:
        c1 = _warped_deriv_coord(spec, dim1)
        c2 = _warped_deriv_coord(spec, dim2)
        U1, _ = warp_inputs(spec.warp, X1)
        U2, _ = warp_inputs(spec.warp, X2)
        K = spec.warp.outscale * _base_eval(strip_warp(spec), U1, U2)
        d1 = U1[:, c1][:, None] - U2[:, c1][None, :]
        d2_ = U1[:, c2][:, None] - U2[:, c2][None, :]
        same = 1.0 if c1 == c2 else 0.0
    else:
        K = _base_eval(spec, X1, X2)
        d1 = X1[:, dim1][:, None] - X2[:, dim1][None, :]
        d2_ = X1[:, dim2][:, None] - X2[:, dim2][None, :]
        same = 1.0 if dim1 == dim2 else 0.0
    return K * (same / ls2 - d1 * d2_ / ls2**2)


# ---------------------------------------------------------------------------
# internal: first-argument gradients for backprop chains (all families)
# ---------------------------------------------------------------------------


def grad_first_input(spec: KernelSpec, X1, X2) -> np.ndarray:
    """(n1, n2, d) array of d k(x_i, y_j) / d x_i for an unwarped spec.

    Used to chain marginal-likelihood and ELBO adjoints into feature nets
    and inducing locations; unlike the public derivative ops this supports
    every family.
    """
    if spec.warp is not None:
        raise ValueError("grad_first_input operates on the base kernel only")
    X1, X2, _ = _check_pair(X1, X2)
    diff = X1[:, None, :] - X2[None, :, :]
    p = np.exp(np.asarray(spec.log_params, dtype=float))
    if spec.family == RBF:
        sf2, ls2 = p
        K = sf2 * np.exp(-_sqdist(X1, X2) / (2.0 * ls2))
        return (-K / ls2)[:, :, None] * diff
    if spec.family == RQ:
        sf2, ls2, alpha = p
        B = 1.0 + _sqdist(X1, X2) / (2.0 * alpha * ls2)
        A = -sf2 * B ** (-alpha - 1.0) / ls2
        return A[:, :, None] * diff
    scale, offset = p
    deg = int(spec.degree)
    S = scale * (X1 @ X2.T) + offset
    return (deg * scale * S ** (deg - 1))[:, :, None] * X2[None, :, :]


def grad_first_input_diag(spec: KernelSpec, X) -> np.ndarray:
    """(n, d) array of d k(x, x') / d x evaluated at x' = x (unwarped)."""
    if spec.warp is not None:
        raise ValueError("grad_first_input_diag operates on the base kernel only")
    X = _as_points(X)
    if spec.family in (RBF, RQ):
        return np.zeros_like(X)
    scale, offset = np.exp(np.asarray(spec.log_params, dtype=float))
    deg = int(spec.degree)
    S = scale * np.sum(X**2, axis=1) + offset
    return (deg * scale * S ** (deg - 1))[:, None] * X
