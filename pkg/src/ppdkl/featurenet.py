"""Deterministic feature extractor with exact reverse-mode gradients.

A small fully connected net maps raw inputs to a low-dimensional feature
vector that the GP kernel consumes. Hidden layers use tanh; the output layer
is linear. Forward passes cache the per-layer activations on a tape so that
:func:`backward` can return exact gradients with respect to every weight,
bias, and input. Training is driven from the GP side (the marginal
likelihood), so this module knows nothing about losses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import DimensionMismatch

__all__ = [
    "FeatureNet",
    "GradientTape",
    "TapeMismatch",
    "backward",
    "forward",
    "identity_net",
    "init_net",
    "num_params",
]

HIDDEN_DIMS = (100, 50, 50)
OUTPUT_DIM = 2


class TapeMismatch(Exception):
    """The tape was not produced by a forward pass of this net/batch."""


@dataclass
class FeatureNet:
    """Fully connected feature extractor.

    ``weights[i]`` has shape (fan_in, fan_out); the forward map is
    ``X @ W + b`` with tanh on all but the last layer. ``l2_coeff`` is the
    weight-decay strength folded into parameter gradients by
    :func:`backward`.
    """

    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    l2_coeff: float = 0.0

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    def copy(self) -> "FeatureNet":
        return FeatureNet(
            layer_dims=list(self.layer_dims),
            weights=[W.copy() for W in self.weights],
            biases=[b.copy() for b in self.biases],
            l2_coeff=self.l2_coeff,
        )


@dataclass
class GradientTape:
    """Per-layer inputs cached by one forward pass."""

    layer_inputs: list[np.ndarray] = field(default_factory=list)
    layer_dims: tuple[int, ...] = ()
    batch_size: int = 0


def init_net(
    input_dim: int,
    seed: int,
    hidden_dims: tuple[int, ...] = HIDDEN_DIMS,
    output_dim: int = OUTPUT_DIM,
    l2_coeff: float = 0.0,
) -> FeatureNet:
    """Build a net with weights drawn at scale 1/sqrt(fan_in), biases zero.

    Deterministic given ``seed``.
    """
    if input_dim < 1:
        raise ValueError("input_dim must be >= 1")
    rng = np.random.default_rng(seed)
    dims = [int(input_dim), *hidden_dims, int(output_dim)]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return FeatureNet(layer_dims=dims, weights=weights, biases=biases, l2_coeff=l2_coeff)


def identity_net(dim: int = 2) -> FeatureNet:
    """Test-only net computing h(x) = x: a single linear layer with W = I."""
    return FeatureNet(
        layer_dims=[dim, dim],
        weights=[np.eye(dim)],
        biases=[np.zeros(dim)],
        l2_coeff=0.0,
    )


def forward(net: FeatureNet, X) -> tuple[np.ndarray, GradientTape]:
    """Map a batch of points to features, caching activations on a tape."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != net.input_dim:
        raise DimensionMismatch(
            f"net expects inputs of dim {net.input_dim}, got {X.shape[1]}"
        )
    inputs = [X]
    h = X
    last = len(net.weights) - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ W + b
        h = z if i == last else np.tanh(z)
        if i != last:
            inputs.append(h)
    tape = GradientTape(
        layer_inputs=inputs, layer_dims=tuple(net.layer_dims), batch_size=X.shape[0]
    )
    return h, tape


def backward(
    net: FeatureNet,
    tape: GradientTape,
    upstream,
    include_decay: bool = True,
) -> tuple[list[np.ndarray], list[np.ndarray], np.ndarray]:
    """Reverse-mode gradients of sum_i <upstream_i, h(x_i)>.

    Returns ``(weight_grads, bias_grads, input_grads)``. With
    ``include_decay`` the L2 term ``l2_coeff * param`` is added to every
    parameter gradient (callers accumulating several tapes for one net
    disable it on all but the first call).
    """
    if tape.layer_dims != tuple(net.layer_dims):
        raise TapeMismatch("tape layer dims do not match this net")
    upstream = np.atleast_2d(np.asarray(upstream, dtype=float))
    if upstream.shape != (tape.batch_size, net.output_dim):
        raise TapeMismatch(
            f"upstream shape {upstream.shape} does not match batch "
            f"({tape.batch_size}, {net.output_dim})"
        )

    weight_grads = [np.empty_like(W) for W in net.weights]
    bias_grads = [np.empty_like(b) for b in net.biases]
    delta = upstream
    for i in range(len(net.weights) - 1, -1, -1):
        a_in = tape.layer_inputs[i]
        weight_grads[i] = a_in.T @ delta
        bias_grads[i] = delta.sum(axis=0)
        delta = delta @ net.weights[i].T
        if i > 0:
            # a_in is the tanh output feeding layer i; d tanh = 1 - a^2
            delta = delta * (1.0 - a_in**2)
    if include_decay and net.l2_coeff:
        for i, (W, b) in enumerate(zip(net.weights, net.biases)):
            weight_grads[i] += net.l2_coeff * W
            bias_grads[i] += net.l2_coeff * b
    return weight_grads, bias_grads, delta


def num_params(net: FeatureNet) -> int:
    return sum(W.size for W in net.weights) + sum(b.size for b in net.biases)


def flatten_params(net: FeatureNet) -> np.ndarray:
    """Concatenate all weights and biases, layer by layer (W then b)."""
    parts = []
    for W, b in zip(net.weights, net.biases):
        parts.append(W.ravel())
        parts.append(b)
    return np.concatenate(parts) if parts else np.zeros(0)


def set_params(net: FeatureNet, vec: np.ndarray) -> None:
    """Write a flat parameter vector back into the net, in place."""
    vec = np.asarray(vec, dtype=float)
    if vec.size != num_params(net):
        raise DimensionMismatch(
            f"expected {num_params(net)} parameters, got {vec.size}"
        )
    pos = 0
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        net.weights[i] = vec[pos : pos + W.size].reshape(W.shape)
        pos += W.size
        net.biases[i] = vec[pos : pos + b.size].copy()
        pos += b.size


def flatten_grads(weight_grads, bias_grads) -> np.ndarray:
    """Flatten backward() output in the same layout as flatten_params."""
    parts = []
    for dW, db in zip(weight_grads, bias_grads):
        parts.append(dW.ravel())
        parts.append(db)
    return np.concatenate(parts) if parts else np.zeros(0)
