"""ADAM loop shared by the exact and sparse GP trainers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["OptimizerConfig", "DivergedLoss", "adam_minimize"]


class DivergedLoss(Exception):
    """The objective became non-finite during optimization."""


@dataclass
class OptimizerConfig:
    step_size: float = 1e-2
    iterations: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    # Optional early stop on relative objective change; None runs the full
    # iteration budget so the loss trace has exactly `iterations` entries.
    tol: float | None = None


def adam_minimize(value_and_grad, x0, config: OptimizerConfig):
    """Minimize a smooth objective with ADAM.

    ``value_and_grad(x)`` returns ``(f, df/dx)``. Returns the final point
    and the trace of objective values seen before each update.
    """
    x = np.asarray(x0, dtype=float).copy()
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    trace = []
    prev = None
    for t in range(1, config.iterations + 1):
        f, g = value_and_grad(x)
        if not np.isfinite(f) or not np.all(np.isfinite(g)):
            raise DivergedLoss(f"objective became non-finite at iteration {t}")
        trace.append(float(f))
        m = config.beta1 * m + (1.0 - config.beta1) * g
        v = config.beta2 * v + (1.0 - config.beta2) * g**2
        mhat = m / (1.0 - config.beta1**t)
        vhat = v / (1.0 - config.beta2**t)
        x = x - config.step_size * mhat / (np.sqrt(vhat) + config.eps)
        if config.tol is not None and prev is not None:
            if abs(prev - f) <= config.tol * max(1.0, abs(prev)):
                break
        prev = f
    return x, np.asarray(trace)
