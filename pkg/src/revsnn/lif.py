"""Leaky integrate-and-fire neuron with soft subtraction reset.

Also carries the surrogate derivative used by every backward pass and its
exact antiderivative, a smoothed spike used only by finite-difference
checks (never by the training path).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .tensor import ShapeMismatch, Tensor, arctan, heaviside


@dataclass(frozen=True)
class LifParams:
    alpha_leak: float = 0.5
    v_th: float = 1.0
    theta: float = 2.0

    def __post_init__(self):
        if self.theta <= 0:
            raise ValueError(f"theta must be positive, got {self.theta}")


@dataclass(frozen=True)
class LifState:
    v: Tensor
    o_prev: Tensor


def lif_step(state: LifState, weighted_input: Tensor, params: LifParams):
    """One membrane update: leak, integrate, subtract the threshold for every
    spike emitted last step, then fire where the new potential crosses it.

    Returns (new_state, spikes).
    """
    if not (state.v.shape == state.o_prev.shape == weighted_input.shape):
        raise ShapeMismatch(
            f"lif_step: shapes {state.v.shape}, {state.o_prev.shape}, {weighted_input.shape}"
        )
    v_new = state.v * params.alpha_leak + weighted_input - state.o_prev * params.v_th
    spikes = heaviside(v_new, params.v_th)
    return LifState(v_new, spikes), spikes


def surrogate_grad(m: Tensor, theta: float) -> Tensor:
    """Smooth stand-in for the step function's derivative.

    Per element: (theta/2) / (1 + ((pi/2) * theta * m)^2), peaking at
    theta/2 for m = 0.  Callers pass m already offset by the threshold.
    """
    if theta <= 0:
        raise ValueError(f"theta must be positive, got {theta}")
    u = m * (0.5 * math.pi * theta)
    return (0.5 * theta) / (1.0 + u * u)


def smooth_spike(m: Tensor, theta: float) -> Tensor:
    """Differentiable spike: 1/2 + atan((pi/2) * theta * m) / pi.

    Its analytic derivative equals surrogate_grad exactly, which is what
    makes finite differences of a smoothed forward pass a valid oracle for
    the analytic backward passes.
    """
    if theta <= 0:
        raise ValueError(f"theta must be positive, got {theta}")
    u = m * (0.5 * math.pi * theta)
    return arctan(u) * (1.0 / math.pi) + 0.5
