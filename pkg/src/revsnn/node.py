"""Invertible split-coupling spiking node.

The input current X and carried potential V are split into groups along the
last axis.  Group 1's membrane is driven by its own input slice; every later
group is driven by the previous group's output.  Each group fires through a
hard threshold and adds a scaled slice of another group's input on top
(group i couples input slice i+1, wrapping around), so the whole step can be
solved backwards in closed form: the last group's output reveals X1, which
unlocks the first group, and so on.  Outputs Y are real-valued (spike term
plus the coupling term), not binary.

The two-group step is the canonical special case and is also provided as an
explicit unrolled form (`pair_step_forward` / `pair_step_inverse`); the
grouped code reduces to it bit-exactly at groups=2.

Sequence helpers iterate the step over time.  In "stored" mode they cache
input, membrane and entry potential per timestep; in "reversible" mode they
retain exactly one tensor (the final potential) regardless of sequence
length, which is the entire point.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .lif import smooth_spike
from .tensor import (
    ShapeMismatch,
    Tensor,
    concat_last,
    heaviside,
    split_last,
)

SPIKE_HARD = "hard"
SPIKE_SMOOTH = "smooth"

# Denominators smaller than this abort the inverse step instead of letting
# near-infinities corrupt recovered values and gradients.
DENOMINATOR_GUARD = 1e-12


class SingularDenominator(ArithmeticError):
    def __init__(self, index: int, value: float):
        super().__init__(
            f"inverse step denominator ~0 at element index {index} (value {value:.3e})"
        )
        self.index = index
        self.value = value


@dataclass(frozen=True)
class NodeParams:
    """Constants of the reversible node.

    tau: membrane time constant (the update mixes in 1/tau of the drive).
    alpha: carry factor on the previous potential.
    beta: coupling scale on the cross-group input term; must be nonzero so
        the inverse can divide by it.
    v_th / v_res: firing threshold and reset value.
    theta: sharpness of the surrogate derivative.
    groups: how many slices the last axis is split into (>= 2).
    """

    tau: float = 2.0
    alpha: float = 0.1
    beta: float = 1.0
    v_th: float = 1.0
    v_res: float = 0.0
    theta: float = 2.0
    groups: int = 2

    def __post_init__(self):
        if self.tau == 0:
            raise ValueError("tau must be nonzero")
        if self.beta == 0:
            raise ValueError("beta must be nonzero (the inverse divides by it)")
        if self.theta <= 0:
            raise ValueError(f"theta must be positive, got {self.theta}")
        if self.groups < 2:
            raise ValueError(f"groups must be >= 2, got {self.groups}")


@dataclass(frozen=True)
class StepOutput:
    y: Tensor
    v: Tensor
    m: Optional[Tensor] = None  # membranes, emitted only when asked for


@dataclass(frozen=True)
class InverseRecord:
    """Per-group quantities produced while inverting one step, kept so a
    backward pass can differentiate without re-running the forward step."""

    membranes: list
    one_minus_y: list


def _fire(m: Tensor, params: NodeParams, spike: str) -> Tensor:
    if spike == SPIKE_HARD:
        return heaviside(m, params.v_th)
    if spike == SPIKE_SMOOTH:
        return smooth_spike(m - params.v_th, params.theta)
    raise ValueError(f"unknown spike mode {spike!r}")


def _check_pair(x: Tensor, v_prev: Tensor) -> None:
    if x.shape != v_prev.shape:
        raise ShapeMismatch(f"input {x.shape} and potential {v_prev.shape} differ")


def step_forward(
    x: Tensor,
    v_prev: Tensor,
    params: NodeParams,
    *,
    with_membranes: bool = False,
    spike: str = SPIKE_HARD,
) -> StepOutput:
    """One grouped coupling step: returns outputs Y and new potentials V.

    Membranes are concatenated and returned only when `with_membranes` is
    set (stored-cache training wants them; the reversible path does not).
    """
    _check_pair(x, v_prev)
    n = params.groups
    xs = split_last(x, n)
    vs = split_last(v_prev, n)
    inv_tau = 1.0 / params.tau
    ys, vouts, ms = [], [], []
    drive = xs[0]
    for i in range(n):
        vi = vs[i]
        m = vi + (drive - vi) * inv_tau
        y = _fire(m, params, spike) + xs[(i + 1) % n] * params.beta
        v = (1.0 - y) * m + y * params.v_res + vi * params.alpha
        ys.append(y)
        vouts.append(v)
        ms.append(m)
        drive = y
    return StepOutput(
        concat_last(ys),
        concat_last(vouts),
        concat_last(ms) if with_membranes else None,
    )


def pair_step_forward(
    x: Tensor,
    v_prev: Tensor,
    params: NodeParams,
    *,
    with_membranes: bool = False,
    spike: str = SPIKE_HARD,
) -> StepOutput:
    """Explicit two-half form of the step (the groups=2 equations, unrolled)."""
    _check_pair(x, v_prev)
    x1, x2 = split_last(x, 2)
    v1, v2 = split_last(v_prev, 2)
    inv_tau = 1.0 / params.tau
    m1 = v1 + (x1 - v1) * inv_tau
    y1 = _fire(m1, params, spike) + x2 * params.beta
    v1_new = (1.0 - y1) * m1 + y1 * params.v_res + v1 * params.alpha
    m2 = v2 + (y1 - v2) * inv_tau
    y2 = _fire(m2, params, spike) + x1 * params.beta
    v2_new = (1.0 - y2) * m2 + y2 * params.v_res + v2 * params.alpha
    return StepOutput(
        concat_last([y1, y2]),
        concat_last([v1_new, v2_new]),
        concat_last([m1, m2]) if with_membranes else None,
    )


def _guard_denominator(den: Tensor) -> None:
    small = np.flatnonzero(np.abs(den.data) < DENOMINATOR_GUARD)
    if small.size:
        i = int(small[0])
        raise SingularDenominator(i, float(den.data.reshape(-1)[i]))


def _solve_entry_potential(y_i: Tensor, v_i: Tensor, drive: Tensor, params: NodeParams):
    """Solve the potential update for the potential the step started from.

    Returns (v_prev_i, membrane_i, 1 - y_i).  `drive` is whatever fed the
    group's membrane (X1 for group 1, the previous group's Y otherwise).
    """
    inv_tau = 1.0 / params.tau
    carry = 1.0 - inv_tau
    om = 1.0 - y_i
    den = om * carry + params.alpha
    _guard_denominator(den)
    num = v_i - om * inv_tau * drive - y_i * params.v_res
    v_prev_i = num / den
    m_i = v_prev_i + (drive - v_prev_i) * inv_tau
    return v_prev_i, m_i, om


def step_inverse(
    y: Tensor,
    v: Tensor,
    params: NodeParams,
    *,
    record: bool = False,
    spike: str = SPIKE_HARD,
):
    """Recover (x, v_prev) from one step's outputs.

    The last group's membrane depends only on the known previous-group
    output, so it is solved first and yields X1; X1 then unlocks group 1,
    and the remaining groups follow in order.  With `record=True` the
    per-group membranes and (1 - Y) slices formed along the way are returned
    for reuse by a backward pass.
    """
    _check_pair(y, v)
    n = params.groups
    ys = split_last(y, n)
    vs = split_last(v, n)
    xs = [None] * n
    v_prevs = [None] * n
    ms = [None] * n
    oms = [None] * n
    inv_beta_div = params.beta
    for i in [n - 1, 0] + list(range(1, n - 1)):
        drive = ys[i - 1] if i >= 1 else xs[0]
        v_prev_i, m_i, om_i = _solve_entry_potential(ys[i], vs[i], drive, params)
        xs[(i + 1) % n] = (ys[i] - _fire(m_i, params, spike)) / inv_beta_div
        v_prevs[i] = v_prev_i
        ms[i] = m_i
        oms[i] = om_i
    x = concat_last(xs)
    v_prev = concat_last(v_prevs)
    if record:
        return x, v_prev, InverseRecord(ms, oms)
    return x, v_prev


def pair_step_inverse(y: Tensor, v: Tensor, params: NodeParams, *, spike: str = SPIKE_HARD):
    """Explicit two-half inverse: second half first (recovers X1), then the
    first half (recovers X2)."""
    _check_pair(y, v)
    y1, y2 = split_last(y, 2)
    v1, v2 = split_last(v, 2)
    v2_prev, m2, _ = _solve_entry_potential(y2, v2, y1, params)
    x1 = (y2 - _fire(m2, params, spike)) / params.beta
    v1_prev, m1, _ = _solve_entry_potential(y1, v1, x1, params)
    x2 = (y1 - _fire(m1, params, spike)) / params.beta
    return concat_last([x1, x2]), concat_last([v1_prev, v2_prev])


@dataclass(frozen=True)
class StepCache:
    x: Tensor
    m: Optional[Tensor]
    v_prev: Tensor


@dataclass
class SequenceCache:
    """What a sequence run keeps for its backward pass."""

    mode: str  # "stored" | "reversible"
    steps: Optional[list]  # list[StepCache] in stored mode, else None
    v_final: Tensor

    def retained_tensors(self) -> list:
        if self.mode == "stored":
            out = []
            for s in self.steps:
                out.extend(t for t in (s.x, s.m, s.v_prev) if t is not None)
            return out
        return [self.v_final]

    def retained_elements(self) -> int:
        return sum(t.size for t in self.retained_tensors())


MODE_STORED = "stored"
MODE_REVERSIBLE = "reversible"


def sequence_forward(
    x_seq,
    v0: Tensor,
    params: NodeParams,
    mode: str = MODE_REVERSIBLE,
    *,
    spike: str = SPIKE_HARD,
):
    """Iterate the step over a sequence of inputs.

    Returns (y_seq, v_final, cache).  Stored mode caches (x, membranes,
    entry potential) per timestep; reversible mode retains only v_final.
    """
    if mode not in (MODE_STORED, MODE_REVERSIBLE):
        raise ValueError(f"unknown sequence mode {mode!r}")
    if not x_seq:
        raise ShapeMismatch("sequence_forward needs at least one timestep")
    stored = mode == MODE_STORED
    v = v0
    ys = []
    steps = [] if stored else None
    for x in x_seq:
        out = step_forward(x, v, params, with_membranes=stored, spike=spike)
        if stored:
            steps.append(StepCache(x, out.m, v))
        ys.append(out.y)
        v = out.v
    return ys, v, SequenceCache(mode, steps, v)


def sequence_inverse(y_seq, v_final: Tensor, params: NodeParams, *, spike: str = SPIKE_HARD):
    """Thread the step inverse backwards through time.

    Returns (x_seq, v0) recovered from the outputs and the final potential.
    """
    if not y_seq:
        raise ShapeMismatch("sequence_inverse needs at least one timestep")
    v = v_final
    xs_rev = []
    for y in reversed(y_seq):
        x, v = step_inverse(y, v, params, spike=spike)
        xs_rev.append(x)
    return list(reversed(xs_rev)), v


def stack_forward(x_seq, v0s, params: NodeParams, mode: str = MODE_REVERSIBLE, *, spike: str = SPIKE_HARD):
    """Feed a sequence through a stack of nodes (layer l consumes layer l-1's
    outputs).  Returns (y_seq of the top node, v_finals, caches)."""
    seq = x_seq
    v_finals, caches = [], []
    for v0 in v0s:
        seq, v_final, cache = sequence_forward(seq, v0, params, mode, spike=spike)
        v_finals.append(v_final)
        caches.append(cache)
    return seq, v_finals, caches


def stack_inverse(y_seq, v_finals, params: NodeParams, *, spike: str = SPIKE_HARD):
    """Invert a node stack from the top: each layer's recovered inputs are the
    outputs of the layer below.  Returns (x_seq, v0s)."""
    seq = y_seq
    v0s_rev = []
    for v_final in reversed(v_finals):
        seq, v0 = sequence_inverse(seq, v_final, params, spike=spike)
        v0s_rev.append(v0)
    return seq, list(reversed(v0s_rev))
