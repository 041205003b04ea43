"""Backward schedules for networks built from invertible spiking nodes.

Three ways to the same gradients:

* stored   - replay from per-timestep caches (classic truncated-graph replay),
* recompute - recover each step's inputs by inversion, rerun the step
  forward to rebuild its intermediates, then differentiate,
* inverse-graph - differentiate directly from the quantities the inversion
  itself produced, skipping the forward rerun.

All three share one vector-Jacobian product for the node step, with the hard
threshold's derivative replaced by the smooth surrogate.  Gradient flows
through every path of the step, including the reset product and the
potential carry; nothing is detached.

A Tape records one forward pass as a bottom-to-top list of entries.  Weight
entries cache their per-timestep inputs in every mode (weight gradients need
them); node entries cache per-timestep state only in stored mode, otherwise
just the final potential.  A node's output sequence is never cached twice:
it is read from the weight entry above it, from the explicit sequence kept
for the top of a weight-free stack, or from the inputs recovered while
inverting the node above.
"""

from __future__ import annotations

from contextlib import nullcontext
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .ledgers import (
    PHASE_FORWARD,
    PHASE_GRAD_FORWARD,
    PHASE_GRAD_INVERSE,
    PHASE_INVERSE,
    MemoryLedger,
    NodeCensus,
)
from .lif import LifParams, surrogate_grad
from .node import (
    SPIKE_HARD,
    SPIKE_SMOOTH,
    NodeParams,
    step_forward,
    step_inverse,
)
from .tensor import Tensor, matmul, split_last, concat_last, transpose2d


class MissingCache(RuntimeError):
    pass


class Strategy(str, Enum):
    """Which backward schedule a tape was recorded for."""

    LIF_STORED = "a0"
    STORED = "a1"
    RECOMPUTE = "b"
    INVERSE_GRAPH = "c"

    @property
    def stores_steps(self) -> bool:
        return self in (Strategy.LIF_STORED, Strategy.STORED)


def _acc(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


def node_vjp(g_y, g_v, y: Tensor, membranes, params: NodeParams, one_minus_y=None):
    """Vector-Jacobian product of one node step.

    g_y / g_v are upstream gradients for the step's outputs (either may be
    None, meaning zero).  `membranes` is the concatenated membrane tensor or
    the per-group list; `one_minus_y` lets a caller reuse the (1 - Y) slices
    an inversion already formed.  Returns (g_x, g_v_prev).
    """
    n = params.groups
    ys = split_last(y, n)
    ms = membranes if isinstance(membranes, list) else split_last(membranes, n)
    oms = one_minus_y if one_minus_y is not None else [1.0 - yi for yi in ys]
    gys = split_last(g_y, n) if g_y is not None else [None] * n
    gvs = split_last(g_v, n) if g_v is not None else [None] * n
    inv_tau = 1.0 / params.tau
    carry = 1.0 - inv_tau

    g_xs = [None] * n
    g_vps = [None] * n
    a_m_next = None  # membrane adjoint of group i+1, whose drive is group i's output
    a_m_first = None
    for i in reversed(range(n)):
        a_y = gys[i]
        if i < n - 1 and a_m_next is not None:
            a_y = _acc(a_y, a_m_next * inv_tau)
        if gvs[i] is not None:
            a_y = _acc(a_y, gvs[i] * (params.v_res - ms[i]))
        a_m = None
        if gvs[i] is not None:
            a_m = gvs[i] * oms[i]
        if a_y is not None:
            a_m = _acc(a_m, a_y * surrogate_grad(ms[i] - params.v_th, params.theta))
        a_vp = None
        if gvs[i] is not None:
            a_vp = gvs[i] * params.alpha
        if a_m is not None:
            a_vp = _acc(a_vp, a_m * carry)
        g_vps[i] = a_vp
        if a_y is not None:
            g_xs[(i + 1) % n] = _acc(g_xs[(i + 1) % n], a_y * params.beta)
        if i == 0:
            a_m_first = a_m
        a_m_next = a_m
    if a_m_first is not None:
        g_xs[0] = _acc(g_xs[0], a_m_first * inv_tau)

    g_x = concat_last([g if g is not None else Tensor.zeros(ys[i].shape) for i, g in enumerate(g_xs)])
    g_vp = concat_last([g if g is not None else Tensor.zeros(ys[i].shape) for i, g in enumerate(g_vps)])
    return g_x, g_vp


def lif_vjp(g_o, g_v, v_new: Tensor, params: LifParams):
    """Adjoint of one LIF step evaluated at its cached membrane.

    Returns (g_input, g_v_prev, g_o_prev); any of the inputs may be None.
    """
    a = g_v
    if g_o is not None:
        a = _acc(a, g_o * surrogate_grad(v_new - params.v_th, params.theta))
    if a is None:
        return None, None, None
    return a, a * params.alpha_leak, a * (-params.v_th)


@dataclass
class DenseEntry:
    entry_id: str
    weights: Tensor
    bias: Tensor
    inputs: list = field(default_factory=list)  # per timestep, kept in every mode


@dataclass
class NodeEntry:
    entry_id: str
    params: NodeParams
    stored: Optional[list] = None  # list[StepCache] when the tape stores steps
    v_final: Optional[Tensor] = None
    y_seq: Optional[list] = None  # explicit outputs for the top of a weight-free stack
    width: int = 0


@dataclass
class LifEntry:
    entry_id: str
    params: LifParams
    stored: Optional[list] = None  # membrane tensor per timestep
    width: int = 0


@dataclass
class Tape:
    strategy: Strategy
    timesteps: int
    entries: list
    smooth: bool = False
    mean_readout: bool = False  # top entry's outputs are averaged over time

    def node_entries(self):
        return [e for e in self.entries if isinstance(e, (NodeEntry, LifEntry))]

    def memory_census(self) -> MemoryLedger:
        """Census of what this tape actually retains per node."""
        mode = "stored" if self.strategy.stores_steps else "reversible"
        ledger = MemoryLedger(mode=mode, timesteps=self.timesteps)
        for e in self.node_entries():
            if isinstance(e, NodeEntry) and not self.strategy.stores_steps:
                ledger.entries.append(
                    NodeCensus(e.entry_id, mode, self.timesteps, 0, e.v_final.size)
                )
            elif isinstance(e, NodeEntry):
                total = sum(
                    t.size for s in e.stored for t in (s.x, s.m, s.v_prev) if t is not None
                )
                ledger.entries.append(
                    NodeCensus(e.entry_id, mode, self.timesteps, total // self.timesteps, 0)
                )
            else:
                total = sum(t.size for t in e.stored)
                ledger.entries.append(
                    NodeCensus(e.entry_id, mode, self.timesteps, total // self.timesteps, 0)
                )
        return ledger


@dataclass
class GradResult:
    input_grads: list  # per entry bottom-to-top: sum over time of d loss / d entry-input
    param_grads: dict  # entry_id -> (g_weights, g_bias)
    recovered: int  # tensors regained by inversion during the pass


def _phase(ledger, phase, node):
    if ledger is None:
        return nullcontext()
    return ledger.phase(phase, node)


def _sum_list(tensors):
    total = None
    for t in tensors:
        total = _acc(total, t)
    return total


def _rebuild_membranes(x: Tensor, v_prev: Tensor, y: Tensor, params: NodeParams):
    """Recompute per-group membranes from a stored (x, v_prev) pair; the
    drives come from the cached outputs, so the result is bit-identical to
    the membranes the forward pass computed."""
    n = params.groups
    xs = split_last(x, n)
    vs = split_last(v_prev, n)
    ys = split_last(y, n)
    inv_tau = 1.0 / params.tau
    ms = []
    for i in range(n):
        drive = xs[0] if i == 0 else ys[i - 1]
        ms.append(vs[i] + (drive - vs[i]) * inv_tau)
    return ms


def _node_backward_stored(entry: NodeEntry, y_seq, upstream, tape: Tape, ledger):
    if entry.stored is None:
        raise MissingCache(f"{entry.entry_id}: stored-schedule backward needs per-step caches")
    params = entry.params
    T = tape.timesteps
    gv = None
    gx_seq = [None] * T
    for t in reversed(range(T)):
        c = entry.stored[t]
        with _phase(ledger, PHASE_GRAD_FORWARD, entry.entry_id):
            m = c.m if c.m is not None else _rebuild_membranes(c.x, c.v_prev, y_seq[t], params)
            gx_seq[t], gv = node_vjp(upstream[t], gv, y_seq[t], m, params)
    return gx_seq, [c.x for c in entry.stored], 0


def _node_backward_recompute(entry: NodeEntry, y_seq, upstream, tape: Tape, ledger):
    if entry.v_final is None:
        raise MissingCache(f"{entry.entry_id}: reversible backward needs the final potential")
    params = entry.params
    spike = SPIKE_SMOOTH if tape.smooth else SPIKE_HARD
    T = tape.timesteps
    v_cur = entry.v_final
    gv = None
    gx_seq = [None] * T
    x_seq = [None] * T
    for t in reversed(range(T)):
        with _phase(ledger, PHASE_INVERSE, entry.entry_id):
            x_t, v_prev = step_inverse(y_seq[t], v_cur, params, spike=spike)
        with _phase(ledger, PHASE_FORWARD, entry.entry_id):
            out = step_forward(x_t, v_prev, params, with_membranes=True, spike=spike)
        with _phase(ledger, PHASE_GRAD_FORWARD, entry.entry_id):
            gx_seq[t], gv = node_vjp(upstream[t], gv, y_seq[t], out.m, params)
        x_seq[t] = x_t
        v_cur = v_prev
    return gx_seq, x_seq, 2 * T


def _node_backward_inverse_graph(entry: NodeEntry, y_seq, upstream, tape: Tape, ledger):
    if entry.v_final is None:
        raise MissingCache(f"{entry.entry_id}: reversible backward needs the final potential")
    params = entry.params
    spike = SPIKE_SMOOTH if tape.smooth else SPIKE_HARD
    T = tape.timesteps
    v_cur = entry.v_final
    gv = None
    gx_seq = [None] * T
    x_seq = [None] * T
    for t in reversed(range(T)):
        with _phase(ledger, PHASE_INVERSE, entry.entry_id):
            x_t, v_prev, rec = step_inverse(y_seq[t], v_cur, params, spike=spike, record=True)
        with _phase(ledger, PHASE_GRAD_INVERSE, entry.entry_id):
            gx_seq[t], gv = node_vjp(
                upstream[t], gv, y_seq[t], rec.membranes, params, one_minus_y=rec.one_minus_y
            )
        x_seq[t] = x_t
        v_cur = v_prev
    return gx_seq, x_seq, 2 * T


def _lif_backward_stored(entry: LifEntry, upstream, tape: Tape, ledger):
    if entry.stored is None:
        raise MissingCache(f"{entry.entry_id}: LIF backward needs cached membranes")
    T = tape.timesteps
    go_carry = None
    gv_carry = None
    gx_seq = [None] * T
    for t in reversed(range(T)):
        g_o = _acc(upstream[t], go_carry)
        with _phase(ledger, PHASE_GRAD_FORWARD, entry.entry_id):
            a, gv_carry, go_carry = lif_vjp(g_o, gv_carry, entry.stored[t], entry.params)
        gx_seq[t] = a if a is not None else Tensor.zeros(entry.stored[t].shape)
    return gx_seq


def _upstream_per_step(tape: Tape, g_out):
    T = tape.timesteps
    if isinstance(g_out, Tensor):
        if not tape.mean_readout:
            raise ValueError("single-tensor loss gradient needs a mean-readout tape")
        g_t = g_out * (1.0 / T)
        return [g_t] * T
    g_list = list(g_out)
    if len(g_list) != T:
        raise ValueError(f"need {T} per-step upstream gradients, got {len(g_list)}")
    return g_list


def _col_sums(t: Tensor) -> Tensor:
    ones_row = Tensor.ones((1, t.shape[0]))
    summed = matmul(ones_row, t)
    return Tensor._wrap(summed.data.reshape(t.shape[1]))


def _walk(tape: Tape, g_out, node_fn, ledger) -> GradResult:
    T = tape.timesteps
    upstream = _upstream_per_step(tape, g_out)
    y_from_above = None
    input_grads_rev = []
    param_grads = {}
    recovered = 0
    for entry in reversed(tape.entries):
        if isinstance(entry, DenseEntry):
            w_t = transpose2d(entry.weights)
            g_w = None
            g_b = None
            new_up = []
            for t in range(T):
                gz = upstream[t]
                g_w = _acc(g_w, matmul(transpose2d(entry.inputs[t]), gz))
                g_b = _acc(g_b, _col_sums(gz))
                new_up.append(matmul(gz, w_t))
            param_grads[entry.entry_id] = (g_w, g_b)
            input_grads_rev.append(_sum_list(new_up))
            upstream = new_up
            y_from_above = entry.inputs
        elif isinstance(entry, NodeEntry):
            y_seq = entry.y_seq if entry.y_seq is not None else y_from_above
            if y_seq is None:
                raise MissingCache(f"{entry.entry_id}: no output sequence available")
            gx_seq, x_seq, nrec = node_fn(entry, y_seq, upstream, tape, ledger)
            recovered += nrec
            input_grads_rev.append(_sum_list(gx_seq))
            upstream = gx_seq
            y_from_above = x_seq
        elif isinstance(entry, LifEntry):
            gx_seq = _lif_backward_stored(entry, upstream, tape, ledger)
            input_grads_rev.append(_sum_list(gx_seq))
            upstream = gx_seq
            y_from_above = None
        else:
            raise TypeError(f"unknown tape entry {type(entry).__name__}")
    return GradResult(list(reversed(input_grads_rev)), param_grads, recovered)


def backward_stored(tape: Tape, g_out, ledger=None) -> GradResult:
    """Replay gradients from per-timestep caches; no inversion performed."""
    if not tape.strategy.stores_steps:
        raise MissingCache(f"stored backward needs a stored-mode tape, got {tape.strategy.value}")
    return _walk(tape, g_out, _node_backward_stored, ledger)


def backward_recompute(tape: Tape, g_out, ledger=None) -> GradResult:
    """Invert each step, rerun it forward to rebuild intermediates, then
    differentiate on the rebuilt quantities."""
    if tape.strategy is not Strategy.RECOMPUTE:
        raise ValueError(f"recompute backward needs a '{Strategy.RECOMPUTE.value}' tape")
    return _walk(tape, g_out, _node_backward_recompute, ledger)


def backward_inverse_graph(tape: Tape, g_out, ledger=None) -> GradResult:
    """Invert each step and differentiate directly from the quantities the
    inversion produced; no forward rerun."""
    if tape.strategy is not Strategy.INVERSE_GRAPH:
        raise ValueError(f"inverse-graph backward needs a '{Strategy.INVERSE_GRAPH.value}' tape")
    return _walk(tape, g_out, _node_backward_inverse_graph, ledger)


_BACKWARDS = {
    Strategy.LIF_STORED: backward_stored,
    Strategy.STORED: backward_stored,
    Strategy.RECOMPUTE: backward_recompute,
    Strategy.INVERSE_GRAPH: backward_inverse_graph,
}


def run_backward(tape: Tape, g_out, ledger=None) -> GradResult:
    return _BACKWARDS[tape.strategy](tape, g_out, ledger)


def stack_tape(strategy: Strategy, params: NodeParams, caches, y_seq, timesteps: int) -> Tape:
    """Build a tape for a weight-free node stack from its sequence caches.

    `y_seq` is the top node's output sequence; every lower node's outputs are
    recovered (or read from caches) during the backward walk.
    """
    entries = []
    for i, cache in enumerate(caches):
        entries.append(
            NodeEntry(
                entry_id=f"node{i}",
                params=params,
                stored=cache.steps,
                v_final=cache.v_final,
                width=cache.v_final.shape[-1],
            )
        )
    entries[-1].y_seq = list(y_seq)
    return Tape(strategy=strategy, timesteps=timesteps, entries=entries)


def finite_difference(f, x0: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar function, one coordinate at a time."""
    x = np.array(x0, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def _as_array(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def rel_error(a, b, floor: float = 1e-12) -> float:
    """Max-norm relative disagreement, with a floor against zero references."""
    aa, bb = _as_array(a), _as_array(b)
    if aa.shape != bb.shape:
        raise ValueError(f"shapes {aa.shape} and {bb.shape} differ")
    denom = max(float(np.max(np.abs(bb))) if bb.size else 0.0, floor)
    num = float(np.max(np.abs(aa - bb))) if aa.size else 0.0
    return num / denom
