"""Scalar-op and retained-activation accounting.

FlopsLedger counts scalar operations per phase (and per node) by installing
itself as the tensor layer's op sink for the duration of a phase context.
The cost model is one unit per scalar elementwise operation; thresholding
counts as one.  Under that model the two-group node step measures exactly
12 scalar ops per element.

MemoryLedger counts elements retained for the backward pass, per node.
Ledgers are opt-in: nothing is counted unless a phase context is active.

Theoretical per-element costs for the node are kept alongside so reports can
show the measured counters and the reference cost table side by side:
forward 12, inverse 17, gradient on a rebuilt forward graph 15.5, gradient
on the inverse graph 8.5; hence stored backward 15.5, recompute backward
17 + 12 + 15.5 = 44.5, inverse-graph backward 17 + 8.5 = 25.5.
"""

from __future__ import annotations

import csv
import io
import json
from contextlib import contextmanager
from dataclasses import dataclass, field

from . import tensor as _tensor

PHASE_FORWARD = "forward"
PHASE_INVERSE = "inverse"
PHASE_GRAD_FORWARD = "grad_forward_graph"
PHASE_GRAD_INVERSE = "grad_inverse_graph"
PHASES = (PHASE_FORWARD, PHASE_INVERSE, PHASE_GRAD_FORWARD, PHASE_GRAD_INVERSE)

PER_ELEMENT_COSTS = {
    PHASE_FORWARD: 12.0,
    PHASE_INVERSE: 17.0,
    PHASE_GRAD_FORWARD: 15.5,
    PHASE_GRAD_INVERSE: 8.5,
}


class UnknownPhase(KeyError):
    pass


class ModelMismatch(ValueError):
    pass


class FlopsLedger:
    """Per-phase scalar-op counters with an optional per-node breakdown."""

    def __init__(self):
        self.counters = {p: 0 for p in PHASES}
        self.per_node = {}
        self._phase = None
        self._node = None

    def record(self, phase: str, count: int) -> None:
        if phase not in self.counters:
            raise UnknownPhase(phase)
        if count < 0:
            raise ValueError(f"negative op count {count}")
        self.counters[phase] += count
        if self._node is not None:
            node = self.per_node.setdefault(self._node, {p: 0 for p in PHASES})
            node[phase] += count

    def _sink(self, count: int) -> None:
        if self._phase is not None:
            self.record(self._phase, count)

    @contextmanager
    def phase(self, phase: str, node: str | None = None):
        """Attribute all tensor ops inside the context to `phase` (and `node`)."""
        if phase not in self.counters:
            raise UnknownPhase(phase)
        prev_sink = _tensor.set_flop_sink(self._sink)
        prev = (self._phase, self._node)
        self._phase, self._node = phase, node
        try:
            yield self
        finally:
            self._phase, self._node = prev
            _tensor.set_flop_sink(prev_sink)

    def total(self, *phases: str) -> int:
        if not phases:
            phases = PHASES
        for p in phases:
            if p not in self.counters:
                raise UnknownPhase(p)
        return sum(self.counters[p] for p in phases)

    def node_total(self, node: str, *phases: str) -> int:
        entry = self.per_node.get(node, {p: 0 for p in PHASES})
        if not phases:
            phases = PHASES
        for p in phases:
            if p not in entry:
                raise UnknownPhase(p)
        return sum(entry[p] for p in phases)

    def backward_total(self, strategy: str) -> int:
        """Scalar ops a backward pass charged, per schedule convention."""
        if strategy in ("a0", "a1"):
            return self.total(PHASE_GRAD_FORWARD)
        if strategy == "b":
            return self.total(PHASE_INVERSE, PHASE_FORWARD, PHASE_GRAD_FORWARD)
        if strategy == "c":
            return self.total(PHASE_INVERSE, PHASE_GRAD_INVERSE)
        raise ValueError(f"unknown strategy {strategy!r}")

    def reset(self) -> None:
        self.counters = {p: 0 for p in PHASES}
        self.per_node = {}

    def merge(self, other: "FlopsLedger") -> "FlopsLedger":
        out = FlopsLedger()
        for p in PHASES:
            out.counters[p] = self.counters[p] + other.counters[p]
        for src in (self.per_node, other.per_node):
            for node, entry in src.items():
                tgt = out.per_node.setdefault(node, {p: 0 for p in PHASES})
                for p in PHASES:
                    tgt[p] += entry[p]
        return out


@dataclass(frozen=True)
class TheoreticalCosts:
    """Reference scalar-op table for one node over k elements."""

    k: int
    forward: float
    inverse: float
    grad_forward_graph: float
    grad_inverse_graph: float
    stored_backward: float
    recompute_backward: float
    inverse_graph_backward: float


def theoretical_costs(k: int) -> TheoreticalCosts:
    if k <= 0:
        raise ValueError(f"element count must be positive, got {k}")
    fwd = PER_ELEMENT_COSTS[PHASE_FORWARD] * k
    inv = PER_ELEMENT_COSTS[PHASE_INVERSE] * k
    gf = PER_ELEMENT_COSTS[PHASE_GRAD_FORWARD] * k
    gi = PER_ELEMENT_COSTS[PHASE_GRAD_INVERSE] * k
    return TheoreticalCosts(
        k=k,
        forward=fwd,
        inverse=inv,
        grad_forward_graph=gf,
        grad_inverse_graph=gi,
        stored_backward=gf,
        recompute_backward=inv + fwd + gf,
        inverse_graph_backward=inv + gi,
    )


@dataclass(frozen=True)
class NodeCensus:
    node_id: str
    mode: str
    timesteps: int
    per_step_elements: int
    final_elements: int

    @property
    def total_elements(self) -> int:
        return self.per_step_elements * self.timesteps + self.final_elements


@dataclass
class MemoryLedger:
    """Element counts retained per node for the backward pass."""

    mode: str
    timesteps: int
    entries: list = field(default_factory=list)

    @property
    def total_elements(self) -> int:
        return sum(e.total_elements for e in self.entries)


# Stored mode keeps input, membrane and entry potential per timestep.
STORED_TENSORS_PER_STEP = 3

_STORED = "stored"
_REVERSIBLE = "reversible"


def memory_snapshot(model, mode: str, timesteps: int | None = None, batch: int = 1) -> MemoryLedger:
    """Predicted retained-element census for a model's nodes.

    `model` needs `node_widths() -> [(node_id, width)]` and a `timesteps`
    attribute (overridable here).  Stored mode retains three tensors per
    node per timestep; reversible mode retains one final potential per node
    regardless of sequence length.
    """
    if mode not in (_STORED, _REVERSIBLE):
        raise ValueError(f"unknown mode {mode!r}")
    T = timesteps if timesteps is not None else model.timesteps
    ledger = MemoryLedger(mode=mode, timesteps=T)
    for node_id, width in model.node_widths():
        k = width * batch
        if mode == _STORED:
            ledger.entries.append(NodeCensus(node_id, mode, T, STORED_TENSORS_PER_STEP * k, 0))
        else:
            ledger.entries.append(NodeCensus(node_id, mode, T, 0, k))
    return ledger


def reduction_report(stored: MemoryLedger, reversible: MemoryLedger) -> list:
    """Per-node and total element ratios between two censuses of one model."""
    if stored.timesteps != reversible.timesteps:
        raise ModelMismatch(
            f"timesteps differ: {stored.timesteps} vs {reversible.timesteps}"
        )
    if [e.node_id for e in stored.entries] != [e.node_id for e in reversible.entries]:
        raise ModelMismatch("node sets differ between ledgers")
    rows = []
    for s, r in zip(stored.entries, reversible.entries):
        rows.append(
            {
                "node": s.node_id,
                "timesteps": stored.timesteps,
                "stored_elements": s.total_elements,
                "reversible_elements": r.total_elements,
                "ratio": s.total_elements / r.total_elements if r.total_elements else float("inf"),
            }
        )
    st, rt = stored.total_elements, reversible.total_elements
    rows.append(
        {
            "node": "total",
            "timesteps": stored.timesteps,
            "stored_elements": st,
            "reversible_elements": rt,
            "ratio": st / rt if rt else float("inf"),
        }
    )
    return rows


def rows_to_csv(rows) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0].keys()))
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def rows_to_json(rows) -> str:
    return json.dumps(rows, indent=2)
