"""Radial feeder headroom, operating envelopes and governance gating.

Capacity is the only network constraint: a node's capacity bounds the net
load of its whole subtree. Envelopes give each node the controllable
import that fits under its own line and under every line above it.
"""

from __future__ import annotations

import csv
import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, MissingFile, UnmappedDevice
from .signals import Signal, TimeGrid, Unit, load_price_csv

log = logging.getLogger(__name__)

TOL = 1e-9


class GovernanceMode(str, enum.Enum):
    TOTAL_TSO = "TotalTSO"
    HYBRID_DSO = "HybridDSO"
    TOTAL_DSO = "TotalDSO"


@dataclass(frozen=True)
class Node:
    id: str
    parent: str | None
    capacity: float  # kVA, treated as kW headroom


@dataclass(frozen=True, eq=False)
class FeederModel:
    nodes: tuple[Node, ...]
    device_map: Mapping[str, str]
    baseline: Mapping[str, Signal]  # each node's own (not subtree) load, kW
    grid: TimeGrid

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ValueError("node ids must be unique")
        roots = [n for n in self.nodes if n.parent is None]
        if len(roots) != 1:
            raise ValueError("feeder must have exactly one root")
        known = set(ids)
        for n in self.nodes:
            if not n.capacity > 0:
                raise ValueError(f"node {n.id}: capacity must be > 0")
            if n.parent is not None and n.parent not in known:
                raise ValueError(f"node {n.id}: unknown parent {n.parent}")
        for node in self.device_map.values():
            if node not in known:
                raise ValueError(f"device mapped to unknown node {node}")
        index = {nid: i for i, nid in enumerate(ids)}
        parent = np.array([-1 if n.parent is None else index[n.parent] for n in self.nodes])
        # reject cycles: every node must reach the root
        for i in range(len(ids)):
            seen, j = set(), i
            while j != -1:
                if j in seen:
                    raise ValueError("parent relation contains a cycle")
                seen.add(j)
                j = parent[j]
        base = np.zeros((len(ids), self.grid.steps))
        for nid, sig in self.baseline.items():
            if nid not in index:
                raise ValueError(f"baseline for unknown node {nid}")
            base[index[nid]] = sig.values
        object.__setattr__(self, "_index", index)
        object.__setattr__(self, "_parent", parent)
        object.__setattr__(self, "_own_baseline", base)

    @property
    def ids(self) -> list[str]:
        return [n.id for n in self.nodes]

    @property
    def capacity(self) -> np.ndarray:
        return np.array([n.capacity for n in self.nodes])

    def index(self, node_id: str) -> int:
        return self._index[node_id]

    def path_to_root(self, i: int) -> list[int]:
        out = []
        while i != -1:
            out.append(i)
            i = self._parent[i]
        return out

    def depth(self) -> int:
        return max(len(self.path_to_root(i)) for i in range(len(self.nodes)))

    def postorder(self) -> list[int]:
        """Node indices with every child before its parent."""
        return sorted(range(len(self.nodes)), key=lambda i: -len(self.path_to_root(i)))

    def subtree_sum(self, per_node: np.ndarray) -> np.ndarray:
        """Sum node-level rows over each node's subtree."""
        out = np.array(per_node, dtype=float, copy=True)
        for i in self.postorder():
            p = self._parent[i]
            if p != -1:
                out[p] += out[i]
        return out

    def subtree_baseline(self) -> np.ndarray:
        return self.subtree_sum(self._own_baseline)

    def device_nodes(self, device_ids: Sequence[str]) -> np.ndarray:
        out = np.empty(len(device_ids), dtype=int)
        for k, d in enumerate(device_ids):
            if d not in self.device_map:
                raise UnmappedDevice(d)
            out[k] = self._index[self.device_map[d]]
        return out


@dataclass
class Dispatch:
    """Controlled power (kW) per device and step; rows follow ``ids``."""

    ids: list[str]
    power: np.ndarray

    def __post_init__(self):
        self.ids = list(self.ids)
        self.power = np.atleast_2d(np.asarray(self.power, dtype=float))
        if self.power.shape[0] != len(self.ids):
            raise ValueError("one power row per device id")

    @classmethod
    def from_mapping(cls, dispatch: Mapping[str, object]) -> "Dispatch":
        ids = list(dispatch)
        rows = [np.asarray(getattr(dispatch[d], "values", dispatch[d]), dtype=float) for d in ids]
        return cls(ids, np.vstack(rows) if rows else np.zeros((0, 0)))

    def as_mapping(self) -> dict[str, np.ndarray]:
        return {d: self.power[k].copy() for k, d in enumerate(self.ids)}

    def copy(self) -> "Dispatch":
        return Dispatch(list(self.ids), self.power.copy())


@dataclass(frozen=True)
class OperatingEnvelope:
    node: str
    import_bound: np.ndarray  # kW per step
    export_bound: np.ndarray


@dataclass(frozen=True)
class BaselineOverload:
    node: str
    step: int
    overload: float


@dataclass(frozen=True)
class EnvelopeSet:
    envelopes: dict[str, OperatingEnvelope]
    overloads: list[BaselineOverload] = field(default_factory=list)

    def import_matrix(self, feeder: FeederModel) -> np.ndarray:
        return np.vstack([self.envelopes[nid].import_bound for nid in feeder.ids])

    def __getitem__(self, node_id: str) -> OperatingEnvelope:
        return self.envelopes[node_id]


def compute_envelopes(feeder: FeederModel, margin: float = 0.0) -> EnvelopeSet:
    """Per-node, per-step import/export bounds for controllable load.

    A node's local import headroom is ``(1 - margin) * capacity`` less its
    subtree baseline, floored at zero; the envelope is the smallest local
    headroom on the path from the node up to the root. Export mirrors this
    with the baseline adding to reverse-flow headroom.
    """
    if not 0.0 <= margin < 1.0:
        raise ValueError("margin must lie in [0, 1)")
    cap = (1.0 - margin) * feeder.capacity[:, None]
    sub = feeder.subtree_baseline()
    raw = cap - sub
    overloads = []
    for i, k in zip(*np.nonzero(feeder.capacity[:, None] - sub < -TOL)):
        overloads.append(BaselineOverload(feeder.ids[i], int(k),
                                          float(sub[i, k] - feeder.capacity[i])))
    if overloads:
        log.warning("baseline exceeds capacity at %d node-step(s)", len(overloads))
    local_imp = np.maximum(raw, 0.0)
    local_exp = cap + sub
    imp = np.empty_like(local_imp)
    exp = np.empty_like(local_exp)
    # parents precede children in reverse postorder
    for i in reversed(feeder.postorder()):
        p = feeder._parent[i]
        if p == -1:
            imp[i], exp[i] = local_imp[i], local_exp[i]
        else:
            imp[i] = np.minimum(local_imp[i], imp[p])
            exp[i] = np.minimum(local_exp[i], exp[p])
    envs = {nid: OperatingEnvelope(nid, imp[i], exp[i]) for i, nid in enumerate(feeder.ids)}
    return EnvelopeSet(envs, overloads)


@dataclass(frozen=True)
class Violation:
    node: str
    step: int
    overload: float  # kW above capacity


def _node_load(feeder: FeederModel, dispatch: Dispatch) -> np.ndarray:
    nodes = feeder.device_nodes(dispatch.ids)
    own = np.zeros((len(feeder.nodes), dispatch.power.shape[1]))
    np.add.at(own, nodes, dispatch.power)
    return own


def check_violations(feeder: FeederModel, dispatch: Dispatch | Mapping,
                     step_offset: int = 0) -> list[Violation]:
    """Every (node, step) where subtree baseline plus controlled load exceeds capacity."""
    if not isinstance(dispatch, Dispatch):
        dispatch = Dispatch.from_mapping(dispatch)
    width = dispatch.power.shape[1]
    controlled = feeder.subtree_sum(_node_load(feeder, dispatch))
    base = feeder.subtree_baseline()[:, step_offset:step_offset + width]
    over = base + controlled - feeder.capacity[:, None]
    out = []
    for i, k in zip(*np.nonzero(over > TOL * np.maximum(feeder.capacity[:, None], 1.0))):
        out.append(Violation(feeder.ids[i], int(k) + step_offset, float(over[i, k])))
    return out


def project_dispatch(dispatch: Dispatch | Mapping, envelopes: EnvelopeSet,
                     feeder: FeederModel, step_offset: int = 0) -> Dispatch:
    """Scale device powers pro rata wherever a subtree exceeds its import bound."""
    if not isinstance(dispatch, Dispatch):
        dispatch = Dispatch.from_mapping(dispatch)
    out = dispatch.copy()
    width = out.power.shape[1]
    bounds = envelopes.import_matrix(feeder)[:, step_offset:step_offset + width]
    nodes = feeder.device_nodes(out.ids)
    members = {i: [] for i in range(len(feeder.nodes))}
    for k, n in enumerate(nodes):
        for anc in feeder.path_to_root(int(n)):
            members[anc].append(k)
    order = feeder.postorder()
    for _ in range(feeder.depth() + 1):
        changed = False
        for i in order:
            rows = members[i]
            if not rows:
                continue
            total = out.power[rows].sum(axis=0)
            over = total > bounds[i] * (1 + TOL) + TOL
            if not over.any():
                continue
            scale = np.divide(bounds[i], total, out=np.ones_like(total), where=over)
            out.power[np.ix_(rows, np.arange(width))] *= scale
            changed = True
        if not changed:
            break
    return out


@dataclass
class GateResult:
    dispatch: Dispatch
    violations: list[Violation]
    mode: GovernanceMode


def merit_order_dispatch(requested: Dispatch, envelopes: EnvelopeSet, feeder: FeederModel,
                         costs: Mapping[str, float] | None = None,
                         caps=None, step_offset: int = 0) -> Dispatch:
    """Utility-side dispatch: serve the requested aggregate cheapest device first.

    Each device may take up to its cap (default: what it requested) and no
    node's envelope may be exceeded. Ties in cost go to the lower node id,
    then the lower device id.
    """
    costs = costs or {}
    ids = requested.ids
    width = requested.power.shape[1]
    if caps is None:
        caps = requested.power
    else:
        caps = np.asarray(caps, dtype=float).reshape(len(ids), -1)
        caps = np.broadcast_to(caps, requested.power.shape)
    nodes = feeder.device_nodes(ids)
    paths = [feeder.path_to_root(int(n)) for n in nodes]
    order = sorted(range(len(ids)), key=lambda k: (costs.get(ids[k], 0.0),
                                                     feeder.ids[nodes[k]], ids[k]))
    bounds = envelopes.import_matrix(feeder)[:, step_offset:step_offset + width]
    out = np.zeros_like(requested.power)
    for t in range(width):
        remaining = float(requested.power[:, t].sum())
        head = bounds[:, t].copy()
        for k in order:
            if remaining <= 0:
                break
            room = min(head[j] for j in paths[k])
            give = max(min(caps[k, t], remaining, room), 0.0)
            if give <= 0:
                continue
            out[k, t] = give
            remaining -= give
            for j in paths[k]:
                head[j] -= give
    return Dispatch(list(ids), out)


def gate_dispatch(mode: GovernanceMode | str, dispatch: Dispatch | Mapping,
                  envelopes: EnvelopeSet, feeder: FeederModel,
                  costs: Mapping[str, float] | None = None, caps=None,
                  step_offset: int = 0) -> GateResult:
    """Apply the governance mode's rule for how aggregator dispatch reaches devices."""
    mode = GovernanceMode(mode)
    if not isinstance(dispatch, Dispatch):
        dispatch = Dispatch.from_mapping(dispatch)
    if mode is GovernanceMode.TOTAL_TSO:
        effective = dispatch.copy()
    elif mode is GovernanceMode.HYBRID_DSO:
        effective = project_dispatch(dispatch, envelopes, feeder, step_offset)
    else:
        effective = merit_order_dispatch(dispatch, envelopes, feeder, costs, caps, step_offset)
    return GateResult(effective, check_violations(feeder, effective, step_offset), mode)


# files ----------------------------------------------------------------------

def load_feeder(nodes_csv, grid: TimeGrid, device_map: Mapping[str, str],
                baseline_files: Mapping[str, str] | None = None,
                baseline_kw: Mapping[str, float] | None = None,
                base_dir: Path | None = None) -> FeederModel:
    """Build a feeder from ``node_id,parent_id,capacity_kva`` plus per-node baselines."""
    base_dir = Path(base_dir or ".")
    path = base_dir / nodes_csv
    if not path.is_file():
        raise MissingFile(f"no such file: {path}")
    nodes = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["node_id", "parent_id", "capacity_kva"]:
            raise ConfigError("feeder.nodes", f"{path}: expected header node_id,parent_id,capacity_kva")
        for row in reader:
            parent = row["parent_id"].strip() or None
            nodes.append(Node(row["node_id"].strip(), parent, float(row["capacity_kva"])))
    baseline = {}
    for nid, value in (baseline_kw or {}).items():
        baseline[nid] = Signal(grid, np.full(grid.steps, float(value)), Unit.KW)
    for nid, fname in (baseline_files or {}).items():
        baseline[nid] = load_price_csv(base_dir / fname, grid, Unit.KW)
    return FeederModel(tuple(nodes), dict(device_map), baseline, grid)


def write_violations_csv(violations: Sequence[Violation], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node_id", "step", "overload_kw"])
        for v in violations:
            w.writerow([v.node, v.step, repr(v.overload)])
