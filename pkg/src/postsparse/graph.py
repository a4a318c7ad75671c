"""Layer DAGs, forward evaluation and reconstruction-unit partitioning."""

from __future__ import annotations

import copy
import heapq
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from . import tensor as T
from .tensor import GradTape, ShapeError, Tensor

KINDS = ("dense", "conv2d", "batchnorm2d", "relu", "avgpool2d", "residual_add", "flatten")
PRUNABLE = ("dense", "conv2d")
GRAPH_INPUT = "@input"

# parameter names (in serialization order) per kind
PARAM_NAMES = {
    "dense": ("weight", "bias"),
    "conv2d": ("weight", "bias"),
    "batchnorm2d": ("gamma", "beta", "running_mean", "running_var"),
}


class GraphError(ValueError):
    """The graph violates a structural invariant."""


class CycleError(GraphError):
    pass


@dataclass
class LayerNode:
    id: str
    kind: str
    inputs: list[str] = field(default_factory=list)
    params: dict[str, Tensor] = field(default_factory=dict)
    attrs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise GraphError(f"unknown layer kind {self.kind!r}")

    @property
    def prunable(self) -> bool:
        return self.kind in PRUNABLE

    @property
    def weight(self) -> Tensor:
        return self.params["weight"]

    def trainable(self) -> list[Tensor]:
        if self.prunable:
            return [self.params["weight"], self.params["bias"]]
        if self.kind == "batchnorm2d":
            return [self.params["gamma"], self.params["beta"]]
        return []


@dataclass
class ModelGraph:
    nodes: dict[str, LayerNode]
    entry: str
    exit: str
    input_shape: tuple[int, ...]
    name: str = "model"

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)

    def __getitem__(self, node_id: str) -> LayerNode:
        return self.nodes[node_id]

    def consumers(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {k: [] for k in self.nodes}
        for node in self.nodes.values():
            for src in node.inputs:
                out[src].append(node.id)
        return {k: sorted(v) for k, v in out.items()}

    def prunable_ids(self) -> list[str]:
        """Prunable node ids in topological order."""
        return [n for n in topo_order(self) if self.nodes[n].prunable]

    def trainable(self) -> list[Tensor]:
        return [p for n in topo_order(self) for p in self.nodes[n].trainable()]

    def validate(self) -> dict[str, tuple[int, ...]]:
        """Check structural invariants; return per-node per-sample output shapes."""
        if self.entry not in self.nodes or self.exit not in self.nodes:
            raise GraphError("entry/exit node missing")
        for node in self.nodes.values():
            for src in node.inputs:
                if src not in self.nodes:
                    raise GraphError(f"{node.id}: unknown input {src!r}")
            if not node.inputs and node.id != self.entry:
                raise GraphError(f"{node.id}: only the entry node may read the model input")
        if self.nodes[self.entry].inputs:
            raise GraphError("entry node must read the model input")
        order = topo_order(self)
        cons = self.consumers()
        reach = {self.entry}
        for n in order:
            if any(src in reach for src in self.nodes[n].inputs):
                reach.add(n)
        if len(reach) != len(self.nodes):
            raise GraphError(f"unreachable from entry: {sorted(set(self.nodes) - reach)}")
        back = {self.exit}
        for n in reversed(order):
            if any(c in back for c in cons[n]):
                back.add(n)
        if len(back) != len(self.nodes):
            raise GraphError(f"cannot reach exit: {sorted(set(self.nodes) - back)}")
        shapes: dict[str, tuple[int, ...]] = {}
        for n in order:
            node = self.nodes[n]
            ins = [shapes[s] for s in node.inputs] or [self.input_shape]
            shapes[n] = _infer_shape(node, ins)
        return shapes


def _infer_shape(node: LayerNode, ins: list[tuple[int, ...]]) -> tuple[int, ...]:
    kind = node.kind
    if kind != "residual_add" and len(ins) != 1:
        raise GraphError(f"{node.id}: {kind} takes exactly one input")
    x = ins[0]
    p = {k: v.shape for k, v in node.params.items()}
    expect = PARAM_NAMES.get(kind, ())
    if tuple(sorted(p)) != tuple(sorted(expect)):
        raise GraphError(f"{node.id}: expected params {expect}, got {tuple(p)}")
    if kind == "dense":
        if len(x) != 1:
            raise GraphError(f"{node.id}: dense expects a flat input, got {x}")
        out, inn = p["weight"]
        if inn != x[0] or p["bias"] != (out,):
            raise GraphError(f"{node.id}: weight {p['weight']} incompatible with input {x}")
        return (out,)
    if kind == "conv2d":
        if len(x) != 3:
            raise GraphError(f"{node.id}: conv2d expects CHW input, got {x}")
        cout, cin, kh, kw = p["weight"]
        s, pad = node.attrs.get("stride", 1), node.attrs.get("padding", 0)
        if cin != x[0] or p["bias"] != (cout,):
            raise GraphError(f"{node.id}: weight {p['weight']} incompatible with input {x}")
        if kh > x[1] + 2 * pad or kw > x[2] + 2 * pad:
            raise GraphError(f"{node.id}: kernel larger than padded input")
        return (cout, T.conv_output_size(x[1], kh, s, pad), T.conv_output_size(x[2], kw, s, pad))
    if kind == "batchnorm2d":
        if len(x) != 3 or any(s != (x[0],) for s in p.values()):
            raise GraphError(f"{node.id}: batchnorm parameters do not match {x}")
        return x
    if kind == "relu":
        return x
    if kind == "avgpool2d":
        k = node.attrs.get("kernel", 2)
        if len(x) != 3 or x[1] % k or x[2] % k:
            raise GraphError(f"{node.id}: pool window {k} does not tile {x}")
        return (x[0], x[1] // k, x[2] // k)
    if kind == "flatten":
        return (int(np.prod(x)),)
    if kind == "residual_add":
        if len(ins) != 2 or ins[0] != ins[1]:
            raise GraphError(f"{node.id}: residual_add needs two equal-shape inputs, got {ins}")
        return x
    raise GraphError(f"unknown layer kind {kind!r}")


def topo_order(graph: ModelGraph) -> list[str]:
    """Kahn's algorithm; ready nodes are taken in lexicographic id order."""
    indeg = {k: len(set(n.inputs)) for k, n in graph.nodes.items()}
    cons: dict[str, set[str]] = {k: set() for k in graph.nodes}
    for node in graph.nodes.values():
        for src in node.inputs:
            if src not in cons:
                raise GraphError(f"{node.id}: unknown input {src!r}")
            cons[src].add(node.id)
    ready = [k for k, d in indeg.items() if d == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        n = heapq.heappop(ready)
        order.append(n)
        for c in cons[n]:
            indeg[c] -= 1
            if indeg[c] == 0:
                heapq.heappush(ready, c)
    if len(order) != len(graph.nodes):
        raise CycleError(f"cycle among {sorted(k for k, d in indeg.items() if d > 0)}")
    return order


def apply_node(node: LayerNode, xs: list[Tensor], training: bool = False) -> Tensor:
    kind, p, a = node.kind, node.params, node.attrs
    if kind == "dense":
        return T.linear(xs[0], p["weight"], p["bias"])
    if kind == "conv2d":
        return T.conv2d(xs[0], p["weight"], p["bias"], a.get("stride", 1), a.get("padding", 0))
    if kind == "batchnorm2d":
        return T.batchnorm2d(
            xs[0], p["gamma"], p["beta"], p["running_mean"], p["running_var"],
            training=training,
            momentum=a.get("momentum", T.BN_MOMENTUM),
            eps=a.get("eps", T.BN_EPS),
        )
    if kind == "relu":
        return T.relu(xs[0])
    if kind == "avgpool2d":
        return T.avgpool2d(xs[0], a.get("kernel", 2))
    if kind == "flatten":
        return T.flatten(xs[0])
    if kind == "residual_add":
        if xs[0].shape != xs[1].shape:
            raise ShapeError(f"{node.id}: residual operands {xs[0].shape} vs {xs[1].shape}")
        return T.add(xs[0], xs[1])
    raise GraphError(f"unknown layer kind {kind!r}")


def run_nodes(
    graph: ModelGraph,
    order: Iterable[str],
    feeds: dict[str, Tensor],
    training: bool = False,
) -> dict[str, Tensor]:
    """Evaluate ``order`` given upstream activations in ``feeds``.

    ``feeds`` may carry the model input under :data:`GRAPH_INPUT`. Returns the
    activations computed for ``order`` only.
    """
    acts: dict[str, Tensor] = {}
    for n in order:
        node = graph.nodes[n]
        srcs = node.inputs or [GRAPH_INPUT]
        xs = [acts[s] if s in acts else feeds[s] for s in srcs]
        try:
            acts[n] = apply_node(node, xs, training)
        except ShapeError as exc:
            raise ShapeError(f"at node {n!r}: {exc}") from exc
    return acts


def forward(graph: ModelGraph, x, record: bool = False, training: bool = False):
    """Run the whole graph on a batch.

    Returns the activation map (node id -> Tensor). With ``record=True`` the
    pass runs under a fresh :class:`GradTape` watching every trainable
    parameter, and ``(activations, tape)`` is returned.
    """
    x = T.as_tensor(x)
    if tuple(x.shape[1:]) != graph.input_shape:
        raise ShapeError(f"input {x.shape[1:]} does not match declared {graph.input_shape}")
    order = topo_order(graph)
    if not record:
        return run_nodes(graph, order, {GRAPH_INPUT: x}, training)
    with GradTape() as tape:
        tape.watch(*graph.trainable())
        acts = run_nodes(graph, order, {GRAPH_INPUT: x}, training)
    return acts, tape


def predict(graph: ModelGraph, x, batch_size: int = 256) -> np.ndarray:
    """Exit activation for ``x`` in eval mode, computed in batches."""
    x = np.asarray(x, dtype=np.float64)
    order = topo_order(graph)
    outs = []
    for i in range(0, len(x), batch_size):
        acts = run_nodes(graph, order, {GRAPH_INPUT: Tensor(x[i : i + batch_size])})
        outs.append(acts[graph.exit].data)
    return np.concatenate(outs)


def clone(graph: ModelGraph) -> ModelGraph:
    return copy.deepcopy(graph)


def graphs_equal(a: ModelGraph, b: ModelGraph) -> bool:
    if (a.entry, a.exit, a.input_shape) != (b.entry, b.exit, b.input_shape):
        return False
    if list(a.nodes) != list(b.nodes):
        return False
    for k, na in a.nodes.items():
        nb = b.nodes[k]
        if (na.kind, na.inputs, na.attrs) != (nb.kind, nb.inputs, nb.attrs):
            return False
        if set(na.params) != set(nb.params):
            return False
        if any(not np.array_equal(na.params[p].data, nb.params[p].data) for p in na.params):
            return False
    return True


# ---------------------------------------------------------------------------
# Reconstruction units
# ---------------------------------------------------------------------------

GRANULARITIES = ("single", "layer_wise", "block_wise")


@dataclass(frozen=True)
class ReconstructionUnit:
    members: tuple[str, ...]
    inputs: tuple[str, ...]
    output: str

    def prunable(self, graph: ModelGraph) -> list[str]:
        return [m for m in self.members if graph.nodes[m].prunable]


def _make_unit(graph: ModelGraph, members: Iterable[str], order_index: dict[str, int]) -> ReconstructionUnit:
    ms = sorted(set(members), key=order_index.__getitem__)
    inside = set(ms)
    inputs: list[str] = []
    for m in ms:
        for s in graph.nodes[m].inputs or [GRAPH_INPUT]:
            if s not in inside and s not in inputs:
                inputs.append(s)
    return ReconstructionUnit(tuple(ms), tuple(inputs), ms[-1])


def _layer_group(graph: ModelGraph, start: str, cons: dict[str, list[str]]) -> list[str]:
    members = [start]
    cur = start
    for kind in ("batchnorm2d", "relu"):
        nxt = cons[cur]
        if len(nxt) == 1 and graph.nodes[nxt[0]].kind == kind and len(graph.nodes[nxt[0]].inputs) == 1:
            cur = nxt[0]
            members.append(cur)
    return members


def find_residual_blocks(graph: ModelGraph) -> list[tuple[str, str, list[str]]]:
    """Locate (fan_out, residual_add, members) triples structurally.

    A block starts after a node with several consumers and ends at the first
    node where all paths from it reconverge, which must be a residual_add.
    Fan-outs nested inside an already found block are absorbed by it.
    """
    order = topo_order(graph)
    idx = {n: i for i, n in enumerate(order)}
    cons = graph.consumers()
    descendants: dict[str, set[str]] = {}
    for n in reversed(order):
        d = {n}
        for c in cons[n]:
            d |= descendants[c]
        descendants[n] = d
    blocks = []
    claimed: set[str] = set()
    for f in order:
        if len(cons[f]) < 2 or f in claimed:
            continue
        common = set.intersection(*(descendants[c] for c in cons[f]))
        if not common:
            raise GraphError(f"fan-out at {f!r} never reconverges (malformed residual structure)")
        join = min(common, key=idx.__getitem__)
        if graph.nodes[join].kind != "residual_add":
            raise GraphError(
                f"fan-out at {f!r} reconverges at {join!r} ({graph.nodes[join].kind}), "
                "expected residual_add"
            )
        members = [
            n for n in order
            if n != f and n in descendants[f] and join in descendants[n]
        ]
        blocks.append((f, join, members))
        claimed.update(members)
    return blocks


def partition_units(graph: ModelGraph, granularity: str) -> list[ReconstructionUnit]:
    """Split the graph into reconstruction units, ordered topologically by output."""
    granularity = {"layer": "layer_wise", "block": "block_wise"}.get(granularity, granularity)
    if granularity not in GRANULARITIES:
        raise ValueError(f"unknown granularity {granularity!r}")
    order = topo_order(graph)
    idx = {n: i for i, n in enumerate(order)}
    cons = graph.consumers()
    groups: list[list[str]] = []
    covered: set[str] = set()
    if granularity == "block_wise":
        for _, _, members in find_residual_blocks(graph):
            groups.append(members)
            covered.update(members)
    for n in order:
        if not graph.nodes[n].prunable or n in covered:
            continue
        members = [n] if granularity == "single" else _layer_group(graph, n, cons)
        groups.append(members)
        covered.update(members)
    units = [_make_unit(graph, g, idx) for g in groups]
    return sorted(units, key=lambda u: idx[u.output])


def run_unit(
    graph: ModelGraph,
    unit: ReconstructionUnit,
    feeds: dict[str, Tensor],
    training: bool = False,
) -> Tensor:
    return run_nodes(graph, unit.members, feeds, training)[unit.output]


def node_input(graph: ModelGraph, node_id: str, acts: dict[str, Tensor], x: Optional[Tensor] = None) -> Tensor:
    """Activation feeding a single-input node."""
    srcs = graph.nodes[node_id].inputs
    if not srcs:
        if x is None:
            raise GraphError(f"{node_id} reads the model input; pass it explicitly")
        return x
    return acts[srcs[0]]
