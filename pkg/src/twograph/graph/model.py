"""Node, graph and protocol types, topological ordering and validation."""

import heapq
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np

from ..errors import ShapeError, ValidationError
from ..operators import get_kernel

# query-graph node kinds
PLAYER = "player"
NATURE = "nature"
NOISE = "noise"
OPERATOR = "operator"
CONSTANT = "constant"
CLONE = "clone"
QUERY_KINDS = (PLAYER, NATURE, NOISE, OPERATOR, CONSTANT, CLONE)
SOURCE_KINDS = (PLAYER, NATURE, NOISE, CONSTANT, CLONE)

# response-graph node kinds
READ = "read"
ORACLE = "oracle"
CHAIN = "chain"
SUM = "sum"
NEG = "neg"
ZERO = "zero"
RESPONSE_KINDS = (CONSTANT, READ, ORACLE, CHAIN, SUM, NEG, ZERO, OPERATOR)

LINEARIZATION = "linearization"  # shape marker carried by oracle nodes


def ref(node: str, port: int = 0) -> tuple:
    return (node, port)


@dataclass(frozen=True)
class Node:
    """One vertex. ``inputs`` are ``(node_id, port)`` references in slot order.

    Source nodes declare their output shape in ``attrs['shape']`` (a nature
    node instead lists ``attrs['ports']`` as ``[(name, shape), ...]``).
    """

    id: str
    kind: str
    kernel: str | None = None
    inputs: tuple = ()
    attrs: dict = field(default_factory=dict)
    value: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(tuple(r) for r in self.inputs))

    @property
    def n_outputs(self) -> int:
        if self.kind == NATURE:
            return len(self.attrs["ports"])
        if self.kind == CHAIN:
            return len(self.attrs["wrt"])
        return -1  # operator: known from the kernel's shape function

    def port_index(self, name: str) -> int:
        names = [p[0] for p in self.attrs.get("ports", ())]
        return names.index(name)


def _index(nodes):
    return {n.id: n for n in nodes}


def topological_order(nodes, extra_deps=None) -> list:
    """Kahn's algorithm; ties broken by declaration order so the result is stable.

    Raises ValueError naming the nodes on a cycle.
    """
    ids = [n.id for n in nodes]
    pos = {i: k for k, i in enumerate(ids)}
    deps = {n.id: {r[0] for r in n.inputs if r[0] in pos} for n in nodes}
    for k, extra in (extra_deps or {}).items():
        deps[k] |= {e for e in extra if e in pos}
    users = {i: [] for i in ids}
    for i, ds in deps.items():
        for d in ds:
            users[d].append(i)
    indeg = {i: len(ds) for i, ds in deps.items()}
    ready = sorted((pos[i] for i in ids if indeg[i] == 0))
    order = []
    heapq.heapify(ready)
    while ready:
        i = ids[heapq.heappop(ready)]
        order.append(i)
        for u in users[i]:
            indeg[u] -= 1
            if indeg[u] == 0:
                heapq.heappush(ready, pos[u])
    if len(order) != len(ids):
        stuck = [i for i in ids if indeg[i] > 0]
        raise ValueError(f"cycle through nodes {stuck}")
    return order


@dataclass(frozen=True, eq=False)
class QueryGraph:
    nodes: tuple
    objective: tuple
    monitors: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "objective", tuple(self.objective))

    @cached_property
    def by_id(self) -> dict:
        return _index(self.nodes)

    def node(self, node_id: str) -> Node:
        return self.by_id[node_id]

    @cached_property
    def order(self) -> list:
        return topological_order(self.nodes)

    def of_kind(self, kind: str) -> list:
        return [n for n in self.nodes if n.kind == kind]

    @property
    def player_ids(self) -> list:
        return [n.id for n in self.of_kind(PLAYER)]

    def ancestors(self, node_id: str) -> set:
        seen, stack = set(), [node_id]
        while stack:
            for src, _ in self.by_id[stack.pop()].inputs:
                if src not in seen:
                    seen.add(src)
                    stack.append(src)
        return seen

    def descendants(self, node_ids) -> set:
        users = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            for src, _ in n.inputs:
                users[src].append(n.id)
        seen, stack = set(), list(node_ids)
        while stack:
            for u in users[stack.pop()]:
                if u not in seen:
                    seen.add(u)
                    stack.append(u)
        return seen


@dataclass(frozen=True, eq=False)
class ResponseGraph:
    nodes: tuple
    outputs: dict

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "outputs", {k: tuple(v) for k, v in self.outputs.items()})

    @cached_property
    def by_id(self) -> dict:
        return _index(self.nodes)

    def node(self, node_id: str) -> Node:
        return self.by_id[node_id]

    @cached_property
    def order(self) -> list:
        return topological_order(self.nodes)

    def of_kind(self, kind: str) -> list:
        return [n for n in self.nodes if n.kind == kind]

    def oracle_targets(self) -> list:
        return [n.attrs["target"] for n in self.of_kind(ORACLE)]

    def with_changes(self, add=(), outputs=None) -> "ResponseGraph":
        new_outputs = dict(self.outputs)
        new_outputs.update(outputs or {})
        return ResponseGraph(tuple(self.nodes) + tuple(add), new_outputs)


@dataclass(frozen=True)
class PlayerSpec:
    """A player's parameter block and how it moves.

    ``maximize`` players step along +delta. ``objective_sign`` says how the
    delivered response relates to the shared objective (+1: it is the
    gradient, -1: the negated gradient); the gradient checker uses it.
    ``init(rng)`` draws initial parameters.
    """

    name: str
    shape: tuple
    init: Callable | None = None
    maximize: bool = False
    objective_sign: float = 1.0
    exact: bool = True


@dataclass(frozen=True, eq=False)
class Protocol:
    name: str
    query: QueryGraph
    response: ResponseGraph
    players: tuple
    batch_size: int = 32
    clone_period: int = 100
    meta: dict = field(default_factory=dict)

    @cached_property
    def report(self) -> "ValidationReport":
        return validate(self)

    def require_valid(self) -> "Protocol":
        if not self.report.ok:
            raise ValidationError(self.report)
        return self

    def player(self, name: str) -> PlayerSpec:
        for p in self.players:
            if p.name == name:
                return p
        raise KeyError(f"no player {name!r}")

    @property
    def player_names(self) -> list:
        return [p.name for p in self.players]


@dataclass
class Trace:
    """Outputs of one query sweep plus the samples that produced them."""

    values: dict
    samples: dict = field(default_factory=dict)

    def __getitem__(self, key):
        if isinstance(key, tuple):
            node, port = key
            return self.values[node][port]
        return self.values[key][0]

    def __contains__(self, node_id):
        return node_id in self.values

    def objective(self, protocol) -> float:
        return float(self[protocol.query.objective])


# --------------------------------------------------------------------------
# validation


@dataclass
class ValidationReport:
    diagnostics: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.diagnostics

    def add(self, kind: str, message: str):
        self.diagnostics.append((kind, message))

    def kinds(self) -> set:
        return {k for k, _ in self.diagnostics}

    def to_dict(self) -> dict:
        return {"ok": self.ok, "diagnostics": [{"kind": k, "message": m} for k, m in self.diagnostics]}

    def __str__(self):
        if self.ok:
            return "PASS"
        return "FAIL\n" + "\n".join(f"  [{k}] {m}" for k, m in self.diagnostics)


def _check_structure(nodes, report, graph_name, allowed_kinds):
    counts = Counter(n.id for n in nodes)
    for node_id, c in counts.items():
        if c > 1:
            report.add("duplicate", f"{graph_name}: node id {node_id!r} declared {c} times")
    ids = set(counts)
    ok = True
    for n in nodes:
        if n.kind not in allowed_kinds:
            report.add("kind", f"{graph_name}: node {n.id!r} has unknown kind {n.kind!r}")
            ok = False
        for src, port in n.inputs:
            if src not in ids:
                report.add("dangling", f"{graph_name}: node {n.id!r} reads missing node {src!r}")
                ok = False
    if len(ids) != len(nodes):
        # ordering is undefined until ids are unique
        return False
    try:
        topological_order(nodes)
    except ValueError as exc:
        report.add("cycle", f"{graph_name}: {exc}")
        ok = False
    return ok


def _kernel_outputs(spec, attrs, in_shapes):
    shapes = spec.shape(attrs, *in_shapes)
    return tuple(tuple(s) for s in shapes)


def infer_query_shapes(query: QueryGraph) -> dict:
    """Output shapes of every query node; raises ShapeError/KeyError on failure."""
    shapes = {}
    for node_id in query.order:
        n = query.node(node_id)
        if n.kind == NATURE:
            shapes[node_id] = tuple(tuple(s) for _, s in n.attrs["ports"])
        elif n.kind == CONSTANT:
            shapes[node_id] = (np.shape(n.value),)
        elif n.kind in (PLAYER, NOISE, CLONE):
            shapes[node_id] = (tuple(n.attrs["shape"]),)
        else:
            spec = get_kernel(n.kernel)
            if len(n.inputs) != spec.arity:
                raise ShapeError(f"operator {node_id!r}: kernel {n.kernel!r} takes {spec.arity} inputs, got {len(n.inputs)}")
            ins = []
            for src, port in n.inputs:
                if port >= len(shapes[src]):
                    raise ShapeError(f"operator {node_id!r} reads port {port} of {src!r}, which has {len(shapes[src])}")
                ins.append(shapes[src][port])
            try:
                shapes[node_id] = _kernel_outputs(spec, n.attrs, ins)
            except ShapeError as exc:
                raise ShapeError(f"operator {node_id!r} ({n.kernel}): {exc}") from None
    return shapes


def infer_response_shapes(response: ResponseGraph, query: QueryGraph, qshapes: dict) -> dict:
    shapes = {}
    for node_id in response.order:
        n = response.node(node_id)
        ins = [shapes[s][p] for s, p in n.inputs]
        if n.kind == CONSTANT:
            shapes[node_id] = (np.shape(n.value),)
        elif n.kind in (READ, ZERO):
            src, port = n.attrs["target"]
            shapes[node_id] = (qshapes[src][port],)
        elif n.kind == ORACLE:
            shapes[node_id] = (LINEARIZATION,)
        elif n.kind == CHAIN:
            if not n.inputs or ins[0] != LINEARIZATION:
                raise ShapeError(f"chain {node_id!r}: first input must be an oracle")
            target = response.node(n.inputs[0][0]).attrs["target"]
            tnode = query.node(target)
            ports = n.attrs["ports"]
            if len(ports) != len(ins) - 1:
                raise ShapeError(f"chain {node_id!r}: {len(ports)} ports but {len(ins) - 1} deltas")
            for p, s in zip(ports, ins[1:]):
                want = qshapes[target][p]
                if s != want:
                    raise ShapeError(f"chain {node_id!r}: delta for port {p} has shape {s}, operator output is {want}")
            shapes[node_id] = tuple(qshapes[tnode.inputs[k][0]][tnode.inputs[k][1]] for k in n.attrs["wrt"])
        elif n.kind == SUM:
            if not ins or any(s != ins[0] for s in ins):
                raise ShapeError(f"sum {node_id!r}: shapes differ {ins}")
            shapes[node_id] = (ins[0],)
        elif n.kind == NEG:
            shapes[node_id] = (ins[0],)
        elif n.kind == OPERATOR:
            spec = get_kernel(n.kernel)
            if len(ins) != spec.arity:
                raise ShapeError(f"operator {node_id!r}: kernel {n.kernel!r} takes {spec.arity} inputs, got {len(ins)}")
            shapes[node_id] = _kernel_outputs(spec, n.attrs, ins)
    return shapes


def validate(protocol: Protocol) -> ValidationReport:
    """Check both graphs and the player bindings; never raises."""
    report = ValidationReport()
    q, r = protocol.query, protocol.response
    q_ok = _check_structure(q.nodes, report, "query", QUERY_KINDS)
    r_ok = _check_structure(r.nodes, report, "response", RESPONSE_KINDS)

    if q_ok:
        for n in q.nodes:
            if n.kind in SOURCE_KINDS and n.inputs:
                report.add("structure", f"query: input node {n.id!r} must have no parents")
            if n.kind == CLONE and n.attrs.get("source") not in q.player_ids:
                report.add("dangling", f"query: clone {n.id!r} copies unknown player {n.attrs.get('source')!r}")
        if not q.of_kind(PLAYER):
            report.add("structure", "query: no player inputs")

    query_ids = {n.id for n in q.nodes}
    for n in r.nodes:
        if n.kind == ORACLE:
            t = n.attrs.get("target")
            if t not in query_ids or q.node(t).kind != OPERATOR:
                report.add("dangling", f"response: oracle {n.id!r} references missing query operator {t!r}")
                r_ok = False
        if n.kind in (READ, ZERO):
            t = tuple(n.attrs.get("target", ("?", 0)))
            if t[0] not in query_ids:
                report.add("dangling", f"response: {n.id!r} reads missing query node {t[0]!r}")
                r_ok = False

    player_names = [p.name for p in protocol.players]
    if sorted(player_names) != sorted(q.player_ids):
        report.add("binding", f"players {player_names} do not match query player inputs {q.player_ids}")
    for name in q.player_ids:
        if name not in r.outputs:
            report.add("unbound", f"player {name!r} has no response output")
    for name, (src, _) in r.outputs.items():
        if name not in q.player_ids:
            report.add("unbound", f"response output for unknown player {name!r}")
        if src not in r.by_id:
            report.add("dangling", f"response output for {name!r} reads missing node {src!r}")
            r_ok = False

    qshapes = None
    if q_ok:
        try:
            qshapes = infer_query_shapes(q)
        except (ShapeError, KeyError, ValueError) as exc:
            report.add("shape", f"query: {exc}")
    if qshapes is not None:
        obj, port = q.objective
        if obj not in qshapes:
            report.add("objective", f"objective node {obj!r} does not exist")
        elif qshapes[obj][port] != ():
            report.add("objective", f"objective {obj!r} must be a scalar, has shape {qshapes[obj][port]}")
        for p in protocol.players:
            if p.name in q.by_id and tuple(q.node(p.name).attrs["shape"]) != tuple(p.shape):
                report.add("binding", f"player {p.name!r}: spec shape {p.shape} vs node shape {q.node(p.name).attrs['shape']}")
    if qshapes is not None and r_ok:
        try:
            rshapes = infer_response_shapes(r, q, qshapes)
        except (ShapeError, KeyError, ValueError, IndexError) as exc:
            report.add("shape", f"response: {exc}")
        else:
            for name, (src, port) in r.outputs.items():
                if name in q.by_id:
                    want = tuple(q.node(name).attrs["shape"])
                    if rshapes[src][port] != want:
                        report.add("shape", f"response for {name!r} has shape {rshapes[src][port]}, parameters are {want}")
    return report


def structural_diff(a: ResponseGraph, b: ResponseGraph) -> dict:
    """Node-level difference between two response graphs (b relative to a)."""
    ai, bi = a.by_id, b.by_id

    def key(n):
        return (n.kind, n.kernel, n.inputs, repr(sorted(n.attrs.items())))

    return {
        "added": sorted(set(bi) - set(ai)),
        "removed": sorted(set(ai) - set(bi)),
        "changed": sorted(k for k in set(ai) & set(bi) if key(ai[k]) != key(bi[k])),
        "rewired_outputs": sorted(k for k in set(a.outputs) | set(b.outputs) if a.outputs.get(k) != b.outputs.get(k)),
    }
