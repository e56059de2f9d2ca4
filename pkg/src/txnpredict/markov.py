"""Per-procedure transaction models.

Each stored procedure gets an acyclic directed graph over *execution
states*.  A state is one query invocation identified by the query name, how
many times that query ran before it in the same transaction, the partitions
the invocation touches, and the partitions the transaction touched earlier.
Three extra vertices mark the begin, commit, and abort of a transaction.

Building a model has two phases: *construction* replays trace records and
counts vertex hits and edge visits; *processing* turns the counts into edge
probabilities and pre-computes a probability table per vertex (chance of
staying on one partition, chance of aborting, and per-partition read /
write / finish probabilities) so predictions never have to walk the graph.

Frozen models are immutable; runtime observation counters live outside the
model (see :mod:`txnpredict.estimator`) and a shifted workload triggers a
rebuild via :func:`rebuild_with_counts`.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

from .catalog import Catalog
from .trace import COMMITTED, Workload

BEGIN = "begin"
COMMIT = "commit"
ABORT = "abort"
STATE = "state"

# Terminal canonical keys sort ahead of any query name.
_TERMINAL_KEYS = {
    BEGIN: ("\x00begin", 0, (), ()),
    COMMIT: ("\x00commit", 0, (), ()),
    ABORT: ("\x00abort", 0, (), ()),
}


class ModelError(ValueError):
    """Raised for invalid model construction or processing requests."""


@dataclass(frozen=True)
class ExecutionState:
    """Identity of one query invocation within a transaction."""

    query_name: str
    counter: int
    partitions: tuple[int, ...]  # sorted ascending
    previous: tuple[int, ...]  # sorted ascending

    def key(self) -> tuple:
        return (self.query_name, self.counter, self.partitions, self.previous)


def make_state(query_name: str, counter: int, partitions, previous) -> ExecutionState:
    return ExecutionState(query_name, counter, tuple(sorted(partitions)), tuple(sorted(previous)))


@dataclass(frozen=True)
class ProbabilityTable:
    """Pre-computed per-vertex event probabilities.

    ``single_partitioned`` is the probability that every query after this
    state touches only the transaction's base-partition candidate (the
    partition with the highest access count so far, lowest id on ties).
    ``read``/``write``/``finish`` have one entry per partition; a finish
    entry is the probability that the partition is never touched again from
    this state on.  The commit vertex carries finish=1 everywhere and
    abort=0; the abort vertex carries abort=1 and finish=1.
    """

    single_partitioned: float
    abort: float
    read: tuple[float, ...]
    write: tuple[float, ...]
    finish: tuple[float, ...]


@dataclass
class Vertex:
    vid: int
    kind: str  # begin / commit / abort / state
    state: ExecutionState | None = None
    hit_count: int = 0
    table: ProbabilityTable | None = None
    # Cumulative per-partition access counts observed at this vertex during
    # construction (counting the vertex's own access), used to pick the
    # base-partition candidate for the single_partitioned estimate.
    partition_access_counts: dict = field(default_factory=dict)

    @property
    def is_terminal(self) -> bool:
        return self.kind in (COMMIT, ABORT)

    def canonical_key(self) -> tuple:
        if self.kind == STATE:
            return self.state.key()
        return _TERMINAL_KEYS[self.kind]


@dataclass
class Edge:
    src: int
    dst: int
    visit_count: int = 0
    probability: float = 0.0


@dataclass
class MarkovModel:
    procedure: str
    num_partitions: int
    vertices: list = field(default_factory=list)
    out_edges: dict = field(default_factory=dict)  # src vid -> {dst vid: Edge}
    frozen: bool = False
    _by_key: dict = field(default_factory=dict)

    @property
    def begin_vid(self) -> int:
        return 0

    @property
    def commit_vid(self) -> int:
        return 1

    @property
    def abort_vid(self) -> int:
        return 2

    def vertex(self, vid: int) -> Vertex:
        return self.vertices[vid]

    def lookup(self, state: ExecutionState) -> int | None:
        return self._by_key.get(state.key())

    def get_or_create(self, state: ExecutionState) -> int:
        vid = self._by_key.get(state.key())
        if vid is None:
            vid = len(self.vertices)
            self.vertices.append(Vertex(vid, STATE, state))
            self.out_edges[vid] = {}
            self._by_key[state.key()] = vid
        return vid

    def edge(self, src: int, dst: int) -> Edge:
        bucket = self.out_edges[src]
        e = bucket.get(dst)
        if e is None:
            e = Edge(src, dst)
            bucket[dst] = e
        return e

    def successors(self, vid: int) -> list:
        """Outgoing (edge, vertex) pairs in canonical vertex order."""
        pairs = [(e, self.vertices[dst]) for dst, e in self.out_edges[vid].items()]
        pairs.sort(key=lambda p: p[1].canonical_key())
        return pairs

    def num_edges(self) -> int:
        return sum(len(b) for b in self.out_edges.values())

    def state_vertices(self) -> list:
        return [v for v in self.vertices if v.kind == STATE]


def new_model(procedure: str, num_partitions: int) -> MarkovModel:
    """Empty model: the three terminal-ish vertices and no edges."""
    model = MarkovModel(procedure=procedure, num_partitions=num_partitions)
    for kind in (BEGIN, COMMIT, ABORT):
        vid = len(model.vertices)
        model.vertices.append(Vertex(vid, kind))
        model.out_edges[vid] = {}
        model._by_key[_TERMINAL_KEYS[kind]] = vid
    return model


def record_states(record, catalog: Catalog) -> list:
    """Replay a record into its execution-state path (begin/terminals excluded).

    Partition sets come from the catalog's resolution function, so the same
    record yields different states under a different partition count.
    """
    from .catalog import resolve_partitions

    proc = catalog.procedure(record.proc_name)
    counters = defaultdict(int)
    accessed: frozenset = frozenset()
    states = []
    for inv in record.queries:
        q = proc.query(inv.query_name)
        parts = resolve_partitions(catalog, q, list(inv.params))
        state = make_state(inv.query_name, counters[inv.query_name], parts, accessed)
        counters[inv.query_name] += 1
        accessed = accessed | parts
        states.append(state)
    return states


def construct(model: MarkovModel, workload: Workload, catalog: Catalog) -> MarkovModel:
    """Construction phase: add vertices/edges for every record's path and
    bump hit/visit counters.  The model must not be frozen."""
    if model.frozen:
        raise ModelError("cannot construct into a frozen model")
    for record in workload.records:
        if record.proc_name != model.procedure:
            raise ModelError(
                f"record txn {record.txn_id} is for {record.proc_name}, "
                f"model is for {model.procedure}"
            )
        states = record_states(record, catalog)
        prev = model.begin_vid
        model.vertex(prev).hit_count += 1
        counts_so_far = defaultdict(int)
        for state in states:
            vid = model.get_or_create(state)
            v = model.vertex(vid)
            v.hit_count += 1
            for p in state.partitions:
                counts_so_far[p] += 1
            for p, c in counts_so_far.items():
                v.partition_access_counts[p] = v.partition_access_counts.get(p, 0) + c
            model.edge(prev, vid).visit_count += 1
            prev = vid
        term = model.commit_vid if record.outcome == COMMITTED else model.abort_vid
        model.edge(prev, term).visit_count += 1
        model.vertex(term).hit_count += 1
    return model


def _longest_path_order(model: MarkovModel) -> list:
    """Vertex ids ordered by ascending longest path to a terminal.

    Children always precede parents in this order.  Raises on cycles.
    """
    depth: dict[int, int] = {model.commit_vid: 0, model.abort_vid: 0}
    WHITE, GRAY, BLACK = 0, 1, 2
    color = defaultdict(int)
    color[model.commit_vid] = color[model.abort_vid] = BLACK

    def visit(root: int) -> None:
        stack = [(root, iter(list(model.out_edges[root].keys())))]
        color[root] = GRAY
        while stack:
            vid, it = stack[-1]
            advanced = False
            for dst in it:
                if color[dst] == GRAY:
                    raise ModelError(f"cycle detected through vertex {dst}")
                if color[dst] == WHITE:
                    color[dst] = GRAY
                    stack.append((dst, iter(list(model.out_edges[dst].keys()))))
                    advanced = True
                    break
            if not advanced:
                children = model.out_edges[vid]
                if children:
                    depth[vid] = 1 + max(depth[d] for d in children)
                elif vid not in depth:
                    depth[vid] = 0
                color[vid] = BLACK
                stack.pop()

    for v in model.vertices:
        if color[v.vid] == WHITE:
            visit(v.vid)
    order = sorted(model.vertices, key=lambda v: (depth[v.vid], v.canonical_key()))
    return [v.vid for v in order]


def base_candidate(vertex: Vertex) -> int | None:
    """Base-partition candidate: among the partitions this vertex's
    transaction has touched (previous plus its own), the one with the
    highest cumulative access count; lowest id breaks ties."""
    if vertex.kind != STATE:
        return None
    scope = set(vertex.state.previous) | set(vertex.state.partitions)
    return max(scope, key=lambda p: (vertex.partition_access_counts.get(p, 0), -p))


def process(model: MarkovModel, catalog: Catalog) -> MarkovModel:
    """Processing phase: edge probabilities and per-vertex tables.

    Edge probability is visit count over source hit count.  Tables are
    computed children-first (ascending longest path to a terminal): each
    entry is the edge-probability-weighted sum of the children's entries,
    then the vertex's own accesses override read/write to one and finish to
    zero on the partitions its query touches.
    """
    if model.frozen:
        raise ModelError("model already processed")
    P = model.num_partitions
    proc = catalog.procedure(model.procedure)

    for v in model.vertices:
        edges = model.out_edges[v.vid]
        if not edges:
            continue
        if v.hit_count <= 0:
            raise ModelError(f"vertex {v.vid} has edges but no hits")
        for e in edges.values():
            e.probability = e.visit_count / v.hit_count

    order = _longest_path_order(model)

    zeros = (0.0,) * P
    ones = (1.0,) * P
    tables: dict[int, ProbabilityTable] = {
        model.commit_vid: ProbabilityTable(1.0, 0.0, zeros, zeros, ones),
        model.abort_vid: ProbabilityTable(1.0, 1.0, zeros, zeros, ones),
    }

    # only_cache[b][vid] = probability that vid's query and everything after
    # it touch no partition other than b.
    only_cache: dict[int, dict[int, float]] = {}

    def only_for_base(b: int) -> dict[int, float]:
        cached = only_cache.get(b)
        if cached is not None:
            return cached
        only = {model.commit_vid: 1.0, model.abort_vid: 1.0}
        for vid in order:
            v = model.vertex(vid)
            if v.is_terminal:
                continue
            if v.kind == STATE and any(p != b for p in v.state.partitions):
                only[vid] = 0.0
            else:
                only[vid] = sum(
                    e.probability * only[dst] for dst, e in model.out_edges[vid].items()
                )
        only_cache[b] = only
        return only

    for vid in order:
        v = model.vertex(vid)
        if v.is_terminal or v.kind == BEGIN:
            continue
        children = model.out_edges[vid]
        read = [0.0] * P
        write = [0.0] * P
        finish = [0.0] * P
        abort_p = 0.0
        for dst, e in children.items():
            child = tables[dst]
            w = e.probability
            abort_p += w * child.abort
            for p in range(P):
                read[p] += w * child.read[p]
                write[p] += w * child.write[p]
                finish[p] += w * child.finish[p]
        qdef = proc.query(v.state.query_name)
        for p in v.state.partitions:
            if qdef.is_write:
                write[p] = 1.0
            else:
                read[p] = 1.0
            finish[p] = 0.0
        b = base_candidate(v)
        only = only_for_base(b)
        sp = sum(e.probability * only[dst] for dst, e in children.items())
        tables[vid] = ProbabilityTable(sp, abort_p, tuple(read), tuple(write), tuple(finish))

    for vid, table in tables.items():
        model.vertex(vid).table = table
    model.frozen = True
    return model


def build_model(procedure: str, workload: Workload, catalog: Catalog) -> MarkovModel:
    """Construct and process in one call for the given procedure's records."""
    model = new_model(procedure, catalog.num_partitions)
    construct(model, workload.filter_procedure(procedure), catalog)
    return process(model, catalog)


def rebuild_with_counts(
    model: MarkovModel,
    catalog: Catalog,
    vertex_hits: dict,
    edge_visits: dict,
    partition_counts: dict,
) -> MarkovModel:
    """Build a fresh frozen model from cumulative counters.

    ``vertex_hits`` / ``edge_visits`` / ``partition_counts`` are keyed by
    canonical vertex keys and hold counts observed since the model was
    processed; they are added on top of the model's own construction
    counts.  Placeholder states observed only at run time become full
    vertices with tables.
    """
    fresh = new_model(model.procedure, model.num_partitions)

    def key_to_vid(key: tuple) -> int:
        for kind, tkey in _TERMINAL_KEYS.items():
            if key == tkey:
                return {BEGIN: fresh.begin_vid, COMMIT: fresh.commit_vid, ABORT: fresh.abort_vid}[kind]
        state = ExecutionState(key[0], key[1], tuple(key[2]), tuple(key[3]))
        return fresh.get_or_create(state)

    for v in sorted(model.vertices, key=lambda v: v.canonical_key()):
        nv = fresh.vertex(key_to_vid(v.canonical_key()))
        nv.hit_count += v.hit_count
        for p, c in v.partition_access_counts.items():
            nv.partition_access_counts[p] = nv.partition_access_counts.get(p, 0) + c
    for key in sorted(vertex_hits):
        nv = fresh.vertex(key_to_vid(key))
        nv.hit_count += vertex_hits[key]
        for p, c in partition_counts.get(key, {}).items():
            nv.partition_access_counts[p] = nv.partition_access_counts.get(p, 0) + c
    for src_vid, bucket in model.out_edges.items():
        src_key = model.vertex(src_vid).canonical_key()
        for dst_vid, e in bucket.items():
            dst_key = model.vertex(dst_vid).canonical_key()
            fresh.edge(key_to_vid(src_key), key_to_vid(dst_key)).visit_count += e.visit_count
    for (src_key, dst_key) in sorted(edge_visits):
        fresh.edge(key_to_vid(src_key), key_to_vid(dst_key)).visit_count += edge_visits[
            (src_key, dst_key)
        ]
    return process(fresh, catalog)


# ---------------------------------------------------------------------------
# Serialization

def _key_to_json(key: tuple) -> list:
    return [key[0], key[1], list(key[2]), list(key[3])]


def model_to_dict(model: MarkovModel) -> dict:
    vertices = []
    for v in model.vertices:
        entry = {
            "vid": v.vid,
            "kind": v.kind,
            "key": _key_to_json(v.canonical_key()),
            "hit_count": v.hit_count,
            "partition_access_counts": sorted(v.partition_access_counts.items()),
        }
        if v.table is not None:
            entry["table"] = {
                "single_partitioned": v.table.single_partitioned,
                "abort": v.table.abort,
                "read": list(v.table.read),
                "write": list(v.table.write),
                "finish": list(v.table.finish),
            }
        vertices.append(entry)
    edges = []
    for src in sorted(model.out_edges):
        for dst in sorted(model.out_edges[src]):
            e = model.out_edges[src][dst]
            edges.append(
                {"src": src, "dst": dst, "visit_count": e.visit_count, "probability": e.probability}
            )
    return {
        "procedure": model.procedure,
        "num_partitions": model.num_partitions,
        "frozen": model.frozen,
        "vertices": vertices,
        "edges": edges,
    }


def model_from_dict(data: dict) -> MarkovModel:
    model = MarkovModel(procedure=data["procedure"], num_partitions=data["num_partitions"])
    for entry in data["vertices"]:
        kind = entry["kind"]
        key = entry["key"]
        if kind == STATE:
            state = ExecutionState(key[0], key[1], tuple(key[2]), tuple(key[3]))
        else:
            state = None
        v = Vertex(
            vid=entry["vid"],
            kind=kind,
            state=state,
            hit_count=entry["hit_count"],
            partition_access_counts={int(p): int(c) for p, c in entry["partition_access_counts"]},
        )
        table = entry.get("table")
        if table is not None:
            v.table = ProbabilityTable(
                table["single_partitioned"],
                table["abort"],
                tuple(table["read"]),
                tuple(table["write"]),
                tuple(table["finish"]),
            )
        model.vertices.append(v)
        model.out_edges[v.vid] = {}
        model._by_key[v.canonical_key()] = v.vid
    for e in data["edges"]:
        model.out_edges[e["src"]][e["dst"]] = Edge(
            e["src"], e["dst"], e["visit_count"], e["probability"]
        )
    model.frozen = data["frozen"]
    return model
