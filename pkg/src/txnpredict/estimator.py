"""Prediction core: initial path estimates, optimization selection,
runtime tracking, and model maintenance.

Given a frozen model and a procedure's parameter mapping, a new request is
turned into an *initial path estimate*: starting from begin, successor
states are filtered down to the *valid* ones -- those whose partitions can
be computed from the mapped parameters and match, and whose
previously-accessed set equals what the path accessed so far -- and the
highest-probability valid transition is appended.  When no transition is
valid (unmappable parameters or an unknown branch) the highest-probability
successor is taken outright.

Each chosen edge contributes to a running confidence: a transition that was
the only valid candidate is certain and contributes 1.0; a choice among
several valid candidates, a fallback choice, or a terminal transition
contributes its edge probability.  The default aggregation is the product
of contributions; ``confidence_mode="min"`` keeps the minimum instead.

From the estimate four optimizations are derived: the base partition to run
on, the partition lock set, whether undo logging can be skipped, and the
point after which each partition is finished.  At run time a
:class:`TxnSession` follows the transaction through the model, flags
deviation from the estimate, emits further updates, and feeds observation
counters that drive drift detection and model recomputation.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

from .catalog import Catalog, hash_partition
from .mapping import ParameterMapping, map_partition_value
from .markov import (
    ABORT,
    BEGIN,
    COMMIT,
    STATE,
    MarkovModel,
    make_state,
    rebuild_with_counts,
)
from .trace import COMMITTED, TraceRecord

MAX_PATH_LENGTH = 256


class EstimationError(ValueError):
    """Raised when no estimate can be produced (e.g. an empty model)."""


class PathLengthExceeded(EstimationError):
    """Raised when an estimate exceeds MAX_PATH_LENGTH states; callers
    should treat the transaction as distributed."""


@dataclass
class PathEstimate:
    """Predicted begin-to-terminal vertex sequence.

    ``edge_probabilities[i]`` is the model probability of the transition
    from ``vertices[i]`` to ``vertices[i+1]``; ``edge_confidences`` holds
    the per-transition confidence contributions; ``confidence_prefix[i]``
    aggregates contributions over the transitions entering ``vertices[i]``
    (so index 0 is 1.0 and the sequence never increases).
    """

    vertices: list
    edge_probabilities: list
    edge_confidences: list
    confidence_prefix: list

    def terminal_kind(self, model: MarkovModel) -> str:
        return model.vertex(self.vertices[-1]).kind


@dataclass
class OptimizationPlan:
    base_partition: int
    lock_set: dict  # partition -> confidence at first access
    disable_undo: bool
    abort_probability: float
    finish_points: dict  # partition -> (path index, finish probability)
    threshold_used: float

    @property
    def single_partition(self) -> bool:
        return set(self.lock_set) == {self.base_partition}


def predicted_partitions(
    model: MarkovModel,
    mapping: ParameterMapping,
    catalog: Catalog,
    proc_params,
    query_name: str,
    counter: int,
):
    """Partitions a query invocation will touch, from mapped parameters.

    Returns a sorted tuple, or None when the partition parameter cannot be
    resolved from the procedure inputs.
    """
    proc = catalog.procedure(model.procedure)
    qdef = proc.query(query_name)
    if qdef.is_broadcast:
        return tuple(range(catalog.num_partitions))
    value = map_partition_value(mapping, proc_params, query_name, counter)
    if value is None or not isinstance(value, int) or value < 0:
        return None
    return (hash_partition(value, catalog.num_partitions),)


def estimate_initial_path(
    model: MarkovModel,
    mapping: ParameterMapping,
    proc_params,
    catalog: Catalog,
    confidence_mode: str = "product",
    max_length: int = MAX_PATH_LENGTH,
) -> PathEstimate:
    """Greedy valid-transition walk from begin to a terminal."""
    if not model.frozen:
        raise EstimationError("model must be processed before estimation")
    if not model.out_edges[model.begin_vid]:
        raise EstimationError(f"model for {model.procedure} has no recorded paths")

    vertices = [model.begin_vid]
    probs: list = []
    confs: list = []
    prefix = [1.0]
    accessed: frozenset = frozenset()
    resolution_cache: dict = {}
    current = model.begin_vid
    states_taken = 0

    while True:
        v = model.vertex(current)
        if v.is_terminal:
            break
        if states_taken > max_length:
            raise PathLengthExceeded(
                f"estimate for {model.procedure} exceeded {max_length} states"
            )
        succs = model.successors(current)
        if not succs:
            raise EstimationError(f"vertex {current} has no successors")
        accessed_key = tuple(sorted(accessed))
        valid = []
        terminals = []
        for e, cand in succs:
            if cand.is_terminal:
                terminals.append((e, cand))
                continue
            st = cand.state
            if st.previous != accessed_key:
                continue
            ck = (st.query_name, st.counter)
            if ck not in resolution_cache:
                resolution_cache[ck] = predicted_partitions(
                    model, mapping, catalog, proc_params, st.query_name, st.counter
                )
            parts = resolution_cache[ck]
            if parts is not None and parts == st.partitions:
                valid.append((e, cand))

        if valid:
            pool = valid + terminals
            forced = len(valid) == 1
        else:
            pool = list(succs)
            forced = False
        # highest probability wins; smallest canonical key breaks ties
        pool.sort(key=lambda p: p[1].canonical_key())
        edge, chosen = max(pool, key=lambda p: p[0].probability)
        contribution = 1.0 if (forced and chosen.kind == STATE) else edge.probability
        probs.append(edge.probability)
        confs.append(contribution)
        if confidence_mode == "min":
            prefix.append(min(prefix[-1], contribution))
        else:
            prefix.append(prefix[-1] * contribution)
        vertices.append(chosen.vid)
        if chosen.kind == STATE:
            accessed = accessed | frozenset(chosen.state.partitions)
            states_taken += 1
        current = chosen.vid

    return PathEstimate(vertices, probs, confs, prefix)


def select_optimizations(
    estimate: PathEstimate,
    model: MarkovModel,
    threshold: float,
    abort_cutoff: float | None = None,
) -> OptimizationPlan:
    """Derive the four-optimization plan from an estimate.

    * base partition: most-accessed partition along the estimate (lowest id
      on ties); always a member of the lock set.
    * lock set: partitions whose confidence prefix at their first access
      clears the threshold.  Partitions the estimate never touches have
      confidence 0, so they join only at threshold 0 (lock everything).
    * undo elision: only for single-partition plans whose largest abort
      probability across the visited tables stays within the abort cutoff
      (1 - threshold unless overridden).
    * finish points: first estimate index at which a partition's finish
      probability clears the threshold; the base partition is excluded (it
      is held until commit).
    """
    P = model.num_partitions
    access_counts: dict = defaultdict(int)
    first_access: dict = {}
    for i, vid in enumerate(estimate.vertices):
        v = model.vertex(vid)
        if v.kind != STATE:
            continue
        for p in v.state.partitions:
            access_counts[p] += 1
            if p not in first_access:
                first_access[p] = i
    if not access_counts:
        raise EstimationError("estimate touches no partitions")
    base = max(sorted(access_counts), key=lambda p: (access_counts[p], -p))

    lock_set: dict = {}
    for p in range(P):
        if p in first_access:
            conf = estimate.confidence_prefix[first_access[p]]
        else:
            conf = 0.0
        if p == base or conf >= threshold:
            lock_set[p] = conf

    max_abort = 0.0
    for vid in estimate.vertices:
        table = model.vertex(vid).table
        if table is not None:
            max_abort = max(max_abort, table.abort)
    cutoff = (1.0 - threshold) if abort_cutoff is None else abort_cutoff
    single = set(lock_set) == {base}
    disable_undo = single and max_abort <= cutoff

    finish_points: dict = {}
    for i, vid in enumerate(estimate.vertices):
        table = model.vertex(vid).table
        if table is None:
            continue
        for p in range(P):
            if p == base or p in finish_points:
                continue
            if table.finish[p] >= threshold:
                finish_points[p] = (i, table.finish[p])

    return OptimizationPlan(
        base_partition=base,
        lock_set=lock_set,
        disable_undo=disable_undo,
        abort_probability=max_abort,
        finish_points=finish_points,
        threshold_used=threshold,
    )


# ---------------------------------------------------------------------------
# Runtime tracking


@dataclass
class RuntimeUpdate:
    kind: str  # "disable_undo" | "partition_finished" | "deviation"
    path_index: int  # index of the triggering state in the actual path (0-based)
    partition: int | None = None


class RuntimeCounters:
    """Observation counters for one model, recorded since its last
    recomputation.  Single-writer; complete transaction paths only."""

    def __init__(self):
        self.vertex_hits: dict = defaultdict(int)
        self.edge_visits: dict = defaultdict(int)
        self.partition_counts: dict = defaultdict(lambda: defaultdict(int))
        self.source_observations: dict = defaultdict(int)

    def absorb_path(self, keys: list, partition_count_snapshots: list) -> None:
        for key, snap in zip(keys[1:], partition_count_snapshots):
            self.vertex_hits[key] += 1
            if snap is not None:
                for p, c in snap.items():
                    self.partition_counts[key][p] += c
        for src, dst in zip(keys, keys[1:]):
            self.edge_visits[(src, dst)] += 1
            self.source_observations[src] += 1

    def clear(self) -> None:
        self.vertex_hits.clear()
        self.edge_visits.clear()
        self.partition_counts.clear()
        self.source_observations.clear()


class TxnSession:
    """Tracks one in-flight transaction against its model."""

    def __init__(
        self,
        model: MarkovModel,
        threshold: float,
        estimate: PathEstimate | None = None,
        plan: OptimizationPlan | None = None,
        counters: RuntimeCounters | None = None,
    ):
        self.model = model
        self.threshold = threshold
        self.estimate = estimate
        self.plan = plan
        self.counters = counters
        self.path_keys = [model.vertex(model.begin_vid).canonical_key()]
        self.count_snapshots: list = []
        self.query_counters: dict = defaultdict(int)
        self.accessed: frozenset = frozenset()
        self.counts_so_far: dict = defaultdict(int)
        self.deviated = False
        self.undo_update_emitted = False
        self.finished_partitions: set = set()
        self.saw_placeholder = False
        self.closed = False
        self._state_index = 0

    def track(self, query_name: str, partitions) -> list:
        """Record one executed query invocation; return emitted updates."""
        if self.closed:
            raise EstimationError("session already closed")
        state = make_state(query_name, self.query_counters[query_name], partitions, self.accessed)
        self.query_counters[query_name] += 1
        self.accessed = self.accessed | frozenset(partitions)
        for p in state.partitions:
            self.counts_so_far[p] += 1
        self.path_keys.append(state.key())
        self.count_snapshots.append(dict(self.counts_so_far))
        index = self._state_index
        self._state_index += 1

        updates: list = []
        vid = self.model.lookup(state)
        if self.estimate is not None and not self.deviated:
            expected_vid = None
            if index + 1 < len(self.estimate.vertices):
                expected_vid = self.estimate.vertices[index + 1]
            if vid is None or vid != expected_vid:
                self.deviated = True
                updates.append(RuntimeUpdate("deviation", index))

        if vid is None:
            # Placeholder state: nothing further can be derived until the
            # model is recomputed with these observations.
            self.saw_placeholder = True
            return updates

        table = self.model.vertex(vid).table
        if table.abort == 0.0 and not self.undo_update_emitted:
            self.undo_update_emitted = True
            updates.append(RuntimeUpdate("disable_undo", index))
        base = self.plan.base_partition if self.plan is not None else None
        for p in range(self.model.num_partitions):
            if p == base or p in self.finished_partitions:
                continue
            if table.finish[p] >= self.threshold:
                self.finished_partitions.add(p)
                updates.append(RuntimeUpdate("partition_finished", index, partition=p))
        return updates

    def finish(self, outcome: str) -> None:
        """Close the session with the transaction outcome and flush the
        observed path into the model's runtime counters."""
        if self.closed:
            raise EstimationError("session already closed")
        terminal = self.model.commit_vid if outcome == COMMITTED else self.model.abort_vid
        self.path_keys.append(self.model.vertex(terminal).canonical_key())
        self.count_snapshots.append(None)
        self.closed = True
        if self.counters is not None:
            self.counters.absorb_path(self.path_keys, self.count_snapshots)


def track_execution(session: TxnSession, query_name: str, partitions) -> list:
    return session.track(query_name, partitions)


@dataclass
class DriftResult:
    in_sync: bool
    recompute_triggered: bool
    model: MarkovModel
    drifted_vertices: list = field(default_factory=list)


def check_drift(
    model: MarkovModel,
    counters: RuntimeCounters,
    catalog: Catalog,
    min_observations: int = 20,
    l1_threshold: float = 0.5,
) -> DriftResult:
    """Compare observed transition frequencies against the stored edge
    probabilities; on divergence, recompute the whole model from cumulative
    counters and reset the observation window.

    A vertex only participates once it has ``min_observations`` outgoing
    observations in the window.  Divergence means the L1 distance between
    its observed frequencies and stored probabilities exceeds
    ``l1_threshold``.
    """
    drifted = []
    for src_key, n in counters.source_observations.items():
        if n < min_observations:
            continue
        vid = model._by_key.get(src_key)
        if vid is None:
            continue  # placeholder source: no stored distribution to compare
        stored = {
            model.vertex(dst).canonical_key(): e.probability
            for dst, e in model.out_edges[vid].items()
        }
        observed: dict = {}
        for (s, d), c in counters.edge_visits.items():
            if s == src_key:
                observed[d] = c / n
        l1 = 0.0
        for dst_key in set(stored) | set(observed):
            l1 += abs(observed.get(dst_key, 0.0) - stored.get(dst_key, 0.0))
        if l1 > l1_threshold:
            drifted.append(src_key)
    if not drifted:
        return DriftResult(in_sync=True, recompute_triggered=False, model=model)
    new_model = rebuild_with_counts(
        model,
        catalog,
        dict(counters.vertex_hits),
        dict(counters.edge_visits),
        {k: dict(v) for k, v in counters.partition_counts.items()},
    )
    counters.clear()
    return DriftResult(
        in_sync=False, recompute_triggered=True, model=new_model, drifted_vertices=drifted
    )


# ---------------------------------------------------------------------------
# Replay helpers shared by evaluation, cost scoring, and tests


def actual_state_keys(record: TraceRecord, catalog: Catalog) -> list:
    """Canonical state keys of the record's true path (terminals excluded)."""
    from .markov import record_states

    return [s.key() for s in record_states(record, catalog)]


def estimate_state_keys(estimate: PathEstimate, model: MarkovModel) -> list:
    keys = []
    for vid in estimate.vertices:
        v = model.vertex(vid)
        if v.kind == STATE:
            keys.append(v.state.key())
    return keys


def path_exact(estimate: PathEstimate, model: MarkovModel, record: TraceRecord, catalog: Catalog) -> bool:
    """True when the estimated state sequence and terminal both match the
    record's actual execution."""
    if estimate_state_keys(estimate, model) != actual_state_keys(record, catalog):
        return False
    terminal = COMMIT if record.outcome == COMMITTED else ABORT
    return estimate.terminal_kind(model) == terminal


def first_divergence(
    estimate: PathEstimate, model: MarkovModel, record: TraceRecord, catalog: Catalog
):
    """First index where the estimate and the actual path disagree.

    Returns ``(index, estimated_key_or_None, actual_key_or_None)`` or None
    when the paths agree exactly (including the terminal).
    """
    est = estimate_state_keys(estimate, model)
    act = actual_state_keys(record, catalog)
    for i in range(max(len(est), len(act))):
        e = est[i] if i < len(est) else None
        a = act[i] if i < len(act) else None
        if e != a:
            return (i, e, a)
    terminal = COMMIT if record.outcome == COMMITTED else ABORT
    if estimate.terminal_kind(model) != terminal:
        return (len(act), estimate.terminal_kind(model), terminal)
    return None
