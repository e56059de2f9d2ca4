"""Deterministic discrete-event simulator of a partition-per-engine cluster.

Every partition is a single-threaded engine guarded by a coarse partition
lock.  A transaction enqueues a lock request at each partition in its
(strategy-chosen) lock set; requests are granted FIFO and the transaction
starts once it holds every lock.  Single-partition transactions commit
without coordination; multi-partition transactions pay a two-phase-commit
round trip at the end and hold their partitions through it.  Undo logging
adds cost per write unless a strategy elides it, and accessing a partition
outside the lock set aborts the transaction, which restarts with a wider
lock set.

When a distributed transaction is predicted finished with a partition, the
prepare message rides on its last use there (early prepare) and the
partition is released for queued work immediately.  Transactions granted a
partition between the prepare and the preparer's commit run speculatively:
they execute normally, but if they touched any table the preparer wrote,
their own commit waits for the preparer's.  If the preparer aborts instead
(a mispredicted finish, or a user abort after the prepare), every
speculative transaction that has not yet committed aborts and restarts,
and so does the preparer.

A transaction that aborts after performing writes with undo logging
disabled would leave the engine unrecoverable: the run is marked FAILED and
stops.

Simulated time is abstract integer units.  Identical (config, workload,
strategy, seed) always produce identical results.
"""

from __future__ import annotations

import heapq
import random
from collections import defaultdict, deque
from dataclasses import dataclass, field

from .bundles import ModelBundle
from .catalog import Catalog
from .estimator import (
    EstimationError,
    TxnSession,
    estimate_initial_path,
    select_optimizations,
)
from .markov import record_states
from .trace import ABORTED, COMMITTED, Workload

ORACLE = "oracle"
HOUDINI_PARTITIONED = "houdini_partitioned"
HOUDINI_GLOBAL = "houdini_global"
DB2_REDIRECT = "db2_redirect"
ASSUME_SINGLE = "assume_single"
ASSUME_DISTRIBUTED = "assume_distributed"
STRATEGIES = (
    ORACLE,
    HOUDINI_PARTITIONED,
    HOUDINI_GLOBAL,
    DB2_REDIRECT,
    ASSUME_SINGLE,
    ASSUME_DISTRIBUTED,
)


class SimError(ValueError):
    pass


@dataclass(frozen=True)
class CostModel:
    local_query: int = 1
    remote_round_trip: int = 10
    two_pc_round: int = 10
    undo_log_per_write: int = 1
    restart_penalty: int = 5
    base_dispatch: int = 1

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value <= 0:
                raise SimError(f"cost {name} must be positive, got {value}")


@dataclass(frozen=True)
class SimConfig:
    num_partitions: int
    duration: int = 10_000
    partitions_per_node: int = 2
    clients_per_partition: int = 4
    cost: CostModel = field(default_factory=CostModel)
    warmup_fraction: float = 0.1
    seed: int = 0
    threshold: float = 0.5
    abort_cutoff: float | None = None  # overrides the undo-elision caution check
    confidence_mode: str = "product"

    def __post_init__(self):
        if self.num_partitions < 1:
            raise SimError("need at least one partition")
        if self.num_partitions % self.partitions_per_node != 0:
            raise SimError("num_partitions must be a multiple of partitions_per_node")
        if not (0.0 <= self.warmup_fraction < 1.0):
            raise SimError("warmup_fraction must be in [0, 1)")

    @property
    def warmup_end(self) -> int:
        return int(self.duration * self.warmup_fraction)


@dataclass(frozen=True)
class Step:
    partitions: frozenset
    is_write: bool
    table: str


@dataclass
class AttemptPlan:
    base: int
    locks: frozenset
    undo_off_from: int | None = None  # step index from which writes go unlogged
    finish_after: dict = field(default_factory=dict)  # partition -> step idx
    conservative: bool = False  # restart plans never early-prepare or elide undo


class Txn:
    __slots__ = (
        "tid", "record", "steps", "written_tables", "accessed_tables", "accessed",
        "access_counts", "outcome", "arrival", "plan", "first_plan", "attempt",
        "epoch", "granted", "prepared", "speculative", "done", "restarts",
        "sched_end",
    )

    def __init__(self, tid, record, steps, arrival):
        self.tid = tid
        self.record = record
        self.steps = steps
        self.written_tables = frozenset(s.table for s in steps if s.is_write)
        self.accessed_tables = frozenset(s.table for s in steps)
        self.access_counts = defaultdict(int)
        for s in steps:
            for p in s.partitions:
                self.access_counts[p] += 1
        self.accessed = frozenset(self.access_counts)
        self.outcome = record.outcome
        self.arrival = arrival
        self.plan = None
        self.first_plan = None
        self.attempt = 0
        self.epoch = 0
        self.granted = set()
        self.prepared = set()
        self.speculative = False
        self.done = False
        self.restarts = 0
        self.sched_end = None  # (time, kind) planned at start

    def best_bases(self) -> set:
        if not self.access_counts:
            return {0}
        top = max(self.access_counts.values())
        return {p for p, c in self.access_counts.items() if c == top}


@dataclass
class SimResult:
    strategy: str
    num_partitions: int
    threshold: float
    seed: int
    duration: int
    warmup_end: int
    committed: int = 0
    committed_measured: int = 0
    aborted_user: int = 0
    restarts: int = 0
    spawned: int = 0
    failed: bool = False
    undo_disabled: int = 0  # transactions whose plan elided undo from the start
    runtime_undo_disabled: int = 0  # undo dropped mid-execution
    speculative_commits: int = 0
    initial_full_lock: int = 0
    op1_correct: int = 0
    op2_correct: int = 0
    events: int = 0

    @property
    def throughput(self) -> float:
        window = self.duration - self.warmup_end
        return 1000.0 * self.committed_measured / window if window > 0 else 0.0

    @property
    def in_flight(self) -> int:
        return self.spawned - self.committed - self.aborted_user

    @property
    def op1_rate(self) -> float:
        return self.op1_correct / self.spawned if self.spawned else 0.0

    @property
    def op2_rate(self) -> float:
        return self.op2_correct / self.spawned if self.spawned else 0.0

    @property
    def op4_rate(self) -> float:
        return self.speculative_commits / self.committed if self.committed else 0.0

    @property
    def full_lock_fraction(self) -> float:
        return self.initial_full_lock / self.spawned if self.spawned else 0.0


class _Partition:
    __slots__ = ("queue", "owner", "pending", "pending_epoch", "dependents")

    def __init__(self):
        self.queue = deque()  # (txn, epoch)
        self.owner = None
        self.pending = None  # preparer awaiting its two-phase commit
        self.pending_epoch = 0
        self.dependents = []  # txns granted while pending


# ---------------------------------------------------------------------------
# Strategy planning


class _Planner:
    """Chooses the base partition, lock set, undo elision, and early-prepare
    points for each attempt of each transaction under one strategy."""

    def __init__(self, strategy, config: SimConfig, catalog: Catalog, bundle, rng):
        self.strategy = strategy
        self.config = config
        self.catalog = catalog
        self.bundle = bundle
        self.rng = rng
        self.all_parts = frozenset(range(config.num_partitions))
        if strategy in (HOUDINI_GLOBAL, HOUDINI_PARTITIONED) and bundle is None:
            raise SimError(f"strategy {strategy} requires a model bundle")

    def _distributed_plan(self, txn) -> AttemptPlan:
        return AttemptPlan(base=txn.arrival, locks=self.all_parts, conservative=True)

    def initial_plan(self, txn) -> AttemptPlan:
        s = self.strategy
        if s == ASSUME_DISTRIBUTED:
            return AttemptPlan(base=txn.arrival, locks=self.all_parts)
        if s in (ASSUME_SINGLE, DB2_REDIRECT):
            return AttemptPlan(base=txn.arrival, locks=frozenset((txn.arrival,)))
        if s == ORACLE:
            base = min(txn.best_bases())
            locks = txn.accessed or frozenset((txn.arrival,))
            plan = AttemptPlan(base=base, locks=locks)
            if len(locks) == 1 and txn.outcome == COMMITTED:
                plan.undo_off_from = 0
            if len(locks) > 1 and txn.outcome == COMMITTED:
                last = {}
                for i, step in enumerate(txn.steps):
                    for p in step.partitions:
                        last[p] = i
                plan.finish_after = {p: i for p, i in last.items() if p != base}
            return plan
        return self._houdini_plan(txn)

    def _houdini_plan(self, txn) -> AttemptPlan:
        record = txn.record
        proc = self.catalog.procedure(record.proc_name)
        model = self.bundle.model_for_record(record, proc)
        mapping = self.bundle.mapping_for(record.proc_name)
        try:
            estimate = estimate_initial_path(
                model, mapping, record.proc_params, self.catalog,
                confidence_mode=self.config.confidence_mode,
            )
        except EstimationError:
            return self._distributed_plan(txn)
        plan_sel = select_optimizations(
            estimate, model, self.config.threshold, abort_cutoff=self.config.abort_cutoff
        )
        locks = frozenset(plan_sel.lock_set)
        plan = AttemptPlan(base=plan_sel.base_partition, locks=locks)
        if plan_sel.disable_undo:
            plan.undo_off_from = 0

        # replay the true path through the runtime tracker for mid-flight
        # updates; updates past the first lock violation never happen, and a
        # finish notice for a partition the transaction has not touched yet
        # is ignored by the coordinator (the lock is still needed)
        viol = None
        for i, step in enumerate(txn.steps):
            if not step.partitions <= locks:
                viol = i
                break
        cut = viol if viol is not None else len(txn.steps)
        session = TxnSession(model, self.config.threshold, estimate=estimate, plan=plan_sel)
        states = record_states(record, self.catalog)
        touched: set = set()
        for i, st in enumerate(states[:cut]):
            touched |= set(st.partitions)
            for upd in session.track(st.query_name, st.partitions):
                if upd.kind == "disable_undo" and plan.undo_off_from is None:
                    plan.undo_off_from = upd.path_index + 1
                elif (
                    upd.kind == "partition_finished"
                    and len(locks) > 1
                    and upd.partition in locks
                    and upd.partition != plan.base
                    and upd.partition in touched
                ):
                    plan.finish_after.setdefault(upd.partition, upd.path_index)
        return plan

    def restart_plan(self, txn, prior: AttemptPlan, demanded: frozenset, executed: int) -> AttemptPlan:
        s = self.strategy
        if s == ASSUME_SINGLE:
            tried = set(prior.locks) | set(demanded)
            for step in txn.steps[:executed]:
                tried |= step.partitions
            return AttemptPlan(base=prior.base, locks=frozenset(tried), conservative=True)
        if s == DB2_REDIRECT:
            if len(demanded) == 1 and txn.attempt == 1:
                target = next(iter(demanded))
                return AttemptPlan(base=target, locks=frozenset((target,)), conservative=True)
            counts = defaultdict(int)
            for step in txn.steps[:executed]:
                for p in step.partitions:
                    counts[p] += 1
            for p in demanded:
                counts[p] += 1
            top = max(counts.values())
            candidates = sorted(p for p, c in counts.items() if c == top)
            base = candidates[0] if len(candidates) == 1 else self.rng.choice(candidates)
            return AttemptPlan(base=base, locks=self.all_parts, conservative=True)
        # houdini and oracle restarts: same base, lock everything, play safe
        return AttemptPlan(base=prior.base, locks=self.all_parts, conservative=True)


# ---------------------------------------------------------------------------
# Engine


class _Engine:
    def __init__(self, config: SimConfig, workload: Workload, strategy: str,
                 catalog: Catalog, bundle, collect_log: bool):
        if strategy not in STRATEGIES:
            raise SimError(f"unknown strategy {strategy!r}")
        if not workload.records:
            raise SimError("cannot simulate an empty workload")
        self.config = config
        self.catalog = catalog
        self.strategy = strategy
        self.rng = random.Random(config.seed)
        self.planner = _Planner(strategy, config, catalog, bundle, self.rng)
        self.partitions = [_Partition() for _ in range(config.num_partitions)]
        self.heap: list = []
        self.seq = 0
        self.result = SimResult(
            strategy=strategy,
            num_partitions=config.num_partitions,
            threshold=config.threshold,
            seed=config.seed,
            duration=config.duration,
            warmup_end=config.warmup_end,
        )
        self.log: list | None = [] if collect_log else None
        self.halted = False
        self._records = workload.records
        self._next_record = 0
        self._steps_cache: dict = {}

    # -- helpers

    def _push(self, t, kind, payload):
        heapq.heappush(self.heap, (t, self.seq, kind, payload))
        self.seq += 1

    def _steps_for(self, record) -> list:
        cached = self._steps_cache.get(record.txn_id)
        if cached is None:
            proc = self.catalog.procedure(record.proc_name)
            states = record_states(record, self.catalog)
            cached = [
                Step(
                    frozenset(st.partitions),
                    proc.query(st.query_name).is_write,
                    proc.query(st.query_name).target_table,
                )
                for st in states
            ]
            self._steps_cache[record.txn_id] = cached
        return cached

    def _log(self, t, kind, txn, **extra):
        if self.log is not None:
            entry = {"t": t, "event": kind, "txn": txn.tid, "attempt": txn.attempt}
            entry.update(extra)
            self.log.append(entry)

    # -- clients

    def spawn(self, t):
        record = self._records[self._next_record % len(self._records)]
        tid = self._next_record
        self._next_record += 1
        txn = Txn(tid, record, self._steps_for(record), self.rng.randrange(self.config.num_partitions))
        txn.plan = txn.first_plan = self.planner.initial_plan(txn)
        self.result.spawned += 1
        if txn.plan.locks == self.planner.all_parts:
            self.result.initial_full_lock += 1
        if txn.plan.undo_off_from == 0:
            self.result.undo_disabled += 1
        elif txn.plan.undo_off_from is not None:
            self.result.runtime_undo_disabled += 1
        if txn.plan.base in txn.best_bases():
            self.result.op1_correct += 1
        if set(txn.plan.locks) == set(txn.accessed):
            self.result.op2_correct += 1
        self.submit(txn, t)

    def submit(self, txn, t):
        txn.granted = set()
        txn.prepared = set()
        txn.speculative = False
        txn.sched_end = None
        for p in sorted(txn.plan.locks):
            self.partitions[p].queue.append((txn, txn.epoch))
        for p in sorted(txn.plan.locks):
            self.try_grant(p, t)

    def _complete(self, txn, t, committed: bool):
        txn.done = True
        if committed:
            self.result.committed += 1
            if txn.speculative:
                self.result.speculative_commits += 1
            if self.config.warmup_end < t <= self.config.duration:
                self.result.committed_measured += 1
        else:
            self.result.aborted_user += 1
        if t <= self.config.duration:
            self.spawn(t)

    # -- lock queues

    def _pop_stale(self, part):
        while part.queue:
            txn, epoch = part.queue[0]
            if txn.done or txn.epoch != epoch:
                part.queue.popleft()
            else:
                break

    def try_grant(self, p, t):
        part = self.partitions[p]
        self._pop_stale(part)
        if part.owner is not None or not part.queue:
            return
        txn, _ = part.queue.popleft()
        part.owner = txn
        txn.granted.add(p)
        if part.pending is not None:
            part.dependents.append(txn)
        if txn.granted == set(txn.plan.locks):
            self.start_txn(txn, t)

    # -- execution

    def start_txn(self, txn, t):
        cost = self.config.cost
        plan = txn.plan
        # work granted between an early prepare and the preparer's commit is
        # speculative: it always keeps its undo log
        txn.speculative = any(
            self.partitions[p].pending is not None for p in plan.locks
        )
        undo_off = None if txn.speculative else plan.undo_off_from
        cursor = t + cost.base_dispatch
        step_ends = []
        viol = conflict = None
        for i, step in enumerate(txn.steps):
            if not step.partitions <= plan.locks:
                viol = i
                break
            if plan.finish_after and any(
                plan.finish_after.get(p, len(txn.steps)) < i for p in step.partitions
            ):
                conflict = i
                break
            dur = cost.local_query
            if step.is_write and (undo_off is None or i < undo_off):
                dur += cost.undo_log_per_write
            cursor += dur
            step_ends.append(cursor)
        executed = len(step_ends)
        unlogged_writes = 0
        if undo_off is not None:
            unlogged_writes = sum(
                1 for i, s in enumerate(txn.steps[:executed]) if s.is_write and i >= undo_off
            )
        self._log(t, "start", txn, speculative=txn.speculative, base=plan.base,
                  locks=sorted(plan.locks), undo_off_from=undo_off)

        if viol is not None:
            txn.sched_end = (cursor, "violation")
            self._push(cursor, "end", (txn, txn.epoch, "violation", viol, unlogged_writes))
            return
        if conflict is not None:
            txn.sched_end = (cursor, "conflict")
            self._push(cursor, "end", (txn, txn.epoch, "conflict", conflict, unlogged_writes))
            return
        if txn.outcome == ABORTED:
            txn.sched_end = (cursor, "user_abort")
            self._push(cursor, "end", (txn, txn.epoch, "user_abort", executed, unlogged_writes))
            return
        commit_time = cursor
        if len(plan.locks) > 1:
            commit_time += 2 * cost.two_pc_round + cost.remote_round_trip
        txn.sched_end = (commit_time, "commit")
        if not plan.conservative:
            for p, idx in sorted(plan.finish_after.items()):
                if idx < executed:
                    self._push(step_ends[idx], "prepare", (txn, txn.epoch, p))
        self._push(commit_time, "end", (txn, txn.epoch, "commit", executed, unlogged_writes))

    # -- event handlers

    def _restart(self, txn, t, demanded=frozenset(), executed=0, collateral=False):
        txn.epoch += 1
        txn.attempt += 1
        txn.restarts += 1
        self.result.restarts += 1
        self._log(t, "restart", txn, collateral=collateral)
        self._abort_dependents(txn, t)
        self._release_owned(txn, t)
        txn.granted = set()
        txn.prepared = set()
        if not collateral:
            txn.plan = self.planner.restart_plan(txn, txn.plan, demanded, executed)
        self._push(t + self.config.cost.restart_penalty, "submit", txn)

    def _abort_dependents(self, txn, t):
        """A preparer is going away without committing: every speculative
        transaction that started under one of its early prepares and has not
        committed yet must abort and retry."""
        for p in sorted(txn.prepared):
            part = self.partitions[p]
            if part.pending is not txn:
                continue
            part.pending = None
            victims = [d for d in part.dependents if not d.done]
            part.dependents = []
            for victim in victims:
                self._restart(victim, t, collateral=True)

    def _clear_pending(self, txn, t):
        for p in sorted(txn.prepared):
            part = self.partitions[p]
            if part.pending is txn:
                part.pending = None
                part.dependents = []

    def _release_owned(self, txn, t):
        for p in sorted(txn.plan.locks):
            part = self.partitions[p]
            if part.owner is txn:
                part.owner = None
                self.try_grant(p, t)

    def _deferral_time(self, txn) -> int | None:
        """Latest scheduled commit among conflicting preparers of the
        partitions this transaction used speculatively, if any."""
        latest = None
        for p in txn.plan.locks:
            part = self.partitions[p]
            pre = part.pending
            if pre is None or pre is txn or txn not in part.dependents:
                continue
            if txn.accessed_tables & pre.written_tables and pre.sched_end is not None:
                end_t = pre.sched_end[0]
                if latest is None or end_t > latest:
                    latest = end_t
        return latest

    def handle_end(self, t, payload):
        txn, epoch, kind, info, unlogged = payload
        if txn.done or txn.epoch != epoch:
            return
        if kind == "commit":
            # speculative transactions that touched tables written by a
            # still-pending preparer hold their commit until it finishes
            defer_to = self._deferral_time(txn) if txn.speculative else None
            if defer_to is not None and defer_to > t:
                self._release_owned(txn, t)
                txn.sched_end = (defer_to, "commit")
                self._log(t, "spec_defer", txn, until=defer_to)
                self._push(defer_to, "end", (txn, txn.epoch, "commit", info, unlogged))
                return
            self._log(t, "commit", txn, unlogged_writes=unlogged, speculative=txn.speculative)
            self._clear_pending(txn, t)
            self._release_owned(txn, t)
            self._complete(txn, t, committed=True)
            return
        if kind == "user_abort":
            if unlogged > 0:
                # a write went unlogged and the transaction aborted anyway:
                # the engine cannot roll back, the node halts
                self._log(t, "halt", txn, unlogged_writes=unlogged)
                self.result.failed = True
                self.halted = True
                return
            self._log(t, "user_abort", txn, unlogged_writes=0)
            self._abort_dependents(txn, t)
            self._release_owned(txn, t)
            self._complete(txn, t, committed=False)
            return
        # violation / conflict: abort this attempt and retry wider
        self._restart(txn, t, demanded=txn.steps[info].partitions, executed=info)

    def handle_prepare(self, t, payload):
        """Early prepare: the transaction is done with this partition, the
        prepare vote rides on its last query there, and the partition is
        released for queued work."""
        txn, epoch, p = payload
        if txn.done or txn.epoch != epoch:
            return
        part = self.partitions[p]
        if part.owner is not txn:
            return
        txn.prepared.add(p)
        part.owner = None
        part.pending = txn
        part.dependents = []
        self._log(t, "early_prepare", txn, partition=p)
        self.try_grant(p, t)

    # -- main loop

    def run(self) -> SimResult:
        for _ in range(self.config.num_partitions * self.config.clients_per_partition):
            self._push(0, "spawn", None)
        while self.heap and not self.halted:
            t, _, kind, payload = heapq.heappop(self.heap)
            if t > self.config.duration:
                break
            self.result.events += 1
            if kind == "spawn":
                self.spawn(t)
            elif kind == "submit":
                self.submit(payload, t)
            elif kind == "end":
                self.handle_end(t, payload)
            elif kind == "prepare":
                self.handle_prepare(t, payload)
        if self.result.in_flight < 0:
            raise SimError("bookkeeping error: negative in-flight count")
        return self.result


def run_simulation(
    config: SimConfig,
    workload: Workload,
    strategy: str,
    catalog: Catalog,
    bundle: ModelBundle | None = None,
    collect_log: bool = False,
):
    """Run one simulation; returns SimResult (with ``.event_log`` attached
    when ``collect_log`` is set)."""
    engine = _Engine(config, workload, strategy, catalog, bundle, collect_log)
    result = engine.run()
    if collect_log:
        result.event_log = engine.log  # type: ignore[attr-defined]
    return result


def sweep_confidence(
    config: SimConfig,
    workload: Workload,
    catalog: Catalog,
    bundle: ModelBundle,
    thresholds,
    strategy: str = HOUDINI_GLOBAL,
) -> list:
    """One simulation per confidence threshold, sharing the seed.

    Returns ``[(threshold, SimResult)]`` in the given threshold order.
    """
    out = []
    for th in thresholds:
        cfg = SimConfig(
            num_partitions=config.num_partitions,
            duration=config.duration,
            partitions_per_node=config.partitions_per_node,
            clients_per_partition=config.clients_per_partition,
            cost=config.cost,
            warmup_fraction=config.warmup_fraction,
            seed=config.seed,
            threshold=th,
            abort_cutoff=config.abort_cutoff,
            confidence_mode=config.confidence_mode,
        )
        out.append((th, run_simulation(cfg, workload, strategy, catalog, bundle)))
    return out
