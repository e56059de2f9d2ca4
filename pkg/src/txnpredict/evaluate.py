"""Off-line accuracy evaluation of trained bundles.

For every test record the evaluator produces an estimate and an
optimization plan, replays the true execution through the runtime tracker,
and grades the four optimizations:

* base partition -- chosen base is among the actually most-accessed
  partitions;
* lock set -- predicted locks equal the partitions actually accessed
  (nothing missing, nothing wasted);
* undo elision -- never disabled for a transaction that went on to abort
  after performing unlogged writes (the unrecoverable case);
* early release -- no partition was reported finished and then accessed
  again.

The default protocol builds models from the first half of a trace and
evaluates them, frozen, on the second half.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

from .bundles import ModelBundle, build_global_bundle, build_partitioned_bundle
from .catalog import Catalog
from .estimator import (
    EstimationError,
    TxnSession,
    estimate_initial_path,
    first_divergence,
    path_exact,
    select_optimizations,
)
from .markov import record_states
from .trace import ABORTED, TraceRecord, Workload


@dataclass
class RecordEvaluation:
    op1_ok: bool
    op2_ok: bool
    op3_ok: bool
    op4_ok: bool
    path_exact: bool
    op3_false_disable: bool
    divergence: tuple | None


@dataclass
class ProcedureReport:
    procedure: str
    records: int = 0
    op1: int = 0
    op2: int = 0
    op3: int = 0
    op4: int = 0
    exact: int = 0
    all_ok: int = 0
    op3_false_disables: int = 0

    def pct(self, count: int) -> float:
        return 100.0 * count / self.records if self.records else 100.0


@dataclass
class EvaluationReport:
    variant: str
    procedures: dict = field(default_factory=dict)

    def total_records(self) -> int:
        return sum(p.records for p in self.procedures.values())

    def total_pct(self) -> float:
        n = self.total_records()
        if not n:
            return 100.0
        return 100.0 * sum(p.all_ok for p in self.procedures.values()) / n

    def total_false_disables(self) -> int:
        return sum(p.op3_false_disables for p in self.procedures.values())


def evaluate_record(
    bundle: ModelBundle, record: TraceRecord, catalog: Catalog, threshold: float
) -> RecordEvaluation:
    proc = catalog.procedure(record.proc_name)
    model = bundle.model_for_record(record, proc)
    mapping = bundle.mapping_for(record.proc_name)
    try:
        estimate = estimate_initial_path(model, mapping, record.proc_params, catalog)
    except EstimationError:
        return RecordEvaluation(False, False, True, False, False, False, (0, None, None))
    plan = select_optimizations(estimate, model, threshold)

    states = record_states(record, catalog)
    access_counts: dict = defaultdict(int)
    last_access: dict = {}
    for i, st in enumerate(states):
        for p in st.partitions:
            access_counts[p] += 1
            last_access[p] = i
    accessed = set(access_counts)

    best = max(access_counts.values()) if access_counts else 0
    op1_ok = access_counts.get(plan.base_partition, 0) == best
    op2_ok = set(plan.lock_set) == accessed

    session = TxnSession(model, threshold, estimate=estimate, plan=plan)
    finish_at: dict = {}
    undo_off_after: int | None = 0 if plan.disable_undo else None
    for st in states:
        for upd in session.track(st.query_name, st.partitions):
            if upd.kind == "partition_finished":
                finish_at.setdefault(upd.partition, upd.path_index)
            elif upd.kind == "disable_undo" and undo_off_after is None:
                undo_off_after = upd.path_index + 1
    session.finish(record.outcome)

    op4_ok = all(
        p not in last_access or last_access[p] <= idx for p, idx in finish_at.items()
    )

    false_disable = False
    if record.outcome == ABORTED and undo_off_after is not None:
        unlogged_writes = sum(
            1
            for i, st in enumerate(states)
            if i >= undo_off_after and proc.query(st.query_name).is_write
        )
        false_disable = unlogged_writes > 0
    op3_ok = not false_disable

    exact = path_exact(estimate, model, record, catalog)
    div = None if exact else first_divergence(estimate, model, record, catalog)
    return RecordEvaluation(op1_ok, op2_ok, op3_ok, op4_ok, exact, false_disable, div)


def evaluate_bundle(
    bundle: ModelBundle, workload: Workload, catalog: Catalog, threshold: float
) -> EvaluationReport:
    report = EvaluationReport(variant=bundle.kind)
    for record in workload.records:
        ev = evaluate_record(bundle, record, catalog, threshold)
        proc = report.procedures.setdefault(record.proc_name, ProcedureReport(record.proc_name))
        proc.records += 1
        proc.op1 += ev.op1_ok
        proc.op2 += ev.op2_ok
        proc.op3 += ev.op3_ok
        proc.op4 += ev.op4_ok
        proc.exact += ev.path_exact
        proc.all_ok += ev.op1_ok and ev.op2_ok and ev.op3_ok and ev.op4_ok
        proc.op3_false_disables += ev.op3_false_disable
    return report


def split_half(workload: Workload) -> tuple:
    """First-half / second-half split in trace order (no shuffling): models
    learn from the first half and are evaluated, frozen, on the rest."""
    half = len(workload.records) // 2
    return (
        Workload(workload.catalog_ref, workload.records[:half]),
        Workload(workload.catalog_ref, workload.records[half:]),
    )


def evaluate_protocol(
    workload: Workload,
    catalog: Catalog,
    threshold: float,
    seed: int = 0,
    variants: tuple = ("global", "partitioned"),
) -> dict:
    """Build-on-first-half, evaluate-on-second-half for both model variants.

    Returns ``{variant: EvaluationReport}``.
    """
    build, test = split_half(workload)
    reports = {}
    if "global" in variants:
        bundle = build_global_bundle(build, catalog)
        reports["global"] = evaluate_bundle(bundle, test, catalog, threshold)
    if "partitioned" in variants:
        bundle, _ = build_partitioned_bundle(build, catalog, threshold=threshold, seed=seed)
        reports["partitioned"] = evaluate_bundle(bundle, test, catalog, threshold)
    return reports
