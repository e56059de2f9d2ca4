"""Workload traces: per-transaction records of executed queries.

A trace captures, for each transaction, the stored procedure it invoked,
the procedure input parameters, the ordered query invocations with their
concrete parameters, and whether it committed or aborted.  Traces carry no
partition information; partitions are re-derived from a catalog whenever a
model is built, so the same trace can be replayed under a different
partition count.

On disk a trace is JSON lines: a header object naming the catalog, then
one record object per line (see README.md for the schema).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .catalog import Catalog

COMMITTED = "committed"
ABORTED = "aborted"


class TraceError(ValueError):
    """Raised for malformed trace files or inconsistent records."""


@dataclass(frozen=True)
class QueryInvocation:
    query_name: str
    params: tuple[int, ...]


@dataclass(frozen=True)
class TraceRecord:
    txn_id: int
    proc_name: str
    proc_params: tuple  # scalars are ints, array parameters are tuples of ints
    queries: tuple[QueryInvocation, ...]
    outcome: str

    def __post_init__(self):
        if self.outcome not in (COMMITTED, ABORTED):
            raise TraceError(f"txn {self.txn_id}: bad outcome {self.outcome!r}")


@dataclass(frozen=True)
class Workload:
    catalog_ref: str
    records: tuple[TraceRecord, ...] = field(default=())

    def __len__(self):
        return len(self.records)

    def filter_procedure(self, proc_name: str) -> "Workload":
        return Workload(self.catalog_ref, tuple(r for r in self.records if r.proc_name == proc_name))

    def procedure_names(self) -> list[str]:
        seen = []
        for r in self.records:
            if r.proc_name not in seen:
                seen.append(r.proc_name)
        return seen


def validate_workload(workload: Workload, catalog: Catalog) -> None:
    """Check every record against the catalog: known procedures and queries,
    matching parameter counts."""
    for rec in workload.records:
        if not catalog.has_procedure(rec.proc_name):
            raise TraceError(f"txn {rec.txn_id}: unknown procedure {rec.proc_name!r}")
        proc = catalog.procedure(rec.proc_name)
        if len(rec.proc_params) != len(proc.parameters):
            raise TraceError(
                f"txn {rec.txn_id}: {rec.proc_name} takes {len(proc.parameters)} "
                f"params, record has {len(rec.proc_params)}"
            )
        for inv in rec.queries:
            q = proc.query(inv.query_name)  # raises CatalogError if unknown
            if len(inv.params) != q.num_params:
                raise TraceError(
                    f"txn {rec.txn_id}: query {inv.query_name} takes {q.num_params} "
                    f"params, invocation has {len(inv.params)}"
                )


def _record_to_dict(rec: TraceRecord) -> dict:
    return {
        "txn_id": rec.txn_id,
        "proc_name": rec.proc_name,
        "proc_params": [list(p) if isinstance(p, tuple) else p for p in rec.proc_params],
        "queries": [{"query_name": q.query_name, "params": list(q.params)} for q in rec.queries],
        "outcome": rec.outcome,
    }


def _record_from_dict(data: dict, line_no: int) -> TraceRecord:
    try:
        proc_params = tuple(
            tuple(int(x) for x in p) if isinstance(p, list) else int(p)
            for p in data["proc_params"]
        )
        queries = tuple(
            QueryInvocation(q["query_name"], tuple(int(x) for x in q["params"]))
            for q in data["queries"]
        )
        return TraceRecord(
            txn_id=int(data["txn_id"]),
            proc_name=data["proc_name"],
            proc_params=proc_params,
            queries=queries,
            outcome=data["outcome"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise TraceError(f"line {line_no}: malformed trace record: {exc}") from exc


def save_trace(workload: Workload, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"catalog_ref": workload.catalog_ref}, sort_keys=True))
        fh.write("\n")
        for rec in workload.records:
            fh.write(json.dumps(_record_to_dict(rec), sort_keys=True))
            fh.write("\n")


def load_trace(path, catalog: Catalog | None = None) -> Workload:
    """Load a trace file; with a catalog supplied, validate records against it.

    Round-trips with :func:`save_trace`: ``load_trace(save_trace(w)) == w``.
    """
    records = []
    catalog_ref = ""
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                data = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise TraceError(f"line {line_no}: invalid JSON: {exc}") from exc
            if line_no == 1:
                if "catalog_ref" not in data:
                    raise TraceError("line 1: missing trace header with catalog_ref")
                catalog_ref = data["catalog_ref"]
                continue
            records.append(_record_from_dict(data, line_no))
    workload = Workload(catalog_ref, tuple(records))
    if catalog is not None:
        validate_workload(workload, catalog)
    return workload


def split_workload(
    workload: Workload,
    fractions: tuple[float, float, float] = (0.30, 0.30, 0.40),
    seed: int = 0,
) -> tuple[Workload, Workload, Workload]:
    """Split into disjoint training/validation/testing worksets.

    Records are shuffled with the given seed, then sliced.  The first two
    sizes are floor-rounded and the remainder goes to the testing workset,
    so the three parts always partition the input exactly.
    """
    import random

    if abs(sum(fractions) - 1.0) > 1e-9:
        raise TraceError(f"fractions must sum to 1, got {fractions}")
    if any(f < 0 for f in fractions):
        raise TraceError(f"fractions must be non-negative, got {fractions}")
    records = list(workload.records)
    random.Random(seed).shuffle(records)
    n = len(records)
    n_train = int(n * fractions[0])
    n_val = int(n * fractions[1])
    train = records[:n_train]
    val = records[n_train : n_train + n_val]
    test = records[n_train + n_val :]
    ref = workload.catalog_ref
    return Workload(ref, tuple(train)), Workload(ref, tuple(val)), Workload(ref, tuple(test))
