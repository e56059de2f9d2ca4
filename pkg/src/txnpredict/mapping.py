"""Procedure-parameter to query-parameter mappings.

Stored procedures usually feed their input parameters straight into query
predicates, so the partition a query touches is often computable from the
request alone.  This module learns those links from a trace: for every pair
of (procedure parameter or array element, query parameter position) it
scores how often the two held the same value, and keeps pairs whose
coefficient clears an acceptance threshold (0.9 by default).

Array parameters pair element-wise with repeated query invocations: the
n-th element of an array is compared against the n-th invocation of a
query.  Within one record the repeated comparisons for such a pair collapse
into their geometric mean; across records the per-record values average
arithmetically.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field

from .catalog import Catalog
from .trace import Workload

SCALAR = "scalar"
NTH_ELEMENT = "nth_element"


@dataclass(frozen=True)
class MappingKey:
    """One candidate link between a procedure parameter and a query parameter.

    For scalar roles the key pins a specific query invocation counter.  For
    the element-wise role the invocation counter pairs implicitly with the
    element index (element n feeds invocation n), so the counter field is
    None.
    """

    proc_param_index: int
    element_role: str  # SCALAR or NTH_ELEMENT
    query_name: str
    invocation: int | None
    query_param_index: int


@dataclass
class ParameterMapping:
    procedure: str
    entries: dict = field(default_factory=dict)  # MappingKey -> coefficient
    accept_threshold: float = 0.9
    query_num_params: dict = field(default_factory=dict)
    query_partition_param: dict = field(default_factory=dict)  # name -> index or None


def geometric_mean(values) -> float:
    """Geometric mean; zero if any value is zero."""
    values = list(values)
    if not values:
        raise ValueError("geometric_mean of empty sequence")
    if any(v == 0 for v in values):
        return 0.0
    return math.exp(sum(math.log(v) for v in values) / len(values))


def infer_mappings(
    workload: Workload, catalog: Catalog, accept_threshold: float = 0.9
) -> dict:
    """Learn one ParameterMapping per procedure appearing in the workload.

    Returns ``{procedure name: ParameterMapping}``.  Coefficients at or
    below the threshold are discarded; an empty workload yields empty
    mappings.  Inference is order-insensitive over records.
    """
    # (proc, MappingKey) -> [sum of per-record values, record count]
    sums: dict = defaultdict(lambda: [0.0, 0])
    for record in workload.records:
        proc = catalog.procedure(record.proc_name)
        # group invocation params by query name, in invocation order
        invocations = defaultdict(list)
        for inv in record.queries:
            invocations[inv.query_name].append(inv.params)
        per_record: dict = defaultdict(list)
        for j, pdef in enumerate(proc.parameters):
            value = record.proc_params[j]
            for qname, instances in invocations.items():
                for c, params in enumerate(instances):
                    for k, qval in enumerate(params):
                        if pdef.is_array:
                            # element-wise: element c pairs with invocation c
                            if c < len(value):
                                key = MappingKey(j, NTH_ELEMENT, qname, None, k)
                                per_record[key].append(1.0 if value[c] == qval else 0.0)
                        else:
                            key = MappingKey(j, SCALAR, qname, c, k)
                            per_record[key].append(1.0 if value == qval else 0.0)
        for key, indicators in per_record.items():
            acc = sums[(record.proc_name, key)]
            acc[0] += geometric_mean(indicators)
            acc[1] += 1

    mappings: dict = {}
    for proc_name in workload.procedure_names():
        proc = catalog.procedure(proc_name)
        mapping = ParameterMapping(
            procedure=proc_name,
            accept_threshold=accept_threshold,
            query_num_params={q.name: q.num_params for q in proc.queries},
            query_partition_param={q.name: q.partition_param_index for q in proc.queries},
        )
        mappings[proc_name] = mapping
    for (proc_name, key), (total, count) in sums.items():
        coefficient = total / count
        if coefficient > accept_threshold:
            mappings[proc_name].entries[key] = coefficient
    return mappings


def all_coefficients(workload: Workload, catalog: Catalog) -> dict:
    """Like :func:`infer_mappings` but returning every coefficient,
    retained or not, as ``{procedure: {MappingKey: coefficient}}``.
    Used for reporting the full coefficient matrix."""
    mappings = infer_mappings(workload, catalog, accept_threshold=-1.0)
    return {name: m.entries for name, m in mappings.items()}


def _lookup(mapping: ParameterMapping, proc_params, query_name: str, counter: int, position: int):
    """Best retained source value for one query parameter position.

    Returns ``(value, coefficient)`` or None.  Highest coefficient wins;
    ties break on the smallest procedure parameter index.
    """
    best = None
    for key, coeff in mapping.entries.items():
        if key.query_name != query_name or key.query_param_index != position:
            continue
        if key.element_role == SCALAR:
            if key.invocation != counter:
                continue
            value = proc_params[key.proc_param_index]
        else:
            array = proc_params[key.proc_param_index]
            if counter >= len(array):
                continue
            value = array[counter]
        rank = (coeff, -key.proc_param_index)
        if best is None or rank > best[0]:
            best = (rank, value, coeff)
    if best is None:
        return None
    return best[1], best[2]


def map_query_params(
    mapping: ParameterMapping, proc_params, query_name: str, invocation_counter: int
):
    """Resolve the full parameter list for one query invocation.

    Returns the list of values, or None when any position has no usable
    retained mapping (the invocation is unresolvable from the inputs).
    """
    num = mapping.query_num_params.get(query_name)
    if num is None:
        return None
    out = []
    for k in range(num):
        hit = _lookup(mapping, proc_params, query_name, invocation_counter, k)
        if hit is None:
            return None
        out.append(hit[0])
    return out


def map_partition_value(
    mapping: ParameterMapping, proc_params, query_name: str, invocation_counter: int
):
    """Resolve just the partition-determining parameter of an invocation.

    Returns the value, or None when the query has no partition parameter
    (broadcast) or the position is unresolvable.
    """
    ppi = mapping.query_partition_param.get(query_name)
    if ppi is None:
        return None
    hit = _lookup(mapping, proc_params, query_name, invocation_counter, ppi)
    if hit is None:
        return None
    return hit[0]


# ---------------------------------------------------------------------------
# Serialization

def mapping_to_dict(mapping: ParameterMapping) -> dict:
    entries = [
        {
            "proc_param_index": k.proc_param_index,
            "element_role": k.element_role,
            "query_name": k.query_name,
            "invocation": k.invocation,
            "query_param_index": k.query_param_index,
            "coefficient": coeff,
        }
        for k, coeff in sorted(
            mapping.entries.items(),
            key=lambda kv: (
                kv[0].query_name,
                kv[0].query_param_index,
                kv[0].invocation if kv[0].invocation is not None else -1,
                kv[0].proc_param_index,
            ),
        )
    ]
    return {
        "procedure": mapping.procedure,
        "accept_threshold": mapping.accept_threshold,
        "query_num_params": dict(sorted(mapping.query_num_params.items())),
        "query_partition_param": dict(sorted(mapping.query_partition_param.items())),
        "entries": entries,
    }


def mapping_from_dict(data: dict) -> ParameterMapping:
    mapping = ParameterMapping(
        procedure=data["procedure"],
        accept_threshold=data["accept_threshold"],
        query_num_params={k: int(v) for k, v in data["query_num_params"].items()},
        query_partition_param={
            k: (int(v) if v is not None else None)
            for k, v in data["query_partition_param"].items()
        },
    )
    for e in data["entries"]:
        key = MappingKey(
            e["proc_param_index"],
            e["element_role"],
            e["query_name"],
            e["invocation"],
            e["query_param_index"],
        )
        mapping.entries[key] = e["coefficient"]
    return mapping
