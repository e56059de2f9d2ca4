import random

import pytest

from txnpredict import (
    COMMITTED,
    Catalog,
    MappingKey,
    ProcParam,
    ProcedureDef,
    QueryDef,
    QueryInvocation,
    TableDef,
    TraceRecord,
    Workload,
    geometric_mean,
    infer_mappings,
    map_partition_value,
    map_query_params,
)
from txnpredict.mapping import NTH_ELEMENT, SCALAR


def test_geometric_mean_example():
    assert geometric_mean([1.0, 0.25]) == pytest.approx(0.5)


def test_geometric_mean_zero_short_circuits():
    assert geometric_mean([1.0, 0.0, 1.0]) == 0.0


def decoy_catalog():
    return Catalog(
        "decoy",
        (TableDef("T", "K", ("K",)),),
        (
            ProcedureDef(
                "P",
                (ProcParam("key"), ProcParam("noise")),
                (QueryDef("Q", "T", "read", 1, partition_param_index=0),),
            ),
        ),
        num_partitions=4,
    )


def decoy_workload(n=1000, domain=100, seed=0):
    rng = random.Random(seed)
    records = []
    for i in range(n):
        key = rng.randrange(domain)
        noise = rng.randrange(domain)
        records.append(
            TraceRecord(i, "P", (key, noise), (QueryInvocation("Q", (key,)),), COMMITTED)
        )
    return Workload("decoy", tuple(records))


def test_planted_identity_recovered():
    catalog = decoy_catalog()
    mappings = infer_mappings(decoy_workload(), catalog)
    key = MappingKey(0, SCALAR, "Q", 0, 0)
    assert mappings["P"].entries[key] == 1.0


def test_independent_decoy_discarded():
    # expected match rate for two independent uniforms over a 100-value
    # domain is 1/100; the coefficient must land near it and far below 0.9
    catalog = decoy_catalog()
    mappings = infer_mappings(decoy_workload(), catalog, accept_threshold=-1.0)
    coeff = mappings["P"].entries[MappingKey(1, SCALAR, "Q", 0, 0)]
    assert coeff < 0.9
    assert coeff == pytest.approx(0.01, abs=0.01)
    retained = infer_mappings(decoy_workload(), catalog)
    assert MappingKey(1, SCALAR, "Q", 0, 0) not in retained["P"].entries


def test_inference_order_insensitive():
    catalog = decoy_catalog()
    workload = decoy_workload(n=200, seed=3)
    shuffled = list(workload.records)
    random.Random(9).shuffle(shuffled)
    a = infer_mappings(workload, catalog, accept_threshold=-1.0)
    b = infer_mappings(Workload("decoy", tuple(shuffled)), catalog, accept_threshold=-1.0)
    assert a["P"].entries == b["P"].entries


def test_neworder_mapping_resolves_example(neworder_p2_mappings):
    mapping = neworder_p2_mappings["NewOrder"]
    params = (0, (1001, 1002), (0, 1), (2, 7))
    assert map_query_params(mapping, params, "GetWarehouse", 0) == [0]
    assert map_query_params(mapping, params, "CheckStock", 1) == [1, 1002]
    assert map_query_params(mapping, params, "CheckStock", 0) == [0, 1001]


def test_neworder_diagonal_array_links(neworder_p2_mappings):
    entries = neworder_p2_mappings["NewOrder"].entries
    # element n of the warehouse array feeds the n-th stock check
    assert entries[MappingKey(2, NTH_ELEMENT, "CheckStock", None, 0)] == 1.0
    assert entries[MappingKey(1, NTH_ELEMENT, "CheckStock", None, 1)] == 1.0
    assert entries[MappingKey(3, NTH_ELEMENT, "UpdateStock", None, 0)] == 1.0
    assert entries[MappingKey(0, SCALAR, "GetWarehouse", 0, 0)] == 1.0


def test_derived_value_is_unresolvable(neworder_p2_mappings):
    # the order id is produced inside the transaction, not by any input
    mapping = neworder_p2_mappings["NewOrder"]
    params = (0, (1001, 1002), (0, 1), (2, 7))
    assert map_query_params(mapping, params, "InsertOrder", 0) is None
    # but its partition parameter alone is resolvable
    assert map_partition_value(mapping, params, "InsertOrder", 0) == 0


def test_array_index_past_runtime_length(neworder_p2_mappings):
    mapping = neworder_p2_mappings["NewOrder"]
    params = (0, (1001,), (0,), (2,))  # one item
    assert map_query_params(mapping, params, "CheckStock", 0) == [0, 1001]
    # no source for the item id of a second stock check: unresolvable
    assert map_query_params(mapping, params, "CheckStock", 1) is None
    # the partition parameter still resolves through the retained scalar
    # correlation between the home warehouse and the stock warehouse
    assert map_partition_value(mapping, params, "CheckStock", 1) == 0


def test_broadcast_has_no_partition_value(tatp_p4):
    catalog, workload = tatp_p4
    mappings = infer_mappings(workload, catalog)
    mapping = mappings["GetNewDestination"]
    assert map_partition_value(mapping, (100_123,), "FindDestination", 0) is None
    # the follow-up query's key comes from the broadcast result
    assert map_query_params(mapping, (100_123,), "GetDestination", 0) is None


def test_highest_coefficient_wins(neworder_p2_mappings):
    # the home warehouse matches the stock check's warehouse on local items
    # (coefficient ~0.95), but the element-wise link is exact and wins
    mapping = neworder_p2_mappings["NewOrder"]
    scalar_key = MappingKey(0, SCALAR, "CheckStock", 0, 0)
    diag_key = MappingKey(2, NTH_ELEMENT, "CheckStock", None, 0)
    assert mapping.entries[diag_key] == 1.0
    if scalar_key in mapping.entries:
        assert mapping.entries[scalar_key] < 1.0
    params = (3, (1001, 1002), (4, 5), (2, 7))
    assert map_query_params(mapping, params, "CheckStock", 0) == [4, 1001]


def test_empty_workload_gives_empty_mapping():
    catalog = decoy_catalog()
    mappings = infer_mappings(Workload("decoy"), catalog)
    assert mappings == {}
