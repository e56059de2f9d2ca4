import pytest

from txnpredict import (
    COMMITTED,
    Catalog,
    NewOrderConfig,
    ProcParam,
    ProcedureDef,
    QueryDef,
    QueryInvocation,
    TableDef,
    TatpConfig,
    TraceRecord,
    Workload,
    generate_neworder_like,
    generate_tatp_like,
    infer_mappings,
    neworder_catalog,
    tatp_catalog,
)


def risky_catalog():
    """One write query that occasionally aborts after the write: the
    worst case for undo elision."""
    return Catalog(
        "risky",
        (TableDef("T", "K", ("K",)),),
        (
            ProcedureDef(
                "Risky",
                (ProcParam("key"),),
                (QueryDef("WriteRow", "T", "write", 1, partition_param_index=0),),
            ),
        ),
        num_partitions=2,
    )


def risky_workload(n=200, abort_every=40):
    records = []
    for i in range(n):
        outcome = "aborted" if i % abort_every == 0 else COMMITTED
        records.append(
            TraceRecord(i, "Risky", (i % 2,), (QueryInvocation("WriteRow", (i % 2,)),), outcome)
        )
    return Workload("risky", tuple(records))


@pytest.fixture(scope="session")
def neworder_p2():
    """Fixed-length order workload on two partitions with remote items."""
    catalog = neworder_catalog(2)
    config = NewOrderConfig(
        num_partitions=2,
        num_txns=4000,
        item_count_distribution={2: 1.0},
        remote_warehouse_probability=0.05,
        abort_probability=0.01,
    )
    workload = generate_neworder_like(config, seed=42)
    return catalog, workload


@pytest.fixture(scope="session")
def neworder_p2_mappings(neworder_p2):
    catalog, workload = neworder_p2
    return infer_mappings(workload, catalog)


@pytest.fixture(scope="session")
def tatp_p4():
    catalog = tatp_catalog(4)
    config = TatpConfig(num_partitions=4, num_txns=4000)
    workload = generate_tatp_like(config, seed=7)
    return catalog, workload
