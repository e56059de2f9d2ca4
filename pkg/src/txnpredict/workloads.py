"""Synthetic desk-scale workload generators.

Three generators cover the shapes that matter for prediction:

* ``generate_neworder_like`` -- a warehouse order entry procedure whose
  query count scales with an item array and which occasionally reaches
  into a remote warehouse's partition.
* ``generate_tatp_like`` -- a telecom-style mix of always-single-partition
  procedures and procedures that open with a broadcast lookup whose
  follow-up partition cannot be derived from the input parameters.
* ``generate_branchy_like`` -- a buyer/seller procedure with two disjoint
  query paths chosen by an input parameter, one single-partition and one
  spanning two partitions.

Generators are pure functions of (config, seed).  All aborts are placed
after read queries only, so an aborting transaction never has writes to
roll back.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .catalog import Catalog, ProcedureDef, ProcParam, QueryDef, TableDef, hash_partition
from .trace import ABORTED, COMMITTED, QueryInvocation, TraceRecord, Workload


def _weighted_choice(rng: random.Random, weights: dict) -> object:
    items = sorted(weights.items(), key=lambda kv: str(kv[0]))
    total = sum(w for _, w in items)
    x = rng.random() * total
    acc = 0.0
    for value, w in items:
        acc += w
        if x < acc:
            return value
    return items[-1][0]


# ---------------------------------------------------------------------------
# Order-entry workload


@dataclass(frozen=True)
class NewOrderConfig:
    num_partitions: int
    num_txns: int
    item_count_distribution: dict = field(default_factory=lambda: {2: 1.0})
    remote_warehouse_probability: float = 0.0
    abort_probability: float = 0.0
    warehouses_per_partition: int = 4
    item_id_base: int = 1000
    item_id_count: int = 1000
    # False: at most one remote item per order (remote_warehouse_probability
    # applies per record).  True: every item draws its warehouse
    # independently, so one order can span several remote partitions.
    independent_remote_items: bool = False

    def __post_init__(self):
        for p in (self.remote_warehouse_probability, self.abort_probability):
            if not (0.0 <= p <= 1.0):
                raise ValueError(f"probability out of range: {p}")
        if not self.item_count_distribution:
            raise ValueError("item_count_distribution must be non-empty")


def neworder_catalog(num_partitions: int, name: str = "neworder") -> Catalog:
    tables = (
        TableDef("WAREHOUSE", "W_ID", ("W_ID", "W_NEXT_O_ID")),
        TableDef("STOCK", "S_W_ID", ("S_W_ID", "S_I_ID", "S_QTY")),
        TableDef("ORDERS", "O_W_ID", ("O_W_ID", "O_ID")),
        TableDef("ORDER_LINE", "OL_W_ID", ("OL_W_ID", "OL_O_ID", "OL_I_ID", "OL_QTY")),
    )
    neworder = ProcedureDef(
        name="NewOrder",
        parameters=(
            ProcParam("w_id"),
            ProcParam("i_ids", is_array=True),
            ProcParam("i_w_ids", is_array=True),
            ProcParam("i_qtys", is_array=True),
        ),
        queries=(
            QueryDef("GetWarehouse", "WAREHOUSE", "read", 1, partition_param_index=0),
            QueryDef("CheckStock", "STOCK", "read", 2, partition_param_index=0),
            QueryDef("InsertOrder", "ORDERS", "write", 2, partition_param_index=0),
            QueryDef("InsertOrdLine", "ORDER_LINE", "write", 4, partition_param_index=0),
            QueryDef("UpdateStock", "STOCK", "write", 3, partition_param_index=1),
        ),
    )
    return Catalog(name, tables, (neworder,), num_partitions)


def generate_neworder_like(config: NewOrderConfig, seed: int) -> Workload:
    """Order-entry records: GetWarehouse, n CheckStock, InsertOrder, then an
    InsertOrdLine/UpdateStock pair per item.

    With ``remote_warehouse_probability`` a record sources one item from a
    warehouse on a different partition than its home warehouse.  With
    ``abort_probability`` a record aborts right after the CheckStock batch
    (insufficient stock), before any write executes.
    """
    rng = random.Random(seed)
    P = config.num_partitions
    n_keys = P * config.warehouses_per_partition
    records = []
    for txn_id in range(config.num_txns):
        home_w = rng.randrange(n_keys)
        home_p = hash_partition(home_w, P)
        n_items = _weighted_choice(rng, config.item_count_distribution)
        i_ids = tuple(config.item_id_base + rng.randrange(config.item_id_count) for _ in range(n_items))
        i_w_ids = [home_w] * n_items

        def remote_key():
            remote_p = rng.choice([p for p in range(P) if p != home_p])
            return remote_p + P * rng.randrange(config.warehouses_per_partition)

        if P > 1 and n_items > 0:
            if config.independent_remote_items:
                for k in range(n_items):
                    if rng.random() < config.remote_warehouse_probability:
                        i_w_ids[k] = remote_key()
            elif rng.random() < config.remote_warehouse_probability:
                i_w_ids[rng.randrange(n_items)] = remote_key()
        i_w_ids = tuple(i_w_ids)
        i_qtys = tuple(1 + rng.randrange(10) for _ in range(n_items))
        aborts = rng.random() < config.abort_probability

        queries = [QueryInvocation("GetWarehouse", (home_w,))]
        for k in range(n_items):
            queries.append(QueryInvocation("CheckStock", (i_w_ids[k], i_ids[k])))
        if aborts:
            records.append(
                TraceRecord(txn_id, "NewOrder", (home_w, i_ids, i_w_ids, i_qtys), tuple(queries), ABORTED)
            )
            continue
        o_id = 10_000_000 + txn_id
        queries.append(QueryInvocation("InsertOrder", (home_w, o_id)))
        for k in range(n_items):
            queries.append(QueryInvocation("InsertOrdLine", (home_w, o_id, i_ids[k], i_qtys[k])))
            queries.append(QueryInvocation("UpdateStock", (i_qtys[k], i_w_ids[k], i_ids[k])))
        records.append(
            TraceRecord(txn_id, "NewOrder", (home_w, i_ids, i_w_ids, i_qtys), tuple(queries), COMMITTED)
        )
    return Workload("neworder", tuple(records))


# ---------------------------------------------------------------------------
# Telecom-style workload

SINGLE_PARTITION_TATP_PROCS = ("GetAccessInfo", "UpdateLocation")
BROADCAST_TATP_PROC = "GetNewDestination"


@dataclass(frozen=True)
class TatpConfig:
    num_partitions: int
    num_txns: int
    single_partition_fraction: float = 0.82
    abort_probability: float = 0.02
    subscribers_per_partition: int = 8

    def __post_init__(self):
        for p in (self.single_partition_fraction, self.abort_probability):
            if not (0.0 <= p <= 1.0):
                raise ValueError(f"probability out of range: {p}")


def tatp_catalog(num_partitions: int, name: str = "tatp") -> Catalog:
    tables = (
        TableDef("SUBSCRIBER", "S_ID", ("S_ID", "VLR_LOCATION")),
        TableDef("ACCESS_INFO", "AI_S_ID", ("AI_S_ID", "AI_TYPE", "AI_DATA")),
        TableDef("DESTINATION", "D_S_ID", ("D_S_ID", "D_NUMBER")),
    )
    procs = (
        ProcedureDef(
            "GetAccessInfo",
            (ProcParam("s_id"), ProcParam("ai_type")),
            (QueryDef("GetAccessData", "ACCESS_INFO", "read", 2, partition_param_index=0),),
        ),
        ProcedureDef(
            "UpdateLocation",
            (ProcParam("s_id"), ProcParam("location")),
            (
                QueryDef("GetSubscriber", "SUBSCRIBER", "read", 1, partition_param_index=0),
                QueryDef("UpdateSubscriber", "SUBSCRIBER", "write", 2, partition_param_index=1),
            ),
        ),
        ProcedureDef(
            "GetNewDestination",
            (ProcParam("number"),),
            (
                QueryDef("FindDestination", "DESTINATION", "read", 1, is_broadcast=True),
                QueryDef("GetDestination", "DESTINATION", "read", 1, partition_param_index=0),
            ),
        ),
    )
    return Catalog(name, tables, procs, num_partitions)


def generate_tatp_like(config: TatpConfig, seed: int) -> Workload:
    """Telecom-style records.

    The two single-partition procedures hash directly off a subscriber id
    parameter.  The broadcast procedure first scans every partition to find
    a subscriber, then reads that subscriber's partition; the subscriber id
    is produced by the scan, not by any input parameter, so it cannot be
    derived from the request.  Every procedure aborts with
    ``abort_probability`` after its first (read) query, mimicking
    missing-row aborts; no abort ever follows a write.
    """
    rng = random.Random(seed)
    P = config.num_partitions
    n_keys = P * config.subscribers_per_partition
    single_each = config.single_partition_fraction / len(SINGLE_PARTITION_TATP_PROCS)
    weights = {proc: single_each for proc in SINGLE_PARTITION_TATP_PROCS}
    weights[BROADCAST_TATP_PROC] = 1.0 - config.single_partition_fraction
    records = []
    for txn_id in range(config.num_txns):
        proc = _weighted_choice(rng, weights)
        aborts = rng.random() < config.abort_probability
        if proc == "GetAccessInfo":
            s_id = rng.randrange(n_keys)
            ai_type = rng.randrange(4)
            queries = [QueryInvocation("GetAccessData", (s_id, ai_type))]
            params = (s_id, ai_type)
        elif proc == "UpdateLocation":
            s_id = rng.randrange(n_keys)
            location = 500 + rng.randrange(100)
            queries = [QueryInvocation("GetSubscriber", (s_id,))]
            if not aborts:
                queries.append(QueryInvocation("UpdateSubscriber", (location, s_id)))
            params = (s_id, location)
        else:
            number = 100_000 + rng.randrange(1000)
            secret_s_id = rng.randrange(n_keys)
            queries = [QueryInvocation("FindDestination", (number,))]
            if not aborts:
                queries.append(QueryInvocation("GetDestination", (secret_s_id,)))
            params = (number,)
        outcome = ABORTED if aborts else COMMITTED
        records.append(TraceRecord(txn_id, proc, params, tuple(queries), outcome))
    return Workload("tatp", tuple(records))


# ---------------------------------------------------------------------------
# Buyer/seller workload with a parameter-selected branch


@dataclass(frozen=True)
class BranchyConfig:
    num_partitions: int
    num_txns: int
    two_partition_probability: float = 0.4
    abort_probability: float = 0.01
    users_per_partition: int = 8

    def __post_init__(self):
        for p in (self.two_partition_probability, self.abort_probability):
            if not (0.0 <= p <= 1.0):
                raise ValueError(f"probability out of range: {p}")


def branchy_catalog(num_partitions: int, name: str = "branchy") -> Catalog:
    tables = (TableDef("USERS", "U_ID", ("U_ID", "U_BALANCE")),)
    proc = ProcedureDef(
        "PlaceAction",
        (ProcParam("mode"), ProcParam("buyer_id"), ProcParam("seller_id")),
        (
            # mode 0 path: read and update the seller only
            QueryDef("GetListing", "USERS", "read", 1, partition_param_index=0),
            QueryDef("UpdateListing", "USERS", "write", 2, partition_param_index=1),
            # mode 1 path: read the buyer, then write the seller
            QueryDef("GetBuyer", "USERS", "read", 1, partition_param_index=0),
            QueryDef("PlaceMatch", "USERS", "write", 3, partition_param_index=2),
        ),
    )
    return Catalog(name, tables, (proc,), num_partitions)


def generate_branchy_like(config: BranchyConfig, seed: int) -> Workload:
    """Records for a procedure with two disjoint query paths.

    ``mode`` selects the path: 0 touches only the seller's partition, 1
    reads the buyer and writes the seller (two partitions whenever buyer
    and seller hash apart).  Aborts, when configured, follow the first
    (read) query of either path.
    """
    rng = random.Random(seed)
    P = config.num_partitions
    n_keys = P * config.users_per_partition
    records = []
    for txn_id in range(config.num_txns):
        two_part = rng.random() < config.two_partition_probability
        mode = 1 if two_part else 0
        buyer = rng.randrange(n_keys)
        seller = rng.randrange(n_keys)
        if two_part and P > 1:
            # make the buyer/seller pair genuinely cross-partition
            sp = hash_partition(seller, P)
            bp = rng.choice([p for p in range(P) if p != sp])
            buyer = bp + P * rng.randrange(config.users_per_partition)
        aborts = rng.random() < config.abort_probability
        amount = 1 + rng.randrange(50)
        if mode == 0:
            queries = [QueryInvocation("GetListing", (seller,))]
            if not aborts:
                queries.append(QueryInvocation("UpdateListing", (amount, seller)))
        else:
            queries = [QueryInvocation("GetBuyer", (buyer,))]
            if not aborts:
                queries.append(QueryInvocation("PlaceMatch", (amount, buyer, seller)))
        outcome = ABORTED if aborts else COMMITTED
        records.append(TraceRecord(txn_id, "PlaceAction", (mode, buyer, seller), tuple(queries), outcome))
    return Workload("branchy", tuple(records))
