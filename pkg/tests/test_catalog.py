import pytest

from txnpredict import (
    Catalog,
    CatalogError,
    ProcParam,
    ProcedureDef,
    QueryDef,
    TableDef,
    hash_partition,
    load_catalog,
    neworder_catalog,
    resolve_partitions,
    save_catalog,
)


def test_hash_partition_zero():
    assert hash_partition(0, 2) == 0


def test_hash_partition_modulo():
    assert hash_partition(7, 2) == 1


def test_hash_partition_large_key():
    assert hash_partition(1001, 16) == 9


def test_hash_partition_rejects_negative():
    with pytest.raises(CatalogError):
        hash_partition(-1, 4)


def test_hash_partition_rejects_non_integer():
    with pytest.raises(CatalogError):
        hash_partition("7", 4)


def test_resolve_single_partition():
    catalog = neworder_catalog(2)
    q = catalog.procedure("NewOrder").query("GetWarehouse")
    assert resolve_partitions(catalog, q, [0]) == frozenset({0})


def test_resolve_broadcast_touches_all():
    catalog = Catalog(
        "c",
        (TableDef("T", "K", ("K",)),),
        (
            ProcedureDef(
                "P",
                (ProcParam("x"),),
                (QueryDef("Scan", "T", "read", 1, is_broadcast=True),),
            ),
        ),
        num_partitions=16,
    )
    q = catalog.procedure("P").query("Scan")
    assert resolve_partitions(catalog, q, [123]) == frozenset(range(16))


def test_resolve_checkstock_like():
    catalog = neworder_catalog(16)
    q = catalog.procedure("NewOrder").query("CheckStock")
    # oracle: recompute through hash_partition
    assert resolve_partitions(catalog, q, [1001, 5]) == frozenset({hash_partition(1001, 16)})
    assert resolve_partitions(catalog, q, [1001, 5]) == frozenset({9})


def test_resolve_is_pure_and_sized():
    catalog = neworder_catalog(8)
    proc = catalog.procedure("NewOrder")
    for qname, params in (("GetWarehouse", [5]), ("UpdateStock", [3, 11, 1002])):
        q = proc.query(qname)
        first = resolve_partitions(catalog, q, params)
        assert first == resolve_partitions(catalog, q, params)
        assert len(first) == 1


def test_resolve_validates_param_count():
    catalog = neworder_catalog(2)
    q = catalog.procedure("NewOrder").query("CheckStock")
    with pytest.raises(CatalogError):
        resolve_partitions(catalog, q, [1])


def test_partition_param_must_be_integer():
    catalog = neworder_catalog(2)
    q = catalog.procedure("NewOrder").query("GetWarehouse")
    with pytest.raises(CatalogError):
        resolve_partitions(catalog, q, ["zero"])


def test_querydef_requires_exactly_one_routing():
    with pytest.raises(CatalogError):
        QueryDef("Q", "T", "read", 1)  # neither partition param nor broadcast
    with pytest.raises(CatalogError):
        QueryDef("Q", "T", "read", 1, partition_param_index=0, is_broadcast=True)


def test_table_partition_column_membership():
    with pytest.raises(CatalogError):
        TableDef("T", "MISSING", ("A", "B"))


def test_catalog_rejects_unknown_target_table():
    with pytest.raises(CatalogError):
        Catalog(
            "c",
            (TableDef("T", "K", ("K",)),),
            (
                ProcedureDef(
                    "P",
                    (ProcParam("x"),),
                    (QueryDef("Q", "NOPE", "read", 1, partition_param_index=0),),
                ),
            ),
            num_partitions=2,
        )


def test_catalog_roundtrip(tmp_path):
    catalog = neworder_catalog(4)
    path = tmp_path / "catalog.json"
    save_catalog(catalog, path)
    loaded = load_catalog(path)
    assert loaded == catalog
