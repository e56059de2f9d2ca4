"""Schema catalog: tables, stored procedures, and partition resolution.

The catalog is the static description of a partitioned database that the
rest of the library works against: which tables exist, which column each
table is partitioned on, and which parameterized queries each stored
procedure may issue.  It also provides the partition-resolution function
that maps a concrete query invocation to the set of partitions it touches.

Catalogs are immutable after construction and safe to share between any
number of readers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field


class CatalogError(ValueError):
    """Raised for malformed catalogs or invalid resolution requests."""


def hash_partition(value: int, num_partitions: int) -> int:
    """Map a non-negative integer key to a partition id.

    The mapping is exactly ``value % num_partitions`` using Python integer
    semantics, so it is stable across runs and platforms and trivial to
    recompute by hand.  Negative keys are rejected: synthetic workloads use
    non-negative keys only, which keeps the modulo unambiguous.
    """
    if num_partitions < 1:
        raise CatalogError(f"num_partitions must be >= 1, got {num_partitions}")
    if not isinstance(value, int) or isinstance(value, bool):
        raise CatalogError(f"partition key must be an integer, got {value!r}")
    if value < 0:
        raise CatalogError(f"partition key must be non-negative, got {value}")
    return value % num_partitions


@dataclass(frozen=True)
class TableDef:
    name: str
    partition_column: str
    columns: tuple[str, ...]

    def __post_init__(self):
        if self.partition_column not in self.columns:
            raise CatalogError(
                f"table {self.name}: partition column {self.partition_column!r} "
                f"not among columns {list(self.columns)}"
            )


@dataclass(frozen=True)
class QueryDef:
    """One named parameterized query of a stored procedure.

    Exactly one of ``partition_param_index`` / ``is_broadcast`` identifies
    how the query routes: either one parameter position is compared against
    the target table's partition column, or the query runs on every
    partition.
    """

    name: str
    target_table: str
    kind: str  # "read" or "write"
    num_params: int
    partition_param_index: int | None = None
    is_broadcast: bool = False

    def __post_init__(self):
        if self.kind not in ("read", "write"):
            raise CatalogError(f"query {self.name}: kind must be read/write, got {self.kind!r}")
        if self.num_params < 0:
            raise CatalogError(f"query {self.name}: negative num_params")
        has_param = self.partition_param_index is not None
        if has_param == self.is_broadcast:
            raise CatalogError(
                f"query {self.name}: exactly one of partition_param_index / is_broadcast required"
            )
        if has_param and not (0 <= self.partition_param_index < self.num_params):
            raise CatalogError(
                f"query {self.name}: partition_param_index {self.partition_param_index} "
                f"out of range for {self.num_params} params"
            )

    @property
    def is_write(self) -> bool:
        return self.kind == "write"


@dataclass(frozen=True)
class ProcParam:
    name: str
    is_array: bool = False


@dataclass(frozen=True)
class ProcedureDef:
    name: str
    parameters: tuple[ProcParam, ...]
    queries: tuple[QueryDef, ...]

    def __post_init__(self):
        if not self.queries:
            raise CatalogError(f"procedure {self.name}: needs at least one query")
        pnames = [p.name for p in self.parameters]
        if len(set(pnames)) != len(pnames):
            raise CatalogError(f"procedure {self.name}: duplicate parameter names")
        qnames = [q.name for q in self.queries]
        if len(set(qnames)) != len(qnames):
            raise CatalogError(f"procedure {self.name}: duplicate query names")

    def query(self, name: str) -> QueryDef:
        for q in self.queries:
            if q.name == name:
                return q
        raise CatalogError(f"procedure {self.name}: no query named {name!r}")


@dataclass(frozen=True)
class Catalog:
    name: str
    tables: tuple[TableDef, ...]
    procedures: tuple[ProcedureDef, ...]
    num_partitions: int
    _procs_by_name: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.num_partitions < 1:
            raise CatalogError(f"num_partitions must be >= 1, got {self.num_partitions}")
        tnames = [t.name for t in self.tables]
        if len(set(tnames)) != len(tnames):
            raise CatalogError("duplicate table names")
        table_set = set(tnames)
        for proc in self.procedures:
            for q in proc.queries:
                if q.target_table not in table_set:
                    raise CatalogError(
                        f"query {proc.name}.{q.name} targets unknown table {q.target_table!r}"
                    )
        object.__setattr__(self, "_procs_by_name", {p.name: p for p in self.procedures})

    def procedure(self, name: str) -> ProcedureDef:
        try:
            return self._procs_by_name[name]
        except KeyError:
            raise CatalogError(f"no procedure named {name!r}") from None

    def has_procedure(self, name: str) -> bool:
        return name in self._procs_by_name

    @property
    def all_partitions(self) -> frozenset[int]:
        return frozenset(range(self.num_partitions))


def resolve_partitions(catalog: Catalog, query: QueryDef, params: list) -> frozenset[int]:
    """Return the set of partitions one query invocation accesses.

    Broadcast queries touch every partition; everything else touches the
    single partition hashed from the partition parameter.  Pure function of
    its arguments.
    """
    if len(params) != query.num_params:
        raise CatalogError(
            f"query {query.name}: expected {query.num_params} params, got {len(params)}"
        )
    if query.is_broadcast:
        return catalog.all_partitions
    key = params[query.partition_param_index]
    return frozenset((hash_partition(key, catalog.num_partitions),))


# ---------------------------------------------------------------------------
# JSON serialization.  The file format is documented in README.md.

def catalog_to_dict(catalog: Catalog) -> dict:
    return {
        "name": catalog.name,
        "num_partitions": catalog.num_partitions,
        "tables": [
            {
                "name": t.name,
                "partition_column": t.partition_column,
                "columns": list(t.columns),
            }
            for t in catalog.tables
        ],
        "procedures": [
            {
                "name": p.name,
                "parameters": [{"name": pp.name, "is_array": pp.is_array} for pp in p.parameters],
                "queries": [
                    {
                        "name": q.name,
                        "target_table": q.target_table,
                        "kind": q.kind,
                        "num_params": q.num_params,
                        "partition_param_index": q.partition_param_index,
                        "is_broadcast": q.is_broadcast,
                    }
                    for q in p.queries
                ],
            }
            for p in catalog.procedures
        ],
    }


def catalog_from_dict(data: dict) -> Catalog:
    try:
        tables = tuple(
            TableDef(t["name"], t["partition_column"], tuple(t["columns"]))
            for t in data["tables"]
        )
        procedures = tuple(
            ProcedureDef(
                p["name"],
                tuple(ProcParam(pp["name"], bool(pp.get("is_array", False))) for pp in p["parameters"]),
                tuple(
                    QueryDef(
                        q["name"],
                        q["target_table"],
                        q["kind"],
                        q["num_params"],
                        q.get("partition_param_index"),
                        bool(q.get("is_broadcast", False)),
                    )
                    for q in p["queries"]
                ),
            )
            for p in data["procedures"]
        )
        return Catalog(
            name=data.get("name", "catalog"),
            tables=tables,
            procedures=procedures,
            num_partitions=data["num_partitions"],
        )
    except (KeyError, TypeError) as exc:
        raise CatalogError(f"malformed catalog document: {exc}") from exc


def save_catalog(catalog: Catalog, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(catalog_to_dict(catalog), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_catalog(path) -> Catalog:
    with open(path, "r", encoding="utf-8") as fh:
        return catalog_from_dict(json.load(fh))
