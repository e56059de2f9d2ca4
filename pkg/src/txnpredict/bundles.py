"""Serialized bundles of trained artifacts.

A bundle packages everything prediction needs for a workload: the parameter
mappings plus either one global model per procedure or a clustered set of
models with its routing tree.  Bundles round-trip through a single JSON
document so the command-line pipeline can hand artifacts between steps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .catalog import Catalog, ProcedureDef
from .clustering import (
    ClusteredModels,
    clustered_from_dict,
    clustered_to_dict,
    feed_forward_select,
)
from .mapping import ParameterMapping, infer_mappings, mapping_from_dict, mapping_to_dict
from .markov import MarkovModel, build_model, model_from_dict, model_to_dict
from .trace import TraceRecord, Workload

GLOBAL = "global"
PARTITIONED = "partitioned"


class BundleError(ValueError):
    pass


@dataclass
class ModelBundle:
    kind: str  # GLOBAL or PARTITIONED
    catalog_ref: str
    mappings: dict  # procedure -> ParameterMapping
    models: dict = field(default_factory=dict)  # procedure -> MarkovModel
    clustered: dict = field(default_factory=dict)  # procedure -> ClusteredModels

    def procedures(self) -> list:
        source = self.models if self.kind == GLOBAL else self.clustered
        return sorted(source)

    def model_for_record(self, record: TraceRecord, procedure: ProcedureDef) -> MarkovModel:
        if self.kind == GLOBAL:
            return self.models[record.proc_name]
        return self.clustered[record.proc_name].model_for_record(record, procedure)

    def mapping_for(self, proc_name: str) -> ParameterMapping:
        return self.mappings[proc_name]


def build_global_bundle(workload: Workload, catalog: Catalog, accept_threshold: float = 0.9) -> ModelBundle:
    mappings = infer_mappings(workload, catalog, accept_threshold)
    models = {
        proc: build_model(proc, workload, catalog) for proc in sorted(workload.procedure_names())
    }
    return ModelBundle(GLOBAL, catalog.name, mappings, models=models)


def build_partitioned_bundle(
    workload: Workload,
    catalog: Catalog,
    threshold: float = 0.9,
    seed: int = 0,
    accept_threshold: float = 0.9,
) -> tuple:
    """Feed-forward-selected clustered models for every procedure.

    Returns ``(bundle, {procedure: SelectionResult})``.
    """
    mappings = infer_mappings(workload, catalog, accept_threshold)
    clustered = {}
    selections = {}
    for proc in sorted(workload.procedure_names()):
        result = feed_forward_select(
            workload, proc, catalog, mappings[proc], threshold=threshold, seed=seed
        )
        clustered[proc] = result.clustered
        selections[proc] = result
    bundle = ModelBundle(PARTITIONED, catalog.name, mappings, clustered=clustered)
    return bundle, selections


def bundle_to_dict(bundle: ModelBundle) -> dict:
    data = {
        "schema": f"txnpredict-bundle/v1/{bundle.kind}",
        "kind": bundle.kind,
        "catalog_ref": bundle.catalog_ref,
        "mappings": {name: mapping_to_dict(m) for name, m in sorted(bundle.mappings.items())},
    }
    if bundle.kind == GLOBAL:
        data["models"] = {name: model_to_dict(m) for name, m in sorted(bundle.models.items())}
    else:
        data["clustered"] = {
            name: clustered_to_dict(c) for name, c in sorted(bundle.clustered.items())
        }
    return data


def bundle_from_dict(data: dict) -> ModelBundle:
    kind = data.get("kind")
    if kind not in (GLOBAL, PARTITIONED):
        raise BundleError(f"unknown bundle kind: {kind!r}")
    mappings = {name: mapping_from_dict(m) for name, m in data["mappings"].items()}
    if kind == GLOBAL:
        models = {name: model_from_dict(m) for name, m in data["models"].items()}
        return ModelBundle(kind, data["catalog_ref"], mappings, models=models)
    clustered = {name: clustered_from_dict(c) for name, c in data["clustered"].items()}
    return ModelBundle(kind, data["catalog_ref"], mappings, clustered=clustered)


def save_bundle(bundle: ModelBundle, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(bundle_to_dict(bundle), fh, sort_keys=True)
        fh.write("\n")


def load_bundle(path) -> ModelBundle:
    with open(path, "r", encoding="utf-8") as fh:
        return bundle_from_dict(json.load(fh))
