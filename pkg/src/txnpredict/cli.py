"""Command-line pipeline.

Subcommands::

    generate          synthesize a workload trace (and its catalog)
    infer-mappings    learn parameter mappings, dump the coefficient matrix
    build-models      build global models + mappings into a bundle
    partition-models  feed-forward feature selection, clustered bundle
    estimate          print the path estimate and plan for one trace record
    evaluate          grade prediction accuracy (report CSV)
    simulate          run the engine simulator across strategies and sizes
    sweep             vary the confidence threshold at fixed cluster size

All outputs are CSV (with a leading ``# schema:`` comment line) or JSON and
are byte-identical across reruns with the same flags and seed.

Exit codes: 0 success, 1 usage error, 2 data error, 3 FAILED simulation.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from . import bundles, evaluate as evaluate_mod, sim as sim_mod
from .catalog import Catalog, CatalogError, load_catalog, save_catalog
from .clustering import CostWeights
from .estimator import EstimationError, estimate_initial_path, select_optimizations
from .mapping import all_coefficients
from .markov import ModelError
from .trace import TraceError, load_trace, save_trace
from .workloads import (
    BranchyConfig,
    NewOrderConfig,
    TatpConfig,
    branchy_catalog,
    generate_branchy_like,
    generate_neworder_like,
    generate_tatp_like,
    neworder_catalog,
    tatp_catalog,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_FAILED_SIM = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def _write_csv(path, schema: str, header, rows) -> None:
    lines = [f"# schema: txnpredict/{schema}/v1", ",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    text = "\n".join(lines) + "\n"
    if path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _write_json(path, payload) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _parse_item_counts(text: str) -> dict:
    out = {}
    for part in text.split(","):
        length, weight = part.split(":")
        out[int(length)] = float(weight)
    return out


def _load_config_file(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args) -> int:
    overrides = {}
    if args.config:
        overrides.update(_load_config_file(args.config))
    if "item_count_distribution" in overrides:
        overrides["item_count_distribution"] = {
            int(k): float(v) for k, v in overrides["item_count_distribution"].items()
        }
    if args.num_txns is not None:
        overrides["num_txns"] = args.num_txns
    if args.partitions is not None:
        overrides["num_partitions"] = args.partitions
    if args.abort_prob is not None:
        overrides["abort_probability"] = args.abort_prob
    if args.item_counts is not None:
        overrides["item_count_distribution"] = _parse_item_counts(args.item_counts)
    if args.remote_prob is not None:
        overrides["remote_warehouse_probability"] = args.remote_prob
    if args.single_fraction is not None:
        overrides["single_partition_fraction"] = args.single_fraction
    if args.two_partition_prob is not None:
        overrides["two_partition_probability"] = args.two_partition_prob
    overrides.setdefault("num_partitions", 2)
    overrides.setdefault("num_txns", 1000)

    kinds = {
        "neworder": (NewOrderConfig, generate_neworder_like, neworder_catalog),
        "tatp": (TatpConfig, generate_tatp_like, tatp_catalog),
        "branchy": (BranchyConfig, generate_branchy_like, branchy_catalog),
    }
    config_cls, generator, catalog_fn = kinds[args.kind]
    valid_fields = {f.name for f in dataclasses.fields(config_cls)}
    unknown = set(overrides) - valid_fields
    if unknown:
        raise UsageError(f"unknown {args.kind} config keys: {sorted(unknown)}")
    config = config_cls(**overrides)
    workload = generator(config, args.seed)
    catalog = catalog_fn(config.num_partitions)
    save_trace(workload, args.out)
    catalog_out = args.catalog_out or f"{args.out}.catalog.json"
    save_catalog(catalog, catalog_out)
    print(f"wrote {len(workload)} records to {args.out}; catalog to {catalog_out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# infer-mappings


def cmd_infer_mappings(args) -> int:
    catalog = load_catalog(args.catalog)
    workload = load_trace(args.trace, catalog)
    coefficients = all_coefficients(workload, catalog)
    rows = []
    for proc in sorted(coefficients):
        for key, coeff in sorted(
            coefficients[proc].items(),
            key=lambda kv: (
                kv[0].query_name,
                kv[0].query_param_index,
                kv[0].invocation if kv[0].invocation is not None else -1,
                kv[0].proc_param_index,
                kv[0].element_role,
            ),
        ):
            rows.append(
                (
                    proc,
                    key.proc_param_index,
                    key.element_role,
                    key.query_name,
                    key.invocation if key.invocation is not None else "",
                    key.query_param_index,
                    coeff,
                    1 if coeff > args.threshold else 0,
                )
            )
    _write_csv(
        args.out,
        "mapping-coefficients",
        (
            "procedure", "proc_param_index", "element_role", "query_name",
            "invocation", "query_param_index", "coefficient", "retained",
        ),
        rows,
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# build-models / partition-models


def cmd_build_models(args) -> int:
    catalog = load_catalog(args.catalog)
    workload = load_trace(args.trace, catalog)
    bundle = bundles.build_global_bundle(workload, catalog, accept_threshold=args.accept_threshold)
    bundles.save_bundle(bundle, args.out)
    total_vertices = sum(len(m.vertices) for m in bundle.models.values())
    print(f"wrote global bundle ({len(bundle.models)} models, {total_vertices} vertices) to {args.out}")
    return EXIT_OK


def cmd_partition_models(args) -> int:
    catalog = load_catalog(args.catalog)
    workload = load_trace(args.trace, catalog)
    bundle, selections = bundles.build_partitioned_bundle(
        workload, catalog, threshold=args.threshold, seed=args.seed,
        accept_threshold=args.accept_threshold,
    )
    bundles.save_bundle(bundle, args.out)
    rows = []
    for proc in sorted(selections):
        sel = selections[proc]
        rows.append((proc, "baseline", "", sel.baseline_cost, 0))
        for rnd in sel.rounds:
            for cost, fs in rnd.scored_sets:
                rows.append((proc, str(rnd.number), "+".join(fs), cost, 0))
        rows.append((proc, "selected", "+".join(sel.feature_set), sel.cost, 1))
    if args.rounds_out:
        _write_csv(
            args.rounds_out,
            "selection-rounds",
            ("procedure", "round", "feature_set", "cost", "selected"),
            rows,
        )
    print(f"wrote partitioned bundle to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# estimate


def cmd_estimate(args) -> int:
    catalog = load_catalog(args.catalog)
    workload = load_trace(args.trace, catalog)
    bundle = bundles.load_bundle(args.bundle)
    if not (0 <= args.index < len(workload.records)):
        raise TraceError(f"record index {args.index} out of range (trace has {len(workload)})")
    record = workload.records[args.index]
    proc = catalog.procedure(record.proc_name)
    model = bundle.model_for_record(record, proc)
    mapping = bundle.mapping_for(record.proc_name)
    estimate = estimate_initial_path(model, mapping, record.proc_params, catalog)
    plan = select_optimizations(estimate, model, args.threshold)
    states = []
    for vid in estimate.vertices:
        v = model.vertex(vid)
        if v.kind == "state":
            states.append(
                {
                    "query": v.state.query_name,
                    "counter": v.state.counter,
                    "partitions": list(v.state.partitions),
                    "previous": list(v.state.previous),
                }
            )
        else:
            states.append({"terminal": v.kind})
    payload = {
        "txn_id": record.txn_id,
        "procedure": record.proc_name,
        "estimate": {
            "path": states,
            "edge_probabilities": estimate.edge_probabilities,
            "edge_confidences": estimate.edge_confidences,
            "confidence_prefix": estimate.confidence_prefix,
        },
        "plan": {
            "base_partition": plan.base_partition,
            "lock_set": {str(p): c for p, c in sorted(plan.lock_set.items())},
            "disable_undo": plan.disable_undo,
            "abort_probability": plan.abort_probability,
            "finish_points": {
                str(p): {"index": i, "confidence": c}
                for p, (i, c) in sorted(plan.finish_points.items())
            },
            "threshold": plan.threshold_used,
        },
    }
    _write_json(args.out, payload)
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate


_EVAL_HEADER = (
    "variant", "procedure", "records", "op1_pct", "op2_pct", "op3_pct", "op4_pct",
    "path_exact_pct", "all_ok_pct", "op3_false_disables",
)


def _report_rows(report) -> list:
    rows = []
    for name in sorted(report.procedures):
        p = report.procedures[name]
        rows.append(
            (
                report.variant, name, p.records, p.pct(p.op1), p.pct(p.op2), p.pct(p.op3),
                p.pct(p.op4), p.pct(p.exact), p.pct(p.all_ok), p.op3_false_disables,
            )
        )
    total = report.total_records()
    if total:
        agg = lambda attr: 100.0 * sum(getattr(p, attr) for p in report.procedures.values()) / total
        rows.append(
            (
                report.variant, "__total__", total, agg("op1"), agg("op2"), agg("op3"),
                agg("op4"), agg("exact"), report.total_pct(), report.total_false_disables(),
            )
        )
    else:
        rows.append((report.variant, "__total__", 0, 100.0, 100.0, 100.0, 100.0, 100.0, 100.0, 0))
    return rows


def cmd_evaluate(args) -> int:
    catalog = load_catalog(args.catalog)
    workload = load_trace(args.trace, catalog)
    rows = []
    if args.bundle:
        bundle = bundles.load_bundle(args.bundle)
        report = evaluate_mod.evaluate_bundle(bundle, workload, catalog, args.threshold)
        rows.extend(_report_rows(report))
    else:
        reports = evaluate_mod.evaluate_protocol(workload, catalog, args.threshold, seed=args.seed)
        for variant in ("global", "partitioned"):
            rows.extend(_report_rows(reports[variant]))
    _write_csv(args.out, "evaluation", _EVAL_HEADER, rows)
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate / sweep


_SIM_HEADER = (
    "strategy", "partitions", "threshold", "seed", "throughput", "committed",
    "committed_measured", "aborted_user", "restarts", "spawned", "failed",
    "undo_disabled", "runtime_undo_disabled", "speculative_commits",
    "full_lock_fraction", "op1_rate", "op2_rate", "op4_rate",
)


def _sim_row(res) -> tuple:
    return (
        res.strategy, res.num_partitions, res.threshold, res.seed, res.throughput,
        res.committed, res.committed_measured, res.aborted_user, res.restarts,
        res.spawned, res.failed, res.undo_disabled, res.runtime_undo_disabled,
        res.speculative_commits, res.full_lock_fraction, res.op1_rate, res.op2_rate,
        res.op4_rate,
    )


def _catalog_with_partitions(catalog: Catalog, P: int) -> Catalog:
    if catalog.num_partitions == P:
        return catalog
    return dataclasses.replace(catalog, num_partitions=P)


def cmd_simulate(args) -> int:
    catalog = load_catalog(args.catalog)
    strategies = args.strategies.split(",")
    for s in strategies:
        if s not in sim_mod.STRATEGIES:
            raise UsageError(f"unknown strategy {s!r} (choose from {', '.join(sim_mod.STRATEGIES)})")
    partition_list = [int(p) for p in args.partitions.split(",")]
    rows = []
    failed = False
    for P in partition_list:
        cat_p = _catalog_with_partitions(catalog, P)
        workload = load_trace(args.trace, cat_p)
        global_bundle = None
        partitioned_bundle = None
        if sim_mod.HOUDINI_GLOBAL in strategies or sim_mod.HOUDINI_PARTITIONED in strategies:
            global_bundle = bundles.build_global_bundle(workload, cat_p)
        if sim_mod.HOUDINI_PARTITIONED in strategies:
            partitioned_bundle, _ = bundles.build_partitioned_bundle(
                workload, cat_p, threshold=args.threshold, seed=args.seed
            )
        config = sim_mod.SimConfig(
            num_partitions=P,
            duration=args.duration,
            clients_per_partition=args.clients,
            seed=args.seed,
            threshold=args.threshold,
        )
        for strategy in strategies:
            bundle = None
            if strategy == sim_mod.HOUDINI_GLOBAL:
                bundle = global_bundle
            elif strategy == sim_mod.HOUDINI_PARTITIONED:
                bundle = partitioned_bundle
            result = sim_mod.run_simulation(config, workload, strategy, cat_p, bundle)
            failed = failed or result.failed
            rows.append(_sim_row(result))
    _write_csv(args.out, "simulation", _SIM_HEADER, rows)
    return EXIT_FAILED_SIM if failed else EXIT_OK


def cmd_sweep(args) -> int:
    catalog = load_catalog(args.catalog)
    P = args.partitions
    cat_p = _catalog_with_partitions(catalog, P)
    workload = load_trace(args.trace, cat_p)
    if args.strategy not in (sim_mod.HOUDINI_GLOBAL, sim_mod.HOUDINI_PARTITIONED):
        raise UsageError("sweep strategy must be houdini_global or houdini_partitioned")
    if args.strategy == sim_mod.HOUDINI_GLOBAL:
        bundle = bundles.build_global_bundle(workload, cat_p)
    else:
        bundle, _ = bundles.build_partitioned_bundle(workload, cat_p, seed=args.seed)
    thresholds = [float(t) for t in args.thresholds.split(",")]
    config = sim_mod.SimConfig(
        num_partitions=P, duration=args.duration, clients_per_partition=args.clients,
        seed=args.seed,
    )
    results = sim_mod.sweep_confidence(config, workload, cat_p, bundle, thresholds, args.strategy)
    rows = [_sim_row(res) for _, res in results]
    failed = any(res.failed for _, res in results)
    _write_csv(args.out, "sweep", _SIM_HEADER, rows)
    return EXIT_FAILED_SIM if failed else EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    parser = _Parser(prog="txnpredict", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="synthesize a workload trace")
    p.add_argument("--kind", choices=("neworder", "tatp", "branchy"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--catalog-out")
    p.add_argument("--config", help="JSON config file; flags override its keys")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--partitions", type=int)
    p.add_argument("--num-txns", type=int)
    p.add_argument("--abort-prob", type=float)
    p.add_argument("--item-counts", help='neworder: "length:weight,..."')
    p.add_argument("--remote-prob", type=float, help="neworder: remote-warehouse probability")
    p.add_argument("--single-fraction", type=float, help="tatp: single-partition share")
    p.add_argument("--two-partition-prob", type=float, help="branchy: cross-partition share")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("infer-mappings", help="dump the mapping coefficient matrix")
    p.add_argument("--trace", required=True)
    p.add_argument("--catalog", required=True)
    p.add_argument("--threshold", type=float, default=0.9)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_infer_mappings)

    p = sub.add_parser("build-models", help="build a global model bundle")
    p.add_argument("--trace", required=True)
    p.add_argument("--catalog", required=True)
    p.add_argument("--accept-threshold", type=float, default=0.9)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_models)

    p = sub.add_parser("partition-models", help="feed-forward clustered bundle")
    p.add_argument("--trace", required=True)
    p.add_argument("--catalog", required=True)
    p.add_argument("--threshold", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--accept-threshold", type=float, default=0.9)
    p.add_argument("--out", required=True)
    p.add_argument("--rounds-out", help="per-round cost table CSV")
    p.set_defaults(func=cmd_partition_models)

    p = sub.add_parser("estimate", help="print estimate and plan for one record")
    p.add_argument("--bundle", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--catalog", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--threshold", type=float, default=0.9)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("evaluate", help="accuracy report CSV")
    p.add_argument("--trace", required=True)
    p.add_argument("--catalog", required=True)
    p.add_argument("--threshold", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bundle", help="evaluate this bundle on the whole trace instead of the half/half protocol")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("simulate", help="throughput across strategies and cluster sizes")
    p.add_argument("--trace", required=True)
    p.add_argument("--catalog", required=True)
    p.add_argument("--strategies", default=",".join(sim_mod.STRATEGIES))
    p.add_argument("--partitions", default="2,4,8,16")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--duration", type=int, default=10_000)
    p.add_argument("--clients", type=int, default=4)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="throughput across confidence thresholds")
    p.add_argument("--trace", required=True)
    p.add_argument("--catalog", required=True)
    p.add_argument("--partitions", type=int, default=16)
    p.add_argument("--thresholds", default="0,0.1,0.3,0.5,0.7,0.9,1")
    p.add_argument("--strategy", default=sim_mod.HOUDINI_GLOBAL)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--duration", type=int, default=10_000)
    p.add_argument("--clients", type=int, default=4)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CatalogError, TraceError, ModelError, EstimationError, bundles.BundleError,
            sim_mod.SimError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
