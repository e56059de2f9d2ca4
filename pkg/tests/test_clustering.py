import math

import pytest

from txnpredict import (
    COMMITTED,
    Catalog,
    CostWeights,
    FeatureContext,
    NewOrderConfig,
    ProcParam,
    ProcedureDef,
    QueryDef,
    QueryInvocation,
    TableDef,
    TraceRecord,
    Workload,
    build_decision_tree,
    build_model,
    classify,
    cluster_em,
    compute_ranges,
    estimate_cost,
    extract_features,
    feature_instances,
    feed_forward_select,
    generate_neworder_like,
    infer_mappings,
    neworder_catalog,
    path_exact_rate,
)
from txnpredict.clustering import ClusteredModels, TreeNode, record_cost, tree_features


def _ctx(P=2, ranges=()):
    return FeatureContext(P, tuple(ranges))


def _no_record(params, txn_id=0):
    return TraceRecord(txn_id, "NewOrder", params, (QueryInvocation("GetWarehouse", (params[0],)),), COMMITTED)


def test_feature_vector_example():
    catalog = neworder_catalog(2)
    proc = catalog.procedure("NewOrder")
    rec = _no_record((0, (1001, 1002), (0, 1), (2, 7)))
    vec = extract_features(rec, proc, _ctx(ranges=[("w_id", 0, 7)]))
    assert vec["HASHVALUE(w_id)"] == 0.0
    assert vec["ARRAYLENGTH(w_id)"] is None
    assert vec["HASHVALUE(i_ids)"] is None
    assert vec["ARRAYLENGTH(i_ids)"] == 2.0
    assert vec["ARRAYLENGTH(i_w_ids)"] == 2.0
    assert vec["ARRAYLENGTH(i_qtys)"] == 2.0
    assert vec["NORMALIZEDVALUE(w_id)"] == 0.0
    assert vec["ISNULL(w_id)"] == 0.0


def test_all_same_hash_feature():
    catalog = neworder_catalog(2)
    proc = catalog.procedure("NewOrder")
    same = extract_features(_no_record((0, (1,), (3, 3, 3), (1,))), proc, _ctx())
    assert same["ARRAYALLSAMEHASH(i_w_ids)"] == 1.0
    mixed = extract_features(_no_record((0, (1,), (3, 4), (1,))), proc, _ctx())
    assert mixed["ARRAYALLSAMEHASH(i_w_ids)"] == 0.0


def test_empty_array_features():
    catalog = neworder_catalog(2)
    proc = catalog.procedure("NewOrder")
    vec = extract_features(_no_record((0, (), (), ())), proc, _ctx())
    assert vec["ARRAYLENGTH(i_ids)"] == 0.0
    assert vec["ARRAYALLSAMEHASH(i_ids)"] == 1.0  # vacuously uniform


def test_normalized_value_clamps():
    catalog = neworder_catalog(2)
    proc = catalog.procedure("NewOrder")
    ctx = _ctx(ranges=[("w_id", 2, 6)])
    lo = extract_features(_no_record((0, (), (), ())), proc, ctx)
    hi = extract_features(_no_record((9, (), (), ())), proc, ctx)
    mid = extract_features(_no_record((4, (), (), ())), proc, ctx)
    assert lo["NORMALIZEDVALUE(w_id)"] == 0.0
    assert hi["NORMALIZEDVALUE(w_id)"] == 1.0
    assert mid["NORMALIZEDVALUE(w_id)"] == pytest.approx(0.5)


def test_feature_instances_order():
    catalog = neworder_catalog(2)
    names = feature_instances(catalog.procedure("NewOrder"))
    assert names[0] == "NORMALIZEDVALUE(w_id)"
    assert len(names) == 20  # 4 parameters x 5 categories


# ---------------------------------------------------------------------------
# EM clustering


def _length_vectors(lengths):
    return [{"ARRAYLENGTH(i_ids)": float(n)} for n in lengths]


def test_identical_vectors_single_cluster():
    labels, clusterer = cluster_em(_length_vectors([2] * 40), ("ARRAYLENGTH(i_ids)",), seed=1)
    assert clusterer.k == 1
    assert set(labels) == {0}


def test_planted_groups_recovered():
    vectors = _length_vectors([2] * 30 + [8] * 30)
    labels, clusterer = cluster_em(vectors, ("ARRAYLENGTH(i_ids)",), seed=2)
    assert clusterer.k == 2
    first, second = set(labels[:30]), set(labels[30:])
    assert len(first) == 1 and len(second) == 1 and first != second


def test_clustering_deterministic():
    vectors = _length_vectors([2, 8] * 25)
    a = cluster_em(vectors, ("ARRAYLENGTH(i_ids)",), seed=3)[0]
    b = cluster_em(vectors, ("ARRAYLENGTH(i_ids)",), seed=3)[0]
    assert a == b


def test_tiny_input_single_cluster():
    labels, clusterer = cluster_em(_length_vectors([4]), ("ARRAYLENGTH(i_ids)",), seed=4)
    assert labels == [0] and clusterer.k == 1


def test_null_values_cluster_apart():
    vectors = [{"ARRAYLENGTH(x)": 3.0}] * 20 + [{"ARRAYLENGTH(x)": None}] * 20
    labels, clusterer = cluster_em(vectors, ("ARRAYLENGTH(x)",), seed=5)
    assert clusterer.k == 2
    assert len(set(labels[:20])) == 1 and set(labels[:20]) != set(labels[20:])


# ---------------------------------------------------------------------------
# decision tree


def test_single_cluster_tree_is_leaf():
    vectors = _length_vectors([2, 2, 2])
    tree = build_decision_tree(vectors, [0, 0, 0], ("ARRAYLENGTH(i_ids)",))
    assert tree.is_leaf
    assert classify(tree, {"ARRAYLENGTH(i_ids)": 99.0}) == 0


def test_tree_splits_on_length():
    vectors = _length_vectors([2] * 20 + [8] * 20)
    labels = [0] * 20 + [1] * 20
    tree = build_decision_tree(vectors, labels, ("ARRAYLENGTH(i_ids)",))
    assert tree.feature == "ARRAYLENGTH(i_ids)"
    hits = sum(classify(tree, v) == l for v, l in zip(vectors, labels))
    assert hits == len(labels)


def test_tree_uses_hash_and_length():
    # clusters laid out on a grid over the first parameter's hash and the
    # second parameter's array length: the tree needs both features
    vectors = []
    labels = []
    for h in (0.0, 1.0):
        for ln in (1.0, 3.0):
            for _ in range(10):
                vectors.append({"HASHVALUE(w_id)": h, "ARRAYLENGTH(i_ids)": ln})
                labels.append(int(h) * 2 + (0 if ln == 1.0 else 1))
    fs = ("HASHVALUE(w_id)", "ARRAYLENGTH(i_ids)")
    tree = build_decision_tree(vectors, labels, fs)
    assert tree_features(tree) == set(fs)
    hits = sum(classify(tree, v) == l for v, l in zip(vectors, labels))
    assert hits == len(labels)


def test_tree_routes_nulls():
    vectors = [{"ARRAYLENGTH(x)": 1.0}] * 12 + [{"ARRAYLENGTH(x)": 5.0}] * 3
    labels = [0] * 12 + [1] * 3
    tree = build_decision_tree(vectors, labels, ("ARRAYLENGTH(x)",))
    # nulls follow the branch most non-null records took
    assert classify(tree, {"ARRAYLENGTH(x)": None}) == 0


# ---------------------------------------------------------------------------
# prediction cost


def _single_model_bundle(procedure, catalog, workload):
    model = build_model(procedure, workload, catalog)
    ctx = FeatureContext(catalog.num_partitions, ())
    return ClusteredModels(procedure, (), ctx, {0: model}, TreeNode(cluster=0))


def test_cost_zero_for_perfect_predictor():
    catalog = neworder_catalog(2)
    config = NewOrderConfig(num_partitions=2, num_txns=400, item_count_distribution={2: 1.0},
                            remote_warehouse_probability=0.0, abort_probability=0.0)
    workload = generate_neworder_like(config, seed=31)
    mapping = infer_mappings(workload, catalog)["NewOrder"]
    bundle = _single_model_bundle("NewOrder", catalog, workload)
    assert estimate_cost(bundle, mapping, workload.records, catalog, 0.9) == 0.0


def test_cost_counts_extra_locks():
    catalog = neworder_catalog(3)
    config = NewOrderConfig(num_partitions=3, num_txns=200, item_count_distribution={2: 1.0},
                            remote_warehouse_probability=0.0, abort_probability=0.0)
    workload = generate_neworder_like(config, seed=32)
    mapping = infer_mappings(workload, catalog)["NewOrder"]
    bundle = _single_model_bundle("NewOrder", catalog, workload)
    # threshold zero locks all three partitions; two are never used
    weights = CostWeights(lock_mismatch=5.0)
    one = record_cost(bundle.models[0], mapping, workload.records[0], catalog, 0.0, weights)
    assert one == 10.0
    total = estimate_cost(bundle, mapping, workload.records, catalog, 0.0, weights)
    assert total == 10.0 * len(workload.records)


def test_cost_monotone_in_weights():
    catalog = neworder_catalog(3)
    config = NewOrderConfig(num_partitions=3, num_txns=100, item_count_distribution={2: 1.0})
    workload = generate_neworder_like(config, seed=33)
    mapping = infer_mappings(workload, catalog)["NewOrder"]
    bundle = _single_model_bundle("NewOrder", catalog, workload)
    light = estimate_cost(bundle, mapping, workload.records, catalog, 0.0, CostWeights(lock_mismatch=1.0))
    heavy = estimate_cost(bundle, mapping, workload.records, catalog, 0.0, CostWeights(lock_mismatch=3.0))
    assert heavy == pytest.approx(3.0 * light)


from conftest import risky_catalog, risky_workload


def test_write_then_abort_saturates_cost():
    # rare aborts keep the abort probability under the cutoff, so the plan
    # elides undo; an aborted record then carries an unlogged write
    catalog = risky_catalog()
    workload = risky_workload()
    mapping = infer_mappings(workload, catalog)["Risky"]
    bundle = _single_model_bundle("Risky", catalog, workload)
    total = estimate_cost(bundle, mapping, workload.records, catalog, 0.9)
    assert math.isinf(total)
    aborted = next(r for r in workload.records if r.outcome == "aborted")
    assert math.isinf(record_cost(bundle.models[0], mapping, aborted, catalog, 0.9))
    committed = next(r for r in workload.records if r.outcome == COMMITTED)
    assert record_cost(bundle.models[0], mapping, committed, catalog, 0.9) == 0.0


# ---------------------------------------------------------------------------
# feed-forward selection


@pytest.fixture(scope="module")
def varied_length_setup():
    catalog = neworder_catalog(3)
    config = NewOrderConfig(
        num_partitions=3,
        num_txns=2400,
        item_count_distribution={1: 0.5, 2: 0.5},
        remote_warehouse_probability=0.4,
        abort_probability=0.0,
        warehouses_per_partition=2,
        independent_remote_items=True,
    )
    workload = generate_neworder_like(config, seed=34)
    mapping = infer_mappings(workload, catalog)["NewOrder"]
    return catalog, workload, mapping


def test_feed_forward_selects_array_length(varied_length_setup):
    catalog, workload, mapping = varied_length_setup
    result = feed_forward_select(workload, "NewOrder", catalog, mapping, threshold=0.9, seed=6)
    assert result.improved
    assert any(f.startswith("ARRAYLENGTH(") for f in result.feature_set)
    assert result.cost < result.baseline_cost
    assert len(result.clustered.models) >= 2


def test_feed_forward_deterministic(varied_length_setup):
    catalog, workload, mapping = varied_length_setup
    a = feed_forward_select(workload, "NewOrder", catalog, mapping, threshold=0.9, seed=6)
    b = feed_forward_select(workload, "NewOrder", catalog, mapping, threshold=0.9, seed=6)
    assert a.feature_set == b.feature_set
    assert a.cost == b.cost
    assert [(r.number, r.scored_sets) for r in a.rounds] == [
        (r.number, r.scored_sets) for r in b.rounds
    ]


def test_feed_forward_keeps_baseline_when_nothing_helps():
    catalog = neworder_catalog(2)
    config = NewOrderConfig(num_partitions=2, num_txns=600, item_count_distribution={2: 1.0},
                            remote_warehouse_probability=0.0, abort_probability=0.0)
    workload = generate_neworder_like(config, seed=35)
    mapping = infer_mappings(workload, catalog)["NewOrder"]
    result = feed_forward_select(workload, "NewOrder", catalog, mapping, threshold=0.9, seed=7)
    assert not result.improved
    assert result.feature_set == ()
    assert len(result.clustered.models) == 1
    assert result.cost == result.baseline_cost


def test_tree_total_over_training(varied_length_setup):
    catalog, workload, mapping = varied_length_setup
    result = feed_forward_select(workload, "NewOrder", catalog, mapping, threshold=0.9, seed=6)
    proc = catalog.procedure("NewOrder")
    for rec in workload.records[:400]:
        assert result.clustered.model_for_record(rec, proc) is not None


def test_clustered_never_worse_than_baseline(varied_length_setup):
    catalog, workload, mapping = varied_length_setup
    result = feed_forward_select(workload, "NewOrder", catalog, mapping, threshold=0.9, seed=8)
    assert result.cost <= result.baseline_cost
