import pytest

from txnpredict import (
    ABORTED,
    COMMITTED,
    NewOrderConfig,
    RuntimeCounters,
    TxnSession,
    Workload,
    build_model,
    check_drift,
    estimate_initial_path,
    first_divergence,
    generate_neworder_like,
    infer_mappings,
    make_state,
    neworder_catalog,
    new_model,
    path_exact,
    select_optimizations,
    track_execution,
)
from txnpredict.estimator import EstimationError, PathLengthExceeded
from txnpredict.markov import record_states


@pytest.fixture(scope="module")
def mixed_len_setup():
    catalog = neworder_catalog(2)
    config = NewOrderConfig(
        num_partitions=2,
        num_txns=2000,
        item_count_distribution={1: 0.7, 2: 0.3},
        remote_warehouse_probability=0.0,
        abort_probability=0.0,
    )
    workload = generate_neworder_like(config, seed=13)
    mapping = infer_mappings(workload, catalog)["NewOrder"]
    model = build_model("NewOrder", workload, catalog)
    return catalog, workload, mapping, model


@pytest.fixture(scope="module")
def fixed_len_setup(neworder_p2, neworder_p2_mappings):
    catalog, workload = neworder_p2
    model = build_model("NewOrder", workload, catalog)
    return catalog, workload, neworder_p2_mappings["NewOrder"], model


def test_linear_path_has_full_confidence(fixed_len_setup):
    catalog, workload, mapping, model = fixed_len_setup
    # a committed local record is fully determined by its parameters
    rec = next(
        r for r in workload.records
        if r.outcome == COMMITTED and set(r.proc_params[2]) == {r.proc_params[0]}
    )
    estimate = estimate_initial_path(model, mapping, rec.proc_params, catalog)
    assert path_exact(estimate, model, rec, catalog)
    assert all(c <= 1.0 for c in estimate.confidence_prefix)


def test_empty_model_rejected():
    model = new_model("NewOrder", 2)
    model.frozen = True
    with pytest.raises(EstimationError):
        estimate_initial_path(model, None, (0, (), (), ()), neworder_catalog(2))


def test_path_length_guard(fixed_len_setup):
    catalog, workload, mapping, model = fixed_len_setup
    rec = workload.records[0]
    with pytest.raises(PathLengthExceeded):
        estimate_initial_path(model, mapping, rec.proc_params, catalog, max_length=2)


def test_branch_ambiguity_takes_greater_weight(mixed_len_setup):
    # with one- and two-item orders pooled in one model, both the second
    # stock check and the order insert are valid after the first check; the
    # heavier edge (the short order) wins and mispredicts two-item orders
    catalog, workload, mapping, model = mixed_len_setup
    rec = next(r for r in workload.records if len(r.proc_params[1]) == 2)
    estimate = estimate_initial_path(model, mapping, rec.proc_params, catalog)
    assert not path_exact(estimate, model, rec, catalog)
    div = first_divergence(estimate, model, rec, catalog)
    assert div is not None
    index, estimated, actual = div
    assert index == 2
    assert estimated[0] == "InsertOrder"
    assert actual[0] == "CheckStock" and actual[1] == 1


def test_length_specific_model_fixes_ambiguity(mixed_len_setup):
    catalog, workload, mapping, _ = mixed_len_setup
    two_item = Workload(
        workload.catalog_ref,
        tuple(r for r in workload.records if len(r.proc_params[1]) == 2),
    )
    model2 = build_model("NewOrder", two_item, catalog)
    rec = two_item.records[0]
    estimate = estimate_initial_path(model2, mapping, rec.proc_params, catalog)
    assert path_exact(estimate, model2, rec, catalog)


def test_estimates_exact_on_determined_workload(fixed_len_setup):
    # every record's parameters fully determine its path (fixed length,
    # mapped warehouse keys): estimates match and lock sets are complete
    catalog, workload, mapping, model = fixed_len_setup
    checked = 0
    for rec in workload.records[:300]:
        if rec.outcome != COMMITTED:
            continue
        estimate = estimate_initial_path(model, mapping, rec.proc_params, catalog)
        assert path_exact(estimate, model, rec, catalog)
        plan = select_optimizations(estimate, model, 0.9)
        accessed = set()
        for st in record_states(rec, catalog):
            accessed |= set(st.partitions)
        assert set(plan.lock_set) == accessed
        checked += 1
    assert checked > 200


def test_confidence_prefix_non_increasing(mixed_len_setup):
    catalog, workload, mapping, model = mixed_len_setup
    for rec in workload.records[:50]:
        estimate = estimate_initial_path(model, mapping, rec.proc_params, catalog)
        for a, b in zip(estimate.confidence_prefix, estimate.confidence_prefix[1:]):
            assert b <= a + 1e-12


def test_min_confidence_mode(mixed_len_setup):
    catalog, workload, mapping, model = mixed_len_setup
    rec = workload.records[0]
    est = estimate_initial_path(model, mapping, rec.proc_params, catalog, confidence_mode="min")
    for i, prefix in enumerate(est.confidence_prefix):
        expected = min([1.0] + est.edge_confidences[:i])
        assert prefix == pytest.approx(expected)


# ---------------------------------------------------------------------------
# optimization selection


def test_threshold_zero_locks_everything(fixed_len_setup):
    catalog, workload, mapping, model = fixed_len_setup
    rec = workload.records[0]
    estimate = estimate_initial_path(model, mapping, rec.proc_params, catalog)
    plan = select_optimizations(estimate, model, 0.0)
    assert set(plan.lock_set) == set(range(2))
    assert not plan.disable_undo  # multi-partition plans keep the undo log


def test_single_partition_plan(fixed_len_setup):
    catalog, workload, mapping, model = fixed_len_setup
    rec = next(
        r for r in workload.records
        if r.outcome == COMMITTED and set(r.proc_params[2]) == {r.proc_params[0]}
    )
    estimate = estimate_initial_path(model, mapping, rec.proc_params, catalog)
    plan = select_optimizations(estimate, model, 0.9)
    home = rec.proc_params[0] % 2
    assert plan.base_partition == home
    assert set(plan.lock_set) == {home}
    assert plan.single_partition


def test_abort_cutoff_both_directions(fixed_len_setup):
    # entry-state abort probability sits near 0.01: a 0.95 threshold leaves
    # a 0.05 cutoff (elide the log), a 0.995 threshold does not
    catalog, workload, mapping, model = fixed_len_setup
    rec = next(
        r for r in workload.records
        if r.outcome == COMMITTED and set(r.proc_params[2]) == {r.proc_params[0]}
    )
    estimate = estimate_initial_path(model, mapping, rec.proc_params, catalog)
    lo = select_optimizations(estimate, model, 0.95)
    assert 0.0 < lo.abort_probability <= 0.05
    assert lo.disable_undo
    hi = select_optimizations(estimate, model, 0.995)
    assert not hi.disable_undo


def test_threshold_monotonicity(fixed_len_setup):
    catalog, workload, mapping, model = fixed_len_setup
    thresholds = [0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 0.99, 1.0]
    for rec in workload.records[:40]:
        estimate = estimate_initial_path(model, mapping, rec.proc_params, catalog)
        plans = [select_optimizations(estimate, model, th) for th in thresholds]
        for lo, hi in zip(plans, plans[1:]):
            assert set(hi.lock_set) <= set(lo.lock_set)
            for p, (idx, _) in hi.finish_points.items():
                assert p in lo.finish_points
                assert lo.finish_points[p][0] <= idx
            # above zero the lock set is stable, so a shrinking abort cutoff
            # can only withdraw the elision (threshold zero locks everything
            # and structurally forbids it)
            if hi.disable_undo and lo.threshold_used > 0.0:
                assert lo.disable_undo


def test_base_partition_tie_breaks_low(fixed_len_setup):
    catalog, workload, mapping, model = fixed_len_setup
    # remote record: most accesses stay home, so home wins regardless of id
    rec = next(
        r for r in workload.records
        if r.outcome == COMMITTED and set(r.proc_params[2]) != {r.proc_params[0]}
    )
    estimate = estimate_initial_path(model, mapping, rec.proc_params, catalog)
    plan = select_optimizations(estimate, model, 0.9)
    assert plan.base_partition == rec.proc_params[0] % 2


# ---------------------------------------------------------------------------
# runtime tracking


def _replay(session, rec, catalog):
    updates = []
    for st in record_states(rec, catalog):
        updates.extend(session.track(st.query_name, st.partitions))
    return updates


def test_tracking_follows_estimate_without_deviation(fixed_len_setup):
    catalog, workload, mapping, model = fixed_len_setup
    rec = next(r for r in workload.records if r.outcome == COMMITTED)
    estimate = estimate_initial_path(model, mapping, rec.proc_params, catalog)
    session = TxnSession(model, 0.9, estimate=estimate)
    _replay(session, rec, catalog)
    assert not session.deviated
    session.finish(rec.outcome)
    with pytest.raises(EstimationError):
        session.track("GetWarehouse", frozenset({0}))


def test_disable_undo_emitted_once(fixed_len_setup):
    catalog, workload, mapping, model = fixed_len_setup
    rec = next(r for r in workload.records if r.outcome == COMMITTED)
    session = TxnSession(model, 0.9)
    updates = _replay(session, rec, catalog)
    disables = [u for u in updates if u.kind == "disable_undo"]
    assert len(disables) == 1
    # fires at the first state past the abort branch (the order insert)
    assert disables[0].path_index == len(rec.proc_params[1]) + 1


def test_finish_threshold_drives_reporting(fixed_len_setup):
    catalog, workload, mapping, model = fixed_len_setup
    rec = next(
        r for r in workload.records
        if r.outcome == COMMITTED
        and r.proc_params[0] % 2 == 0
        and set(r.proc_params[2]) == {r.proc_params[0]}
    )
    states = record_states(rec, catalog)
    first = states[0]
    finish_other = model.vertex(model.lookup(first)).table.finish[1]
    assert finish_other == pytest.approx(0.95, abs=0.03)

    session = TxnSession(model, 0.9)
    updates = session.track(first.query_name, first.partitions)
    assert any(u.kind == "partition_finished" and u.partition == 1 for u in updates)

    strict = TxnSession(model, 0.96)
    updates = strict.track(first.query_name, first.partitions)
    assert not any(u.kind == "partition_finished" and u.partition == 1 for u in updates)


def test_finish_reported_once(fixed_len_setup):
    catalog, workload, mapping, model = fixed_len_setup
    rec = next(
        r for r in workload.records
        if r.outcome == COMMITTED and set(r.proc_params[2]) == {r.proc_params[0]}
    )
    session = TxnSession(model, 0.9)
    updates = _replay(session, rec, catalog)
    other = 1 - rec.proc_params[0] % 2
    finishes = [u for u in updates if u.kind == "partition_finished" and u.partition == other]
    assert len(finishes) == 1


def test_placeholder_state_stops_updates(fixed_len_setup):
    catalog, workload, mapping, model = fixed_len_setup
    session = TxnSession(model, 0.9)
    updates = session.track("UpdateStock", frozenset({0}))  # never first in a real path
    assert session.saw_placeholder
    assert [u.kind for u in updates] == []  # no estimate, no table: nothing known


def test_deviation_flagged_once(fixed_len_setup):
    catalog, workload, mapping, model = fixed_len_setup
    rec = next(r for r in workload.records if r.outcome == COMMITTED)
    estimate = estimate_initial_path(model, mapping, rec.proc_params, catalog)
    session = TxnSession(model, 0.9, estimate=estimate)
    updates = []
    updates += session.track("UpdateStock", frozenset({0}))
    updates += session.track("UpdateStock", frozenset({0}))
    deviations = [u for u in updates if u.kind == "deviation"]
    assert len(deviations) == 1 and session.deviated


# ---------------------------------------------------------------------------
# drift detection and recompute


def _stream_sessions(model, catalog, counters, records, threshold=0.9):
    for rec in records:
        session = TxnSession(model, threshold, counters=counters)
        for st in record_states(rec, catalog):
            session.track(st.query_name, st.partitions)
        session.finish(rec.outcome)


def test_no_drift_on_stationary_stream():
    catalog = neworder_catalog(2)
    config = NewOrderConfig(num_partitions=2, num_txns=1500,
                            item_count_distribution={1: 0.5, 2: 0.5})
    workload = generate_neworder_like(config, seed=21)
    model = build_model("NewOrder", Workload("neworder", workload.records[:1000]), catalog)
    counters = RuntimeCounters()
    _stream_sessions(model, catalog, counters, workload.records[1000:])
    result = check_drift(model, counters, catalog)
    assert result.in_sync and not result.recompute_triggered
    assert result.model is model


def test_zero_observations_in_sync():
    catalog = neworder_catalog(2)
    config = NewOrderConfig(num_partitions=2, num_txns=100)
    workload = generate_neworder_like(config, seed=22)
    model = build_model("NewOrder", workload, catalog)
    result = check_drift(model, RuntimeCounters(), catalog)
    assert result.in_sync


def test_shift_triggers_recompute_and_recovery():
    catalog = neworder_catalog(2)
    old = generate_neworder_like(
        NewOrderConfig(num_partitions=2, num_txns=150, item_count_distribution={2: 1.0}),
        seed=23,
    )
    new = generate_neworder_like(
        NewOrderConfig(num_partitions=2, num_txns=800, item_count_distribution={3: 1.0}),
        seed=24,
    )
    mapping = infer_mappings(old, catalog)["NewOrder"]
    model = build_model("NewOrder", old, catalog)
    counters = RuntimeCounters()

    recompute_at = None
    processed = 0
    for chunk_start in range(0, len(new.records), 50):
        chunk = new.records[chunk_start : chunk_start + 50]
        _stream_sessions(model, catalog, counters, chunk)
        processed += len(chunk)
        result = check_drift(model, counters, catalog)
        if result.recompute_triggered:
            model = result.model
            if recompute_at is None:
                recompute_at = processed
        if recompute_at is not None and processed >= recompute_at + 500:
            break
    assert recompute_at is not None and recompute_at <= 200

    # after enough shifted traffic the rebuilt model predicts the new shape
    exact = 0
    sample = new.records[-100:]
    for rec in sample:
        estimate = estimate_initial_path(model, mapping, rec.proc_params, catalog)
        exact += path_exact(estimate, model, rec, catalog)
    assert exact == len(sample)


def test_track_execution_wrapper(fixed_len_setup):
    catalog, workload, mapping, model = fixed_len_setup
    rec = workload.records[0]
    st = record_states(rec, catalog)[0]
    a = TxnSession(model, 0.9)
    b = TxnSession(model, 0.9)
    assert track_execution(a, st.query_name, st.partitions) == b.track(st.query_name, st.partitions)
