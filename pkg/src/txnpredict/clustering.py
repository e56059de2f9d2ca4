"""Model partitioning: cluster a procedure's transactions by input-parameter
features and keep one model per cluster.

A single model per procedure pools transactions whose control flow differs
(say, different input array lengths), which blurs its transition
probabilities.  Clustering fixes that: feature vectors are extracted from
each record's input parameters, an EM-fitted Gaussian mixture groups the
records, and a decision tree over the same features routes new requests to
their cluster's model at run time.

Which features matter is decided by greedy feed-forward selection: rounds
of growing feature-set sizes are scored by a prediction-cost function over
held-out records, features from the best-scoring sets survive to the next
round, and the search stops as soon as a round fails to improve.  The
unclustered model is scored first, so clustering is only ever adopted when
it actually wins.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .catalog import Catalog, ProcedureDef, hash_partition
from .estimator import (
    EstimationError,
    TxnSession,
    estimate_initial_path,
    first_divergence,
    path_exact,
    select_optimizations,
)
from .mapping import ParameterMapping
from .markov import MarkovModel, build_model, record_states
from .trace import ABORTED, TraceRecord, Workload, split_workload

FEATURE_CATEGORIES = (
    "NORMALIZEDVALUE",
    "HASHVALUE",
    "ISNULL",
    "ARRAYLENGTH",
    "ARRAYALLSAMEHASH",
)


# ---------------------------------------------------------------------------
# Feature extraction


@dataclass(frozen=True)
class FeatureContext:
    """Everything extraction needs besides the record itself: the partition
    count for hash features and per-parameter value ranges (learned from the
    training workset) for normalization."""

    num_partitions: int
    ranges: tuple  # ((param_name, lo, hi), ...) for scalar parameters


def feature_instances(procedure: ProcedureDef) -> list:
    """All feature instance names for a procedure, in deterministic order."""
    names = []
    for param in procedure.parameters:
        for cat in FEATURE_CATEGORIES:
            names.append(f"{cat}({param.name})")
    return names


def compute_ranges(records, procedure: ProcedureDef) -> tuple:
    ranges = []
    for j, param in enumerate(procedure.parameters):
        if param.is_array:
            continue
        values = [r.proc_params[j] for r in records if r.proc_params[j] is not None]
        if values:
            ranges.append((param.name, min(values), max(values)))
        else:
            ranges.append((param.name, 0, 0))
    return tuple(ranges)


def extract_features(record: TraceRecord, procedure: ProcedureDef, context: FeatureContext) -> dict:
    """Feature vector for one record: one value per parameter per category,
    None where a category does not apply (array categories of scalars and
    scalar categories of arrays)."""
    lookup = {name: (lo, hi) for name, lo, hi in context.ranges}
    P = context.num_partitions
    vec: dict = {}
    for j, param in enumerate(procedure.parameters):
        value = record.proc_params[j]
        null = value is None
        vec[f"ISNULL({param.name})"] = 1.0 if null else 0.0
        if param.is_array:
            vec[f"NORMALIZEDVALUE({param.name})"] = None
            vec[f"HASHVALUE({param.name})"] = None
            if null:
                vec[f"ARRAYLENGTH({param.name})"] = None
                vec[f"ARRAYALLSAMEHASH({param.name})"] = None
            else:
                vec[f"ARRAYLENGTH({param.name})"] = float(len(value))
                hashes = {hash_partition(x, P) for x in value}
                vec[f"ARRAYALLSAMEHASH({param.name})"] = 1.0 if len(hashes) <= 1 else 0.0
        else:
            vec[f"ARRAYLENGTH({param.name})"] = None
            vec[f"ARRAYALLSAMEHASH({param.name})"] = None
            if null:
                vec[f"NORMALIZEDVALUE({param.name})"] = None
                vec[f"HASHVALUE({param.name})"] = None
            else:
                lo, hi = lookup.get(param.name, (0, 0))
                if hi > lo:
                    norm = (value - lo) / (hi - lo)
                else:
                    norm = 0.0
                vec[f"NORMALIZEDVALUE({param.name})"] = min(1.0, max(0.0, float(norm)))
                vec[f"HASHVALUE({param.name})"] = float(hash_partition(value, P))
    return vec


def encode_vectors(vectors, feature_set) -> np.ndarray:
    """Dense encoding for clustering: each feature becomes a (present, value)
    dimension pair so missing values carry signal without poisoning means."""
    out = np.zeros((len(vectors), 2 * len(feature_set)))
    for i, vec in enumerate(vectors):
        for j, name in enumerate(feature_set):
            v = vec.get(name)
            if v is not None:
                out[i, 2 * j] = 1.0
                out[i, 2 * j + 1] = v
    return out


# ---------------------------------------------------------------------------
# Diagonal-covariance Gaussian mixture fitted with EM

_VAR_FLOOR = 1e-6
_LOG2PI = math.log(2.0 * math.pi)


class GaussianMixture:
    def __init__(self, means, variances, weights):
        self.means = means
        self.variances = variances
        self.weights = weights

    @property
    def k(self) -> int:
        return len(self.weights)

    def _log_joint(self, X: np.ndarray) -> np.ndarray:
        # (n, k) log p(x, component)
        n, d = X.shape
        out = np.empty((n, self.k))
        for c in range(self.k):
            var = self.variances[c]
            diff = X - self.means[c]
            ll = -0.5 * (np.sum(diff * diff / var, axis=1) + np.sum(np.log(var)) + d * _LOG2PI)
            out[:, c] = ll + math.log(self.weights[c])
        return out

    def log_likelihood(self, X: np.ndarray) -> float:
        lj = self._log_joint(X)
        m = lj.max(axis=1, keepdims=True)
        return float(np.sum(m.ravel() + np.log(np.exp(lj - m).sum(axis=1))))

    def predict(self, X: np.ndarray) -> np.ndarray:
        if len(X) == 0:
            return np.zeros(0, dtype=int)
        return np.argmax(self._log_joint(X), axis=1)


def _fit_gmm(X: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 200) -> GaussianMixture:
    n, d = X.shape
    unique = np.unique(X, axis=0)
    k = min(k, len(unique))
    idx = rng.choice(len(unique), size=k, replace=False)
    means = unique[idx].astype(float)
    global_var = np.maximum(X.var(axis=0), _VAR_FLOOR)
    variances = np.tile(global_var, (k, 1))
    weights = np.full(k, 1.0 / k)
    model = GaussianMixture(means, variances, weights)
    prev_ll = -np.inf
    for _ in range(max_iter):
        lj = model._log_joint(X)
        m = lj.max(axis=1, keepdims=True)
        log_norm = m + np.log(np.exp(lj - m).sum(axis=1, keepdims=True))
        resp = np.exp(lj - log_norm)
        ll = float(log_norm.sum())
        nk = resp.sum(axis=0) + 1e-12
        model.weights = nk / n
        model.means = (resp.T @ X) / nk[:, None]
        for c in range(k):
            diff = X - model.means[c]
            model.variances[c] = np.maximum((resp[:, c] @ (diff * diff)) / nk[c], _VAR_FLOOR)
        if abs(ll - prev_ll) < 1e-8 * max(1.0, abs(ll)):
            break
        prev_ll = ll
    return model


def _cv_log_likelihood(X: np.ndarray, k: int, seed: int, folds: int = 10) -> float:
    n = len(X)
    folds = min(folds, n)
    order = np.random.default_rng(seed).permutation(n)
    total = 0.0
    for f in range(folds):
        held = order[f::folds]
        train = np.delete(order, np.arange(f, n, folds))
        if len(train) < k:
            return -np.inf
        gmm = _fit_gmm(X[train], k, np.random.default_rng(seed * 1000 + f))
        total += gmm.log_likelihood(X[held])
    return total


class EmClusterer:
    """EM clusterer with the cluster count chosen by cross-validation:
    k grows from 1 while the 10-fold held-out log-likelihood improves."""

    def __init__(self, gmm: GaussianMixture, feature_set, allowed=None):
        self.gmm = gmm
        self.feature_set = tuple(feature_set)
        self.allowed = set(range(gmm.k)) if allowed is None else set(allowed)

    @property
    def k(self) -> int:
        return self.gmm.k

    def assign(self, vectors) -> list:
        X = encode_vectors(vectors, self.feature_set)
        lj = self.gmm._log_joint(X) if len(X) else np.zeros((0, self.k))
        labels = []
        for row in lj:
            ranked = sorted(range(self.k), key=lambda c: (-row[c], c))
            labels.append(next(c for c in ranked if c in self.allowed))
        return labels


def cluster_em(vectors, feature_set, seed: int, max_k: int = 8) -> tuple:
    """Cluster feature vectors restricted to a feature set.

    Returns ``(labels, clusterer)``.  Fewer than two vectors (or an empty
    feature set) produce a single cluster.
    """
    feature_set = tuple(feature_set)
    if len(vectors) < 2 or not feature_set:
        d = 2 * len(feature_set)
        gmm = GaussianMixture(np.zeros((1, d)), np.ones((1, d)), np.ones(1))
        clusterer = EmClusterer(gmm, feature_set)
        return [0] * len(vectors), clusterer
    X = encode_vectors(vectors, feature_set)
    best_k = 1
    best_ll = _cv_log_likelihood(X, 1, seed)
    for k in range(2, max_k + 1):
        ll = _cv_log_likelihood(X, k, seed)
        if ll <= best_ll + 1e-9:
            break
        best_k, best_ll = k, ll
    gmm = _fit_gmm(X, best_k, np.random.default_rng(seed))
    clusterer = EmClusterer(gmm, feature_set)
    return list(gmm.predict(X)), clusterer


# ---------------------------------------------------------------------------
# Decision tree (gain-ratio splits, C4.5 style)


@dataclass
class TreeNode:
    feature: str | None = None
    threshold: float = 0.0
    null_left: bool = True
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    cluster: int | None = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None


def _entropy(labels) -> float:
    n = len(labels)
    if n == 0:
        return 0.0
    ent = 0.0
    for c in Counter(labels).values():
        p = c / n
        ent -= p * math.log2(p)
    return ent


def _majority(labels) -> int:
    counts = Counter(labels)
    top = max(counts.values())
    return min(c for c, n in counts.items() if n == top)


def build_decision_tree(vectors, labels, feature_set, max_depth: int = 32) -> TreeNode:
    """Gain-ratio tree over numeric features (booleans are 0/1).

    Numeric splits are binary at midpoints between consecutive distinct
    values; records with a null feature follow the branch that received the
    majority of non-null records.  Leaves hold the majority cluster id, so
    classification is total.
    """
    feature_set = tuple(feature_set)

    def grow(rows, depth) -> TreeNode:
        labs = [labels[i] for i in rows]
        if depth >= max_depth or len(set(labs)) <= 1:
            return TreeNode(cluster=_majority(labs))
        parent_entropy = _entropy(labs)
        best = None  # (gain_ratio, feature order, threshold, left, right, null_left)
        for f_idx, feature in enumerate(feature_set):
            present = [(vectors[i][feature], i) for i in rows if vectors[i].get(feature) is not None]
            nulls = [i for i in rows if vectors[i].get(feature) is None]
            values = sorted({v for v, _ in present})
            if len(values) < 2:
                continue
            for lo, hi in zip(values, values[1:]):
                t = (lo + hi) / 2.0
                left = [i for v, i in present if v <= t]
                right = [i for v, i in present if v > t]
                null_left = len(left) >= len(right)
                if null_left:
                    left = left + nulls
                else:
                    right = right + nulls
                nl, nr = len(left), len(right)
                total = nl + nr
                gain = parent_entropy - (
                    nl / total * _entropy([labels[i] for i in left])
                    + nr / total * _entropy([labels[i] for i in right])
                )
                split_info = 0.0
                for frac in (nl / total, nr / total):
                    if frac > 0:
                        split_info -= frac * math.log2(frac)
                if split_info <= 0:
                    continue
                ratio = gain / split_info
                cand = (ratio, -f_idx, -t)
                if best is None or cand > best[0]:
                    best = (cand, feature, t, left, right, null_left)
        if best is None or best[0][0] <= 1e-12:
            return TreeNode(cluster=_majority(labs))
        _, feature, t, left, right, null_left = best
        return TreeNode(
            feature=feature,
            threshold=t,
            null_left=null_left,
            left=grow(left, depth + 1),
            right=grow(right, depth + 1),
        )

    if not vectors:
        return TreeNode(cluster=0)
    return grow(list(range(len(vectors))), 0)


def classify(tree: TreeNode, vector: dict) -> int:
    node = tree
    while not node.is_leaf:
        v = vector.get(node.feature)
        if v is None:
            node = node.left if node.null_left else node.right
        else:
            node = node.left if v <= node.threshold else node.right
    return node.cluster


def tree_features(tree: TreeNode) -> set:
    if tree.is_leaf:
        return set()
    return {tree.feature} | tree_features(tree.left) | tree_features(tree.right)


# ---------------------------------------------------------------------------
# Clustered model bundles and the prediction-cost function


@dataclass
class ClusteredModels:
    procedure: str
    feature_set: tuple
    context: FeatureContext
    models: dict  # cluster id -> MarkovModel
    tree: TreeNode
    clusterer: EmClusterer | None = None  # transient; the tree serializes

    def model_for_record(self, record: TraceRecord, procedure: ProcedureDef) -> MarkovModel:
        vec = extract_features(record, procedure, self.context)
        if self.tree is not None:
            cid = classify(self.tree, vec)
        else:
            cid = self.clusterer.assign([vec])[0]
        return self.models[cid]


@dataclass(frozen=True)
class CostWeights:
    wrong_base: float = 10.0
    lock_mismatch: float = 5.0
    finish_mismatch: float = 1.0


def record_cost(
    model: MarkovModel,
    mapping: ParameterMapping,
    record: TraceRecord,
    catalog: Catalog,
    threshold: float,
    weights: CostWeights = CostWeights(),
) -> float:
    """Prediction penalty for one record against one model.

    Charges for a wrong base partition, for every partition locked but
    unused or used but unlocked, and for every finish misprediction (a
    partition reported finished before its real last access, or an accessed
    non-base partition never reported finished).  A record that aborts
    after performing writes with undo logging disabled is unrecoverable and
    saturates the cost to infinity.
    """
    P = catalog.num_partitions
    try:
        estimate = estimate_initial_path(model, mapping, record.proc_params, catalog)
    except EstimationError:
        return weights.wrong_base + weights.lock_mismatch * P
    plan = select_optimizations(estimate, model, threshold)

    states = record_states(record, catalog)
    access_counts: dict = defaultdict(int)
    for st in states:
        for p in st.partitions:
            access_counts[p] += 1
    accessed = set(access_counts)

    cost = 0.0
    best = max(access_counts.values())
    if access_counts.get(plan.base_partition, 0) != best:
        cost += weights.wrong_base
    cost += weights.lock_mismatch * len(set(plan.lock_set) ^ accessed)

    # replay for runtime updates: finish correctness and undo state
    session = TxnSession(model, threshold, estimate=estimate, plan=plan)
    finish_at: dict = {}
    undo_off_after: int | None = 0 if plan.disable_undo else None
    for i, st in enumerate(states):
        for upd in session.track(st.query_name, st.partitions):
            if upd.kind == "partition_finished":
                finish_at.setdefault(upd.partition, upd.path_index)
            elif upd.kind == "disable_undo" and undo_off_after is None:
                undo_off_after = upd.path_index + 1

    last_access: dict = {}
    for i, st in enumerate(states):
        for p in st.partitions:
            last_access[p] = i
    for p, idx in finish_at.items():
        if p in last_access and last_access[p] > idx:
            cost += weights.finish_mismatch  # reported finished, then accessed again
    for p in accessed:
        if p != plan.base_partition and p not in finish_at:
            cost += weights.finish_mismatch  # never released before the end

    if record.outcome == ABORTED and undo_off_after is not None:
        proc = catalog.procedure(record.proc_name)
        unlogged_writes = sum(
            1
            for i, st in enumerate(states)
            if i >= undo_off_after and proc.query(st.query_name).is_write
        )
        if unlogged_writes:
            return float("inf")
    return cost


def estimate_cost(
    clustered: ClusteredModels,
    mapping: ParameterMapping,
    records,
    catalog: Catalog,
    threshold: float,
    weights: CostWeights = CostWeights(),
) -> float:
    """Total prediction cost of a clustered-model set over testing records."""
    proc = catalog.procedure(clustered.procedure)
    total = 0.0
    for record in records:
        model = clustered.model_for_record(record, proc)
        total += record_cost(model, mapping, record, catalog, threshold, weights)
    return total


def path_exact_rate(
    clustered: ClusteredModels,
    mapping: ParameterMapping,
    records,
    catalog: Catalog,
) -> float:
    proc = catalog.procedure(clustered.procedure)
    if not records:
        return 1.0
    hits = 0
    for record in records:
        model = clustered.model_for_record(record, proc)
        try:
            estimate = estimate_initial_path(model, mapping, record.proc_params, catalog)
        except EstimationError:
            continue
        if path_exact(estimate, model, record, catalog):
            hits += 1
    return hits / len(records)


def divergences(
    clustered: ClusteredModels,
    mapping: ParameterMapping,
    records,
    catalog: Catalog,
) -> list:
    """(record, divergence) pairs for records whose estimate missed."""
    proc = catalog.procedure(clustered.procedure)
    out = []
    for record in records:
        model = clustered.model_for_record(record, proc)
        try:
            estimate = estimate_initial_path(model, mapping, record.proc_params, catalog)
        except EstimationError:
            out.append((record, (0, None, None)))
            continue
        div = first_divergence(estimate, model, record, catalog)
        if div is not None:
            out.append((record, div))
    return out


# ---------------------------------------------------------------------------
# Feed-forward feature selection


@dataclass
class SelectionRound:
    number: int
    scored_sets: list  # [(cost, feature_set)] ascending
    survivors: tuple


@dataclass
class SelectionResult:
    clustered: ClusteredModels
    feature_set: tuple
    cost: float
    baseline_cost: float
    rounds: list
    improved: bool  # clustering beat the single unclustered model


def _single_cluster_bundle(procedure, context, model) -> ClusteredModels:
    return ClusteredModels(
        procedure=procedure,
        feature_set=(),
        context=context,
        models={0: model},
        tree=TreeNode(cluster=0),
    )


def feed_forward_select(
    workload: Workload,
    procedure_name: str,
    catalog: Catalog,
    mapping: ParameterMapping,
    threshold: float = 0.9,
    weights: CostWeights = CostWeights(),
    seed: int = 0,
    max_k: int = 8,
) -> SelectionResult:
    """Greedy round-based feature-set search for one procedure.

    The workload splits 30/30/40 into training, validation, and testing
    worksets.  Each candidate feature set seeds the clusterer on training,
    assigns validation records to clusters, builds one model per cluster
    from them, and is scored by :func:`estimate_cost` on testing.  Features
    from the lowest-cost 10% of each round's sets (at least one set)
    survive to the next round of bigger sets; the search stops when a round
    fails to beat the best cost seen so far.  The unclustered single model
    is scored first as the baseline, so clustering is adopted only when it
    improves on it.
    """
    records = workload.filter_procedure(procedure_name)
    if not len(records):
        raise EstimationError(f"no records for procedure {procedure_name}")
    proc = catalog.procedure(procedure_name)
    train, val, test = split_workload(records, seed=seed)
    # degenerate splits: fall back to using everything everywhere
    if not len(train) or not len(val) or not len(test):
        train = val = test = records

    context = FeatureContext(catalog.num_partitions, compute_ranges(train.records, proc))
    train_vectors = [extract_features(r, proc, context) for r in train.records]
    val_vectors = [extract_features(r, proc, context) for r in val.records]

    baseline_model = build_model(procedure_name, val, catalog)
    baseline = _single_cluster_bundle(procedure_name, context, baseline_model)
    baseline_cost = estimate_cost(baseline, mapping, test.records, catalog, threshold, weights)

    def evaluate_set(feature_set, set_seed) -> tuple:
        _, clusterer = cluster_em(train_vectors, feature_set, set_seed, max_k=max_k)
        val_labels = clusterer.assign(val_vectors)
        groups: dict = defaultdict(list)
        for rec, label in zip(val.records, val_labels):
            groups[label].append(rec)
        clusterer.allowed = set(groups)
        models = {
            cid: build_model(procedure_name, Workload(records.catalog_ref, tuple(recs)), catalog)
            for cid, recs in sorted(groups.items())
        }
        bundle = ClusteredModels(
            procedure=procedure_name,
            feature_set=tuple(feature_set),
            context=context,
            models=models,
            tree=None,
            clusterer=clusterer,
        )
        cost = estimate_cost(bundle, mapping, test.records, catalog, threshold, weights)
        return cost, bundle

    all_features = feature_instances(proc)
    surviving = list(all_features)
    best_cost = baseline_cost
    best_bundle = baseline
    best_set: tuple = ()
    rounds: list = []
    r = 1
    while surviving and r <= len(surviving):
        candidates = [tuple(fs) for fs in combinations(sorted(surviving), r)]
        scored = []
        for idx, fs in enumerate(candidates):
            cost, bundle = evaluate_set(fs, seed * 100003 + r * 1009 + idx)
            scored.append((cost, fs, bundle))
        scored.sort(key=lambda t: (t[0], t[1]))
        keep = max(1, math.ceil(0.1 * len(scored)))
        survivors = sorted({f for _, fs, _ in scored[:keep] for f in fs})
        rounds.append(SelectionRound(r, [(c, fs) for c, fs, _ in scored], tuple(survivors)))
        round_cost, round_set, round_bundle = scored[0]
        if round_cost < best_cost:
            best_cost, best_set, best_bundle = round_cost, round_set, round_bundle
            surviving = survivors
            r += 1
        else:
            break

    improved = best_bundle is not baseline
    if improved:
        # attach the runtime decision tree, trained on the training workset's
        # cluster assignments over the winning feature set
        labels = best_bundle.clusterer.assign(train_vectors)
        tree = build_decision_tree(train_vectors, labels, best_set)
        # the tree must only route to clusters that have models
        for i, vec in enumerate(train_vectors):
            if classify(tree, vec) not in best_bundle.models:
                tree = TreeNode(cluster=min(best_bundle.models))
                break
        best_bundle.tree = tree
    return SelectionResult(
        clustered=best_bundle,
        feature_set=best_set,
        cost=best_cost,
        baseline_cost=baseline_cost,
        rounds=rounds,
        improved=improved,
    )


# ---------------------------------------------------------------------------
# Serialization


def tree_to_dict(node: TreeNode) -> dict:
    if node.is_leaf:
        return {"cluster": node.cluster}
    return {
        "feature": node.feature,
        "threshold": node.threshold,
        "null_left": node.null_left,
        "left": tree_to_dict(node.left),
        "right": tree_to_dict(node.right),
    }


def tree_from_dict(data: dict) -> TreeNode:
    if "cluster" in data:
        return TreeNode(cluster=data["cluster"])
    return TreeNode(
        feature=data["feature"],
        threshold=data["threshold"],
        null_left=data["null_left"],
        left=tree_from_dict(data["left"]),
        right=tree_from_dict(data["right"]),
    )


def clustered_to_dict(clustered: ClusteredModels) -> dict:
    from .markov import model_to_dict

    return {
        "procedure": clustered.procedure,
        "feature_set": list(clustered.feature_set),
        "context": {
            "num_partitions": clustered.context.num_partitions,
            "ranges": [list(r) for r in clustered.context.ranges],
        },
        "models": {str(cid): model_to_dict(m) for cid, m in sorted(clustered.models.items())},
        "tree": tree_to_dict(clustered.tree),
    }


def clustered_from_dict(data: dict) -> ClusteredModels:
    from .markov import model_from_dict

    context = FeatureContext(
        data["context"]["num_partitions"],
        tuple(tuple(r) for r in data["context"]["ranges"]),
    )
    return ClusteredModels(
        procedure=data["procedure"],
        feature_set=tuple(data["feature_set"]),
        context=context,
        models={int(cid): model_from_dict(m) for cid, m in data["models"].items()},
        tree=tree_from_dict(data["tree"]),
    )
