"""txnpredict: predict stored-procedure transaction behavior with
per-procedure Markov models and measure what the predictions buy on a
simulated partition-per-engine cluster.

The pipeline: capture or synthesize a workload trace, learn parameter
mappings and per-procedure models, optionally cluster each procedure's
transactions by input features, then either grade the predictions off-line
or feed them to the discrete-event simulator.
"""

from .catalog import (
    Catalog,
    CatalogError,
    ProcedureDef,
    ProcParam,
    QueryDef,
    TableDef,
    hash_partition,
    load_catalog,
    resolve_partitions,
    save_catalog,
)
from .trace import (
    ABORTED,
    COMMITTED,
    QueryInvocation,
    TraceError,
    TraceRecord,
    Workload,
    load_trace,
    save_trace,
    split_workload,
    validate_workload,
)
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
from .markov import (
    ExecutionState,
    MarkovModel,
    ModelError,
    ProbabilityTable,
    build_model,
    construct,
    make_state,
    model_from_dict,
    model_to_dict,
    new_model,
    process,
    record_states,
)
from .mapping import (
    MappingKey,
    ParameterMapping,
    geometric_mean,
    infer_mappings,
    map_partition_value,
    map_query_params,
)
from .estimator import (
    EstimationError,
    OptimizationPlan,
    PathEstimate,
    PathLengthExceeded,
    RuntimeCounters,
    RuntimeUpdate,
    TxnSession,
    check_drift,
    estimate_initial_path,
    first_divergence,
    path_exact,
    select_optimizations,
    track_execution,
)
from .clustering import (
    ClusteredModels,
    CostWeights,
    FeatureContext,
    build_decision_tree,
    classify,
    cluster_em,
    compute_ranges,
    estimate_cost,
    extract_features,
    feature_instances,
    feed_forward_select,
    path_exact_rate,
)
from .bundles import (
    ModelBundle,
    build_global_bundle,
    build_partitioned_bundle,
    load_bundle,
    save_bundle,
)
from .evaluate import evaluate_bundle, evaluate_protocol, evaluate_record
from .sim import (
    STRATEGIES,
    CostModel,
    SimConfig,
    SimResult,
    run_simulation,
    sweep_confidence,
)

__version__ = "0.1.0"
