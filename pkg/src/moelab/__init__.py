"""Desk-scale laboratory for sparse mixture-of-experts routing."""

__version__ = "0.1.0"

from .lp_oracle import MechanismGap, OracleResult, solve_exact, verify_mechanism_gap, verify_proposition
from .metrics import FlopsEstimate, RoutingDiagnostics, diagnostics, flops_estimate
from .moe_layer import (
    ExpertParams,
    JacobianReport,
    LayerGradients,
    LayerOutput,
    MoeLayerParams,
    backward,
    expert_forward,
    forward,
    forward_dense_reference,
    gate_values,
    init_params,
    jacobian_report,
    load_params,
    save_params,
)
from .numerics import Matrix, Rng, as_matrix, matmul, read_matrix_csv, round_half_up, sigmoid, stable_softmax, write_matrix_csv
from .reporting import emit_plots
from .suites import SUITES, SuiteResult, run_suite
from .train_harness import (
    DivergenceError,
    RunReport,
    SyntheticTask,
    TaskBatch,
    TrainConfig,
    batch_loss,
    benchmark_config,
    benchmark_task,
    compare_modes,
    make_task,
    matched_budget_configs,
    oracle_routing_plan,
    sample_batch,
    train,
)
from .routing import (
    DominanceProfile,
    RoutingBudget,
    RoutingPlan,
    budget_certificate,
    dominance_profile,
    route_expert_choice,
    route_token_choice,
    route_unified,
    selection_objective,
)
from .scoring import (
    CompatibilityMatrix,
    UnifiedScoreConfig,
    expert_choice_scores,
    logits,
    token_choice_scores,
    unified_scores,
)

__all__ = [
    "CompatibilityMatrix",
    "DivergenceError",
    "DominanceProfile",
    "ExpertParams",
    "FlopsEstimate",
    "JacobianReport",
    "LayerGradients",
    "LayerOutput",
    "Matrix",
    "MechanismGap",
    "MoeLayerParams",
    "OracleResult",
    "Rng",
    "RoutingBudget",
    "RoutingDiagnostics",
    "RoutingPlan",
    "RunReport",
    "SUITES",
    "SuiteResult",
    "SyntheticTask",
    "TaskBatch",
    "TrainConfig",
    "UnifiedScoreConfig",
    "as_matrix",
    "backward",
    "batch_loss",
    "benchmark_config",
    "benchmark_task",
    "budget_certificate",
    "compare_modes",
    "diagnostics",
    "dominance_profile",
    "emit_plots",
    "expert_choice_scores",
    "expert_forward",
    "flops_estimate",
    "forward",
    "forward_dense_reference",
    "gate_values",
    "init_params",
    "jacobian_report",
    "load_params",
    "logits",
    "make_task",
    "matched_budget_configs",
    "matmul",
    "oracle_routing_plan",
    "read_matrix_csv",
    "round_half_up",
    "route_expert_choice",
    "route_token_choice",
    "route_unified",
    "run_suite",
    "sample_batch",
    "save_params",
    "selection_objective",
    "sigmoid",
    "solve_exact",
    "stable_softmax",
    "token_choice_scores",
    "train",
    "unified_scores",
    "verify_mechanism_gap",
    "verify_proposition",
    "write_matrix_csv",
]
