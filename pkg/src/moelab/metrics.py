"""Routing quality diagnostics and an arithmetic cost model.

The FLOPs estimator is written in plain Python arithmetic on purpose: it
accepts ints, floats, fractions, or symbolic quantities alike, so cost
ratios can be checked exactly (or algebraically) rather than numerically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .routing import RoutingBudget, RoutingPlan


@dataclass(frozen=True)
class RoutingDiagnostics:
    """Health statistics of one routing plan.

    drop_ratio counts tokens no expert selected; experts_per_sequence is
    the mean number of distinct experts active within a sequence;
    load_per_expert counts assignments per expert over the whole plan and
    load_cv is its coefficient of variation (population std over mean).
    """

    drop_ratio: float
    experts_per_sequence: float
    load_per_expert: np.ndarray
    load_cv: float
    budget_used: int


def diagnostics(
    plan: RoutingPlan, num_tokens: int, num_experts: int, num_sequences: int = 1
) -> RoutingDiagnostics:
    """Summarize a plan covering ``num_sequences`` blocks of ``num_tokens`` rows."""
    mask = plan.mask
    if mask.shape != (num_tokens * num_sequences, num_experts):
        raise ValueError(
            f"plan shape {mask.shape} does not match "
            f"{num_sequences} x {num_tokens} tokens by {num_experts} experts"
        )
    drop_ratio = float((mask.sum(axis=1) == 0).mean())
    per_seq = mask.reshape(num_sequences, num_tokens, num_experts)
    experts_per_sequence = float((per_seq.sum(axis=1) > 0).sum(axis=1).mean())
    load = mask.sum(axis=0)
    mean_load = load.mean()
    load_cv = float(load.std() / mean_load) if mean_load > 0 else 0.0
    return RoutingDiagnostics(
        drop_ratio=drop_ratio,
        experts_per_sequence=experts_per_sequence,
        load_per_expert=load,
        load_cv=load_cv,
        budget_used=int(mask.sum()),
    )


@dataclass(frozen=True)
class FlopsEstimate:
    """Multiply-add cost of one routed layer application.

    Fields stay in whatever arithmetic the inputs used.  ``expert_ratio``
    and ``total_ratio`` are populated when a baseline estimate is given.
    """

    selected_pairs: object
    expert_flops: object
    router_flops: object
    total_flops: object
    baseline_label: str | None = None
    expert_ratio: object | None = None
    total_ratio: object | None = None


def _budget_pairs(budget: RoutingBudget, num_tokens, num_experts):
    """Average selected pairs for one sequence, without rounding.

    The fractional kind keeps its exact rate here (value * T); routing
    rounds per sequence, and the two agree whenever value * T is integral,
    which is the regime cost comparisons are quoted in.
    """
    if budget.kind == "global_pairs":
        return budget.value
    if budget.kind == "per_token":
        return budget.value * num_tokens
    if budget.kind == "per_expert":
        return budget.value * num_experts
    return budget.value * num_tokens  # fractional


def flops_estimate(
    dims: tuple,
    budget: RoutingBudget,
    baseline: FlopsEstimate | None = None,
    baseline_label: str | None = None,
) -> FlopsEstimate:
    """Cost of routing + expert evaluation for dims (d, d_ff, N, T).

    Each selected pair costs one d -> d_ff and one d_ff -> d matrix-vector
    product (2*d*d_ff multiply-adds each); the router costs the full
    T x d @ d x N score product regardless of the budget.
    """
    d, d_ff, num_experts, num_tokens = dims
    pairs = _budget_pairs(budget, num_tokens, num_experts)
    expert = pairs * (2 * d * d_ff + 2 * d_ff * d)
    router = 2 * num_tokens * d * num_experts
    total = expert + router
    est = FlopsEstimate(
        selected_pairs=pairs,
        expert_flops=expert,
        router_flops=router,
        total_flops=total,
    )
    if baseline is not None:
        est = FlopsEstimate(
            selected_pairs=pairs,
            expert_flops=expert,
            router_flops=router,
            total_flops=total,
            baseline_label=baseline_label,
            expert_ratio=expert / baseline.expert_flops,
            total_ratio=total / baseline.total_flops,
        )
    return est
