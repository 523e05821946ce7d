"""Seeded verification suites with counterexample capture.

Each suite checks one contract over many randomly drawn instances.  All
instance randomness derives from ``(master_seed, instance_index)``, so a
suite is reproducible as a whole and any single failing instance can be
replayed in isolation from its payload.  Results carry no timing or
environment data: a suite run's report is a pure function of its inputs.

Alongside its headline contract, every suite that routes also re-checks
the mechanism-level health invariants on the plans it produced: token
choice never drops a token, expert choice always balances load exactly,
and a unified plan's selected scores are never beaten by an unselected
one in the same scope unit.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .lp_oracle import solve_exact, verify_mechanism_gap
from .metrics import diagnostics
from .moe_layer import (
    backward,
    forward,
    forward_dense_reference,
    init_params,
    jacobian_report,
)
from .numerics import Rng
from .routing import (
    RoutingBudget,
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

OBJECTIVE_TOL = 1e-12
FORWARD_TOL = 1e-12
GRAD_TOL = 1e-4
DECOMPOSITION_TOL = 1e-10


@dataclass(frozen=True)
class SuiteResult:
    """Outcome of one suite run; failures carry replayable payloads."""

    suite: str
    master_seed: int
    instances: int
    failures: int
    counterexamples: tuple[dict, ...]

    @property
    def passed(self) -> bool:
        return self.failures == 0

    def to_doc(self) -> dict:
        return {
            "suite": self.suite,
            "master_seed": self.master_seed,
            "instances": self.instances,
            "failures": self.failures,
            "passed": self.passed,
            "counterexamples": list(self.counterexamples),
        }


class _Collector:
    def __init__(self, limit: int):
        self.limit = limit
        self.failures = 0
        self.payloads: list[dict] = []

    def fail(self, payload: dict) -> None:
        self.failures += 1
        if len(self.payloads) < self.limit:
            self.payloads.append(payload)


def _raw(values: np.ndarray) -> CompatibilityMatrix:
    return CompatibilityMatrix(values, "raw_logits")


def _plan_health(scores, plans: dict, fail, payload: dict) -> None:
    """The cross-suite health invariants on freshly routed plans."""
    if "token_choice" in plans:
        diag = diagnostics(plans["token_choice"], *plans["token_choice"].mask.shape)
        if diag.drop_ratio != 0.0:
            fail({**payload, "violated": "token_choice drop_ratio", "got": diag.drop_ratio})
    if "expert_choice" in plans:
        diag = diagnostics(plans["expert_choice"], *plans["expert_choice"].mask.shape)
        if diag.load_cv != 0.0:
            fail({**payload, "violated": "expert_choice load_cv", "got": diag.load_cv})
    if "usmoe" in plans:
        worst_sel, best_unsel, ok = budget_certificate(scores, plans["usmoe"])
        if not ok:
            fail(
                {
                    **payload,
                    "violated": "usmoe budget certificate",
                    "min_selected": worst_sel,
                    "max_unselected": best_unsel,
                }
            )


def suite_proposition(instances: int = 500, seed: int = 0, collect_limit: int = 5) -> SuiteResult:
    """Global top-c selection attains the exhaustive budgeted optimum."""
    col = _Collector(collect_limit)
    for i in range(instances):
        rng = Rng((seed, i))
        t = int(rng.integers(2, 7))
        n = int(rng.integers(2, min(5, 24 // t) + 1))  # keep t*n inside the enumeration bound
        c = int(rng.integers(1, min(12, t * n) + 1))
        raw = np.asarray(rng.normal((t, n)))
        # The claim concerns non-negative score matrices (mixture scores always
        # are); with negatives the budget inequality makes smaller masks win.
        if i % 3 == 0:
            values = np.abs(raw) + 1e-3
            if i % 6 == 0:
                values = np.round(values, 1) + 1e-3  # duplicated entries: tie regime
            scores = _raw(values)
        else:
            scores = unified_scores(_raw(raw), UnifiedScoreConfig((i % 11) / 10.0))
        plan = route_unified(scores, RoutingBudget.global_pairs(c))
        routed = selection_objective(scores, plan)
        oracle = solve_exact(scores, c)
        payload = {"instance": i, "scores": values.tolist(), "budget": c}
        if abs(routed - oracle.optimal_objective) > OBJECTIVE_TOL:
            col.fail(
                {**payload, "routed_objective": routed, "optimal_objective": oracle.optimal_objective}
            )
        _plan_health(scores, {"usmoe": plan}, col.fail, payload)
    return SuiteResult("proposition", seed, instances, col.failures, tuple(col.payloads))


def suite_dominance(instances: int = 1000, seed: int = 0, collect_limit: int = 5) -> SuiteResult:
    """Unified selection never loses to row or column selection at equal budget."""
    col = _Collector(collect_limit)
    for i in range(instances):
        rng = Rng((seed, i))
        t = int(rng.integers(2, 6))
        c = t * int(rng.integers(1, t + 1))
        values = np.asarray(rng.normal((t, t)))
        scores = _raw(values)
        payload = {"instance": i, "scores": values.tolist(), "budget": c}
        gap = verify_mechanism_gap(scores, c)
        if not gap.usmoe_dominates:
            col.fail(
                {**payload, "m_tc": gap.m_tc, "m_ec": gap.m_ec, "m_usmoe": gap.m_usmoe}
            )
        prof = dominance_profile(scores, c)
        if (prof.usmoe < prof.token_choice - 1e-15).any() or (
            prof.usmoe < prof.expert_choice - 1e-15
        ).any():
            col.fail(
                {
                    **payload,
                    "profile_usmoe": prof.usmoe.tolist(),
                    "profile_tc": prof.token_choice.tolist(),
                    "profile_ec": prof.expert_choice.tolist(),
                }
            )
        plans = {
            "token_choice": route_token_choice(scores, c // t),
            "expert_choice": route_expert_choice(scores, c // t),
            "usmoe": route_unified(scores, RoutingBudget.global_pairs(c)),
        }
        _plan_health(scores, plans, col.fail, payload)
    return SuiteResult("dominance", seed, instances, col.failures, tuple(col.payloads))


def suite_topk_invariance(instances: int = 1000, seed: int = 0, collect_limit: int = 5) -> SuiteResult:
    """Row-wise top-k index sets are identical on raw and softmaxed rows."""
    col = _Collector(collect_limit)
    for i in range(instances):
        rng = Rng((seed, i))
        n = int(rng.integers(2, 9))
        k = int(rng.integers(1, n + 1))
        row = np.asarray(rng.normal((1, n)))
        if i % 4 == 0:
            row = np.round(row, 1)  # provoke ties; the smaller index must win in both bases
        raw_plan = route_token_choice(_raw(row), k)
        soft_plan = route_token_choice(token_choice_scores(_raw(row)), k)
        if (raw_plan.mask != soft_plan.mask).any():
            col.fail(
                {
                    "instance": i,
                    "row": row[0].tolist(),
                    "k": k,
                    "raw_selection": np.flatnonzero(raw_plan.mask[0]).tolist(),
                    "softmax_selection": np.flatnonzero(soft_plan.mask[0]).tolist(),
                }
            )
    return SuiteResult("topk-invariance", seed, instances, col.failures, tuple(col.payloads))


def suite_forward_equivalence(instances: int = 200, seed: int = 0, collect_limit: int = 5) -> SuiteResult:
    """Dispatch/combine forward equals the dense masked reference."""
    col = _Collector(collect_limit)
    for i in range(instances):
        rng = Rng((seed, i))
        t = int(rng.integers(1, 7))
        n = int(rng.integers(2, 6))
        d = int(rng.integers(2, 7))
        d_ff = int(rng.integers(1, 6))
        activation = "tanh" if i % 2 else "identity"
        params = init_params(d, d_ff, n, rng, activation)
        h = np.asarray(rng.normal((t, d)))
        raw = logits(h, params.router_weights)
        k = int(rng.integers(1, n + 1))
        cap = int(rng.integers(1, t + 1))
        c = int(rng.integers(1, t * n + 1))
        plans = {
            "token_choice": route_token_choice(token_choice_scores(raw), k),
            "expert_choice": route_expert_choice(expert_choice_scores(raw), cap),
            "usmoe": route_unified(
                unified_scores(raw, UnifiedScoreConfig(0.5)),
                RoutingBudget.global_pairs(c),
                alpha=0.5,
            ),
        }
        payload = {"instance": i, "dims": [d, d_ff, n, t], "activation": activation}
        for mode, plan in plans.items():
            fast = forward(h, params, plan).output
            dense = forward_dense_reference(h, params, plan).output
            err = float(np.abs(fast - dense).max())
            if err > FORWARD_TOL:
                col.fail({**payload, "mode": mode, "max_abs_error": err})
        _plan_health(
            unified_scores(raw, UnifiedScoreConfig(0.5)), {"usmoe": plans["usmoe"]}, col.fail, payload
        )
        _plan_health(raw, {k_: v for k_, v in plans.items() if k_ != "usmoe"}, col.fail, payload)
    return SuiteResult("forward-equivalence", seed, instances, col.failures, tuple(col.payloads))


def _fd_gradient(f, arr: np.ndarray, step: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + step
        hi = f()
        arr[idx] = orig - step
        lo = f()
        arr[idx] = orig
        grad[idx] = (hi - lo) / (2 * step)
        it.iternext()
    return grad


def _max_rel_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float((np.abs(a - b) / scale).max())


def suite_gradcheck(instances: int = 20, seed: int = 0, collect_limit: int = 5) -> SuiteResult:
    """Analytic backward vs central differences, plus the top-1 Jacobian split."""
    col = _Collector(collect_limit)
    for i in range(instances):
        rng = Rng((seed, i))
        d, d_ff, n, t = 8, 16, 4, 5
        params = init_params(d, d_ff, n, rng)
        h = np.asarray(rng.normal((t, d)))
        projection = np.asarray(rng.normal((t, d)))
        mode = ("token_choice", "expert_choice", "usmoe")[i % 3]
        payload = {"instance": i, "mode": mode}

        raw0 = logits(h, params.router_weights)
        if mode == "token_choice":
            base_plan = route_token_choice(token_choice_scores(raw0), 2)
        elif mode == "expert_choice":
            base_plan = route_expert_choice(expert_choice_scores(raw0), 2)
        else:
            base_plan = route_unified(
                unified_scores(raw0, UnifiedScoreConfig(0.5)),
                RoutingBudget.global_pairs(10),
                alpha=0.5,
            )

        def loss() -> float:
            # Frozen-selection convention: the mask is held fixed while the
            # gate values move with the perturbed inputs through the score map.
            raw = logits(h, params.router_weights)
            if mode == "token_choice":
                mapped = token_choice_scores(raw).scores
            elif mode == "expert_choice":
                mapped = expert_choice_scores(raw).scores
            else:
                mapped = unified_scores(raw, UnifiedScoreConfig(0.5)).scores
            plan = dataclasses.replace(base_plan, gates=mapped * base_plan.mask)
            return float((forward(h, params, plan).output * projection).sum())
        grads = backward(h, params, base_plan, projection)
        blocks = {"tokens": (grads.d_tokens, h), "router": (grads.d_router, params.router_weights)}
        for j in range(n):
            blocks[f"expert{j}.w1"] = (grads.d_expert_w1[j], params.experts[j].w1)
            blocks[f"expert{j}.w2"] = (grads.d_expert_w2[j], params.experts[j].w2)
        for name, (analytic, arr) in blocks.items():
            err = _max_rel_error(analytic, _fd_gradient(loss, arr))
            if err > GRAD_TOL:
                col.fail({**payload, "block": name, "max_rel_error": err})

        for jac_mode, expected_terms in (("token_choice", n), ("usmoe", 2 * n)):
            rep = jacobian_report(h[0], params, jac_mode)
            recombined = rep.gate_frozen + sum(rep.routing_terms)
            payload_j = {"instance": i, "jacobian_mode": jac_mode}
            if len(rep.routing_terms) != expected_terms:
                col.fail(
                    {**payload_j, "expected_terms": expected_terms, "got": len(rep.routing_terms)}
                )
            if float(np.abs(recombined - rep.analytic).max()) > DECOMPOSITION_TOL:
                col.fail(
                    {
                        **payload_j,
                        "decomposition_error": float(np.abs(recombined - rep.analytic).max()),
                    }
                )
            if rep.max_rel_error > GRAD_TOL:
                col.fail({**payload_j, "max_rel_error": rep.max_rel_error})
    return SuiteResult("gradcheck", seed, instances, col.failures, tuple(col.payloads))


SUITES = {
    "proposition": suite_proposition,
    "dominance": suite_dominance,
    "topk-invariance": suite_topk_invariance,
    "forward-equivalence": suite_forward_equivalence,
    "gradcheck": suite_gradcheck,
}

DEFAULT_INSTANCES = {
    "proposition": 500,
    "dominance": 1000,
    "topk-invariance": 1000,
    "forward-equivalence": 200,
    "gradcheck": 20,
}


def run_suite(
    name: str, instances: int | None = None, seed: int = 0, collect_limit: int = 5
) -> SuiteResult:
    """Run one named suite; ``instances=None`` uses the suite's stock size."""
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; choose from {sorted(SUITES)}")
    if instances is None:
        instances = DEFAULT_INSTANCES[name]
    return SUITES[name](instances=instances, seed=seed, collect_limit=collect_limit)
