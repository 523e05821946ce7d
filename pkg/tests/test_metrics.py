"""Diagnostics counting and the cost model's exact and algebraic ratios."""

from fractions import Fraction

import numpy as np
import numpy.testing as npt
import pytest
import sympy

from moelab.metrics import diagnostics, flops_estimate
from moelab.routing import (
    RoutingBudget,
    RoutingPlan,
    route_expert_choice,
    route_token_choice,
    route_unified,
)
from moelab.scoring import CompatibilityMatrix


def raw(values):
    return CompatibilityMatrix(np.asarray(values, dtype=float), "raw_logits")


def plan_from_mask(mask, seq_len=None):
    mask = np.asarray(mask)
    return RoutingPlan(
        mask=mask,
        gates=mask.astype(float),
        mode="usmoe",
        scope="sequence",
        budget_used=int(mask.sum()),
        gate_basis="raw_logits",
        seq_len=mask.shape[0] if seq_len is None else seq_len,
    )


# --- diagnostics: hand counts ----------------------------------------------


def test_drop_ratio_and_load_hand_count():
    diag = diagnostics(plan_from_mask([[1, 0], [0, 1], [0, 0]]), 3, 2)
    assert diag.drop_ratio == pytest.approx(1 / 3)
    npt.assert_array_equal(diag.load_per_expert, [1, 1])
    assert diag.budget_used == 2
    assert diag.experts_per_sequence == 2.0


def test_full_mask_is_uniform():
    diag = diagnostics(plan_from_mask(np.ones((4, 3), dtype=int)), 4, 3)
    assert diag.drop_ratio == 0.0
    assert diag.load_cv == 0.0
    assert diag.experts_per_sequence == 3.0


def test_expert_choice_hand_instance_drops_half():
    plan = route_expert_choice(raw([[0.9, 0.8], [0.2, 0.1]]), cap=1)
    diag = diagnostics(plan, 2, 2)
    assert diag.drop_ratio == 0.5
    assert diag.load_cv == 0.0


def test_experts_per_sequence_averages_over_sequences():
    # Sequence 0 activates one distinct expert, sequence 1 two.
    mask = [[1, 0], [1, 0], [1, 0], [0, 1]]
    diag = diagnostics(plan_from_mask(mask, seq_len=2), 2, 2, num_sequences=2)
    assert diag.experts_per_sequence == 1.5


def test_shape_mismatch_is_rejected():
    with pytest.raises(ValueError):
        diagnostics(plan_from_mask([[1, 0], [0, 1]]), 3, 2)


# --- diagnostics: mechanism-wide invariants ---------------------------------


def test_token_choice_drop_ratio_is_always_zero():
    rng = np.random.default_rng(10)
    for _ in range(30):
        t, n = int(rng.integers(1, 9)), int(rng.integers(2, 6))
        k = int(rng.integers(1, n + 1))
        plan = route_token_choice(raw(rng.normal(size=(t, n))), k)
        assert diagnostics(plan, t, n).drop_ratio == 0.0


def test_expert_choice_load_cv_is_always_zero():
    rng = np.random.default_rng(11)
    for _ in range(30):
        t, n = int(rng.integers(1, 9)), int(rng.integers(2, 6))
        cap = int(rng.integers(1, t + 1))
        plan = route_expert_choice(raw(rng.normal(size=(t, n))), cap)
        diag = diagnostics(plan, t, n)
        assert diag.load_cv == 0.0
        npt.assert_array_equal(diag.load_per_expert, np.full(n, cap))


def test_load_sums_to_budget_used():
    rng = np.random.default_rng(12)
    for _ in range(30):
        t, n = int(rng.integers(1, 9)), int(rng.integers(2, 6))
        c = int(rng.integers(0, t * n + 1))
        plan = route_unified(raw(rng.normal(size=(t, n))), RoutingBudget.global_pairs(c))
        diag = diagnostics(plan, t, n)
        assert int(diag.load_per_expert.sum()) == diag.budget_used == c


def test_column_permutation_permutes_load():
    rng = np.random.default_rng(13)
    mask = (rng.random((6, 4)) < 0.4).astype(int)
    perm = rng.permutation(4)
    base = diagnostics(plan_from_mask(mask), 6, 4)
    permuted = diagnostics(plan_from_mask(mask[:, perm]), 6, 4)
    npt.assert_array_equal(permuted.load_per_expert, base.load_per_expert[perm])
    assert permuted.drop_ratio == base.drop_ratio
    assert permuted.load_cv == pytest.approx(base.load_cv)


# --- cost model --------------------------------------------------------------


def test_flops_hand_worked_numbers():
    est = flops_estimate((2, 4, 3, 5), RoutingBudget.global_pairs(7))
    assert est.expert_flops == 7 * (2 * 2 * 4 + 2 * 4 * 2) == 224
    assert est.router_flops == 2 * 5 * 2 * 3 == 60
    assert est.total_flops == 284


def test_fractional_vs_per_token_expert_ratio_is_exactly_three_quarters():
    dims = (8, 16, 4, 6)
    base = flops_estimate(dims, RoutingBudget.per_token(2))
    est = flops_estimate(
        dims, RoutingBudget.fractional(Fraction(3, 2)), baseline=base, baseline_label="k=2"
    )
    assert est.expert_ratio == Fraction(3, 4)
    assert est.baseline_label == "k=2"


def test_zero_budget_costs_only_the_router():
    dims = (3, 5, 4, 7)
    est = flops_estimate(dims, RoutingBudget.global_pairs(0))
    assert est.expert_flops == 0
    assert est.total_flops == est.router_flops == 2 * 7 * 3 * 4


def test_expert_flops_strictly_monotone_in_budget():
    dims = (4, 8, 3, 6)
    costs = [
        flops_estimate(dims, RoutingBudget.global_pairs(c)).expert_flops
        for c in range(0, 18, 3)
    ]
    assert all(a < b for a, b in zip(costs, costs[1:]))


def test_expert_flops_linear_in_selected_pairs():
    dims = (4, 8, 3, 6)
    per_pair = {
        flops_estimate(dims, RoutingBudget.global_pairs(c)).expert_flops / c
        for c in (1, 2, 5, 9)
    }
    assert len(per_pair) == 1


def test_total_ratio_matches_closed_form_symbolically():
    d, d_ff, n, t = sympy.symbols("d d_ff n t", positive=True)
    dims = (d, d_ff, n, t)
    base = flops_estimate(dims, RoutingBudget.per_token(2))
    est = flops_estimate(
        dims, RoutingBudget.fractional(sympy.Rational(3, 2)), baseline=base
    )
    per_pair = 4 * d * d_ff
    fixed = 2 * t * d * n
    expected = (fixed + sympy.Rational(3, 2) * t * per_pair) / (fixed + 2 * t * per_pair)
    assert sympy.simplify(est.total_ratio - expected) == 0
