"""Exhaustive-solver checks, including a literal itertools re-enumeration."""

import itertools
import time

import numpy as np
import numpy.testing as npt
import pytest

from moelab.lp_oracle import solve_exact, verify_mechanism_gap, verify_proposition
from moelab.scoring import CompatibilityMatrix


def raw(values):
    return CompatibilityMatrix(np.asarray(values, dtype=float), "raw_logits")


def eighths(rng, shape):
    """Scores on a 1/8 grid: every subset sum is exact in float64."""
    return rng.integers(-24, 25, shape) / 8.0


def naive_enumeration(s, c):
    """Direct per-mask search with itertools; mirrors the documented policy:
    exactly min(c, M) picks when all scores are positive, else sizes 0..c."""
    flat = [float(v) for v in s.reshape(-1)]
    m = len(flat)
    sizes = [min(c, m)] if all(v > 0 for v in flat) else range(min(c, m) + 1)
    best, optima, enumerated = -np.inf, [], 0
    for size in sizes:
        for combo in itertools.combinations(range(m), size):
            enumerated += 1
            total = sum(flat[i] for i in combo)
            if total > best:
                best, optima = total, [combo]
            elif total == best:
                optima.append(combo)
    masks = []
    for combo in optima:
        vec = [0] * m
        for i in combo:
            vec[i] = 1
        masks.append(tuple(vec))
    return best, len(masks), min(masks), enumerated


def test_matches_naive_enumeration_on_exact_grids():
    rng = np.random.default_rng(10)
    for trial in range(40):
        t, n = int(rng.integers(1, 5)), int(rng.integers(1, 4))
        c = int(rng.integers(0, t * n + 1))
        s = eighths(rng, (t, n))
        got = solve_exact(raw(s), c)
        best, n_opt, lex_mask, enumerated = naive_enumeration(s, c)
        assert got.optimal_objective == best, f"trial {trial}"
        assert got.num_optima == n_opt
        assert tuple(got.optimal_mask.reshape(-1)) == lex_mask
        assert got.num_masks_enumerated == enumerated
        assert got.optimal_mask.sum() <= c


def test_matches_naive_enumeration_on_positive_grids():
    rng = np.random.default_rng(11)
    for _ in range(25):
        t, n = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        c = int(rng.integers(0, t * n + 1))
        s = rng.integers(1, 65, (t, n)) / 8.0
        got = solve_exact(raw(s), c)
        best, n_opt, lex_mask, enumerated = naive_enumeration(s, c)
        assert got.optimal_objective == best
        assert got.num_optima == n_opt
        assert tuple(got.optimal_mask.reshape(-1)) == lex_mask
        assert got.num_masks_enumerated == enumerated
        assert got.optimal_mask.sum() == min(c, t * n)


def test_worked_example_unique_optimum():
    res = solve_exact(raw([[0.9, 0.1], [0.4, 0.8], [0.7, 0.2]]), 3)
    assert res.optimal_objective == pytest.approx(2.4, abs=1e-12)
    npt.assert_array_equal(res.optimal_mask, [[1, 0], [0, 1], [1, 0]])
    assert res.num_optima == 1


def test_tied_entries_are_counted_and_broken_lexicographically():
    res = solve_exact(raw([[1.0, 1.0], [0.0, 0.0]]), 1)
    assert res.optimal_objective == 1.0
    assert res.num_optima == 2
    # Lexicographically smallest flattened optimum prefers zeros up front.
    npt.assert_array_equal(res.optimal_mask, [[0, 1], [0, 0]])
    assert verify_proposition(raw([[1.0, 1.0], [0.0, 0.0]]), 1)


def test_all_zero_scores():
    res = solve_exact(raw(np.zeros((2, 3))), 4)
    assert res.optimal_objective == 0.0
    npt.assert_array_equal(res.optimal_mask, np.zeros((2, 3), dtype=int))
    # Sizes 0..4 of 6 entries: 1 + 6 + 15 + 20 + 15 feasible masks, all optimal.
    assert res.num_masks_enumerated == 57
    assert res.num_optima == 57


def test_budget_zero_and_full():
    s = raw([[2.0, 1.0], [0.5, 3.0]])
    empty = solve_exact(s, 0)
    assert empty.optimal_objective == 0.0
    assert empty.num_optima == 1
    full = solve_exact(s, 4)
    assert full.optimal_objective == pytest.approx(6.5)
    npt.assert_array_equal(full.optimal_mask, np.ones((2, 2), dtype=int))


def test_negative_scores_leave_bad_entries_unpicked():
    res = solve_exact(raw([[-1.0, 2.0], [-3.0, 0.5]]), 3)
    assert res.optimal_objective == pytest.approx(2.5)
    npt.assert_array_equal(res.optimal_mask, [[0, 1], [0, 1]])


def test_enumeration_bound_and_budget_range_are_enforced():
    with pytest.raises(ValueError, match="enumeration bound"):
        solve_exact(raw(np.ones((5, 5))), 2)
    with pytest.raises(ValueError, match="budget"):
        solve_exact(raw(np.ones((2, 2))), 5)
    with pytest.raises(ValueError, match="budget"):
        solve_exact(raw(np.ones((2, 2))), -1)


def test_worst_case_instance_is_fast():
    rng = np.random.default_rng(12)
    start = time.perf_counter()
    res = solve_exact(raw(rng.uniform(0.0, 1.0, (6, 4))), 12)
    elapsed = time.perf_counter() - start
    assert res.num_masks_enumerated == 2704156  # C(24, 12)
    assert elapsed < 2.0


def test_proposition_holds_on_random_positive_instances():
    rng = np.random.default_rng(13)
    for _ in range(60):
        t, n = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        c = int(rng.integers(0, t * n + 1))
        assert verify_proposition(raw(rng.uniform(0.0, 1.0, (t, n))), c)


def test_mechanism_gap_worked_example():
    gap = verify_mechanism_gap(raw([[5.0, 4.0], [1.0, 2.0]]), 2)
    assert gap.m_tc == 7.0
    assert gap.m_usmoe == 9.0
    assert gap.m_ec == 9.0
    assert gap.usmoe_dominates


def test_mechanism_gap_requires_divisible_budget_and_raw_basis():
    with pytest.raises(ValueError, match="multiple"):
        verify_mechanism_gap(raw(np.ones((2, 3))), 5)
    with pytest.raises(ValueError, match="raw"):
        verify_mechanism_gap(CompatibilityMatrix(np.full((2, 2), 0.5), "sigmoid"), 2)


def test_mechanism_gap_dominates_on_random_square_instances():
    rng = np.random.default_rng(14)
    for _ in range(60):
        t = int(rng.integers(2, 7))
        m = int(rng.integers(1, t + 1))
        gap = verify_mechanism_gap(raw(rng.normal(size=(t, t))), m * t)
        assert gap.usmoe_dominates
