"""Exact reference solver for the budgeted assignment problem.

The selection problem behind routing is a tiny integer program: pick 0/1
indicators x_ij maximizing sum(S_ij * x_ij) subject to sum(x_ij) <= c.
Its optimum is what global top-c selection claims to attain, so this
module computes the optimum by exhaustive search and never by sorting or
selecting, keeping it an independent witness.

Exhaustive search is organized as a meet-in-the-middle sweep: the
flattened instance is split into two halves, every subset of each half is
materialized with its size and score sum, and half-optima are combined
per size split.  Within one split (kA, kB) any mask hitting the combined
optimum must be optimal in both halves separately (sumA <= maxA and
sumB <= maxB force equality), so tie counting and lexicographic tie
breaking stay exact.  Every feasible mask is covered this way, at a cost
of 2^(M/2) instead of 2^M work for M = T*N flattened entries.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np

from .routing import RoutingBudget, route_expert_choice, route_token_choice, route_unified, selection_objective
from .scoring import CompatibilityMatrix

ENUMERATION_BOUND = 24


@dataclass(frozen=True)
class OracleResult:
    """Exhaustive-search optimum of one budgeted assignment instance."""

    optimal_mask: np.ndarray
    optimal_objective: float
    num_masks_enumerated: int
    num_optima: int


@dataclass(frozen=True)
class MechanismGap:
    """Raw-score objectives of the three mechanisms at one shared budget."""

    m_tc: float
    m_ec: float
    m_usmoe: float

    @property
    def usmoe_dominates(self) -> bool:
        return self.m_usmoe >= self.m_tc and self.m_usmoe >= self.m_ec


def _half_tables(half_scores: np.ndarray):
    """Enumerate every subset of one half of the flattened instance.

    Returns, indexed by subset size k: the best score sum, the number of
    subsets attaining it, and the attaining subset whose 0/1 vector is
    lexicographically smallest (vector position 0 weighs heaviest).
    """
    h = half_scores.shape[0]
    subsets = np.arange(1 << h, dtype=np.uint32)
    # bit j of the subset id corresponds to half element j
    bits = ((subsets[:, None] >> np.arange(h, dtype=np.uint32)) & 1).astype(np.int64)
    sums = bits @ half_scores if h else np.zeros(1)
    sizes = bits.sum(axis=1)
    # lexicographic key: element 0 is the most significant digit
    lex_weights = (1 << (h - 1 - np.arange(h))) if h else np.zeros(0, dtype=np.int64)
    lex_keys = bits @ lex_weights if h else np.zeros(1, dtype=np.int64)

    best, count, lex_vec = {}, {}, {}
    for k in range(h + 1):
        at_k = sizes == k
        s_k = sums[at_k]
        best_k = float(s_k.max())
        ties = at_k.copy()
        ties[at_k] = s_k == best_k
        best[k] = best_k
        count[k] = int(np.count_nonzero(ties))
        winner = np.flatnonzero(ties)[np.argmin(lex_keys[ties])]
        lex_vec[k] = bits[winner]
    return best, count, lex_vec


def solve_exact(scores: CompatibilityMatrix, c: int) -> OracleResult:
    """Exhaustively solve one instance with budget c.

    With strictly positive scores the optimum uses exactly min(c, T*N)
    selections, so only that mask size is searched; otherwise every size
    up to c is.  Ties on the objective are counted, and the reported mask
    is the lexicographically smallest flattened optimum.
    """
    s = scores.scores
    num_tokens, num_experts = s.shape
    m = num_tokens * num_experts
    if m > ENUMERATION_BOUND:
        raise ValueError(
            f"instance has {m} pairs, enumeration bound is {ENUMERATION_BOUND}"
        )
    if not 0 <= c <= m:
        raise ValueError(f"budget must lie in [0, {m}], got {c}")

    flat = s.reshape(-1)
    h_a = m - m // 2
    best_a, count_a, lex_a = _half_tables(flat[:h_a])
    best_b, count_b, lex_b = _half_tables(flat[h_a:])

    exact_size = bool(s.size) and bool((flat > 0).all())
    target = min(c, m)
    if exact_size:
        splits = [
            (ka, target - ka)
            for ka in range(max(0, target - (m - h_a)), min(h_a, target) + 1)
        ]
    else:
        splits = [
            (ka, kb)
            for ka in range(h_a + 1)
            for kb in range(m - h_a + 1)
            if ka + kb <= target
        ]

    best_total = max(best_a[ka] + best_b[kb] for ka, kb in splits)
    num_optima = 0
    candidates = []
    for ka, kb in splits:
        if best_a[ka] + best_b[kb] == best_total:
            num_optima += count_a[ka] * count_b[kb]
            candidates.append(np.concatenate([lex_a[ka], lex_b[kb]]))
    optimal_flat = min(candidates, key=lambda v: tuple(v))
    num_enumerated = sum(comb(h_a, ka) * comb(m - h_a, kb) for ka, kb in splits)

    return OracleResult(
        optimal_mask=optimal_flat.reshape(s.shape).astype(np.int64),
        optimal_objective=best_total,
        num_masks_enumerated=num_enumerated,
        num_optima=num_optima,
    )


def verify_proposition(scores: CompatibilityMatrix, c: int) -> bool:
    """Check that global top-c selection attains the exhaustive optimum.

    Objectives must agree to 1e-12; masks may differ only on score ties,
    which is why only the objective is compared.
    """
    plan = route_unified(scores, RoutingBudget.global_pairs(c))
    routed = selection_objective(scores, plan)
    oracle = solve_exact(scores, c)
    return abs(routed - oracle.optimal_objective) <= 1e-12


def verify_mechanism_gap(scores: CompatibilityMatrix, c: int) -> MechanismGap:
    """Objectives of the three mechanisms on one raw matrix at budget c.

    Requires c divisible by the token count and the expert count so the
    row and column budgets are integers.  Global selection can never lose:
    the other two masks are feasible points of the same budget-c program.
    """
    if scores.basis != "raw_logits":
        raise ValueError("mechanism gap is measured on raw scores")
    num_tokens, num_experts = scores.scores.shape
    if c <= 0 or c % num_tokens or c % num_experts:
        raise ValueError(
            f"budget {c} must be a positive multiple of both {num_tokens} and {num_experts}"
        )
    tc = route_token_choice(scores, c // num_tokens)
    ec = route_expert_choice(scores, c // num_experts)
    us = route_unified(scores, RoutingBudget.global_pairs(c))
    return MechanismGap(
        m_tc=selection_objective(scores, tc),
        m_ec=selection_objective(scores, ec),
        m_usmoe=selection_objective(scores, us),
    )
