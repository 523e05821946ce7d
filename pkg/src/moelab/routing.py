"""Sparse token-expert assignment under a selection budget.

Three mechanisms operate on one (tokens x experts) score matrix:

* token choice  - every token keeps its k best experts (row-wise top-k);
* expert choice - every expert keeps its cap best tokens (column-wise
  top-k), so tokens can be dropped or doubled;
* unified       - the single global top-c over all pairs, which is free to
  spend the same budget unevenly across tokens and experts.

All three break score ties the same way: the pair with the smaller
flattened row-major index wins.  Gates are the selected score values as
given; nothing is renormalized after selection.

A plan may cover several equal-length sequences stacked row-wise.  With
``scope="sequence"`` each block is routed independently (and the budget is
per block); with ``scope="batch"`` all rows form one pool.
"""

from __future__ import annotations

import numbers
from dataclasses import dataclass, field

import numpy as np

from .numerics import Matrix, round_half_up
from .scoring import CompatibilityMatrix

MODES = ("token_choice", "expert_choice", "usmoe")
SCOPES = ("sequence", "batch")


@dataclass(frozen=True)
class RoutingBudget:
    """How many token-expert pairs a mechanism may activate.

    kind:
      global_pairs - exactly ``value`` pairs per scope unit
      per_token    - ``value`` experts for every token
      per_expert   - ``value`` tokens for every expert
      fractional   - ``value`` average experts per token; resolves to
                     round-half-up(value * T) pairs per scope unit
    """

    kind: str
    value: float

    _KINDS = ("global_pairs", "per_token", "per_expert", "fractional")

    def __post_init__(self) -> None:
        if self.kind not in self._KINDS:
            raise ValueError(f"unknown budget kind {self.kind!r}")
        # Symbolic values (for algebraic cost checks) skip numeric validation.
        if isinstance(self.value, numbers.Real):
            if self.value < 0:
                raise ValueError("budget value must be non-negative")
            if self.kind in ("global_pairs", "per_token", "per_expert"):
                if self.value != int(self.value):
                    raise ValueError(f"{self.kind} budget must be an integer")

    @classmethod
    def global_pairs(cls, c: int) -> "RoutingBudget":
        return cls("global_pairs", c)

    @classmethod
    def per_token(cls, k: int) -> "RoutingBudget":
        return cls("per_token", k)

    @classmethod
    def per_expert(cls, cap: int) -> "RoutingBudget":
        return cls("per_expert", cap)

    @classmethod
    def fractional(cls, k_frac: float) -> "RoutingBudget":
        return cls("fractional", k_frac)

    def resolve_pairs(self, num_tokens: int, num_experts: int) -> int:
        """Total pairs this budget buys for one scope unit of T tokens.

        Explicit budgets that exceed the instance are errors; only the
        fractional kind clamps, since its product is a derived quantity.
        """
        limit = num_tokens * num_experts
        if self.kind == "global_pairs":
            c = int(self.value)
            if c > limit:
                raise ValueError(f"budget {c} exceeds {limit} available pairs")
        elif self.kind == "per_token":
            k = int(self.value)
            if k > num_experts:
                raise ValueError(f"per-token budget {k} exceeds {num_experts} experts")
            c = k * num_tokens
        elif self.kind == "per_expert":
            cap = int(self.value)
            if cap > num_tokens:
                raise ValueError(f"per-expert budget {cap} exceeds {num_tokens} tokens")
            c = cap * num_experts
        else:  # fractional
            c = min(max(round_half_up(self.value * num_tokens), 0), limit)
        return c


@dataclass(frozen=True)
class RoutingPlan:
    """The outcome of one routing decision.

    mask holds 0/1 selections, gates the score value at every selected
    pair (zero elsewhere).  ``gate_basis`` records which score mapping the
    gates came from and ``alpha`` the blend weight when that mapping is
    unified; both are needed to differentiate through the gates later.
    """

    mask: np.ndarray
    gates: Matrix
    mode: str
    scope: str
    budget_used: int
    gate_basis: str = "raw_logits"
    alpha: float | None = None
    seq_len: int | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.scope not in SCOPES:
            raise ValueError(f"unknown scope {self.scope!r}")
        mask = np.asarray(self.mask)
        if mask.shape != np.asarray(self.gates).shape:
            raise ValueError("mask and gates must share a shape")
        if not np.isin(mask, (0, 1)).all():
            raise ValueError("mask entries must be 0 or 1")
        object.__setattr__(self, "mask", mask.astype(np.int64))
        if int(mask.sum()) != self.budget_used:
            raise ValueError("budget_used does not match the mask")
        if ((np.asarray(self.gates) != 0.0) & (mask == 0)).any():
            raise ValueError("gates must vanish off the selected pairs")

    @property
    def num_tokens(self) -> int:
        return self.mask.shape[0]

    @property
    def num_experts(self) -> int:
        return self.mask.shape[1]


@dataclass(frozen=True)
class DominanceProfile:
    """Ascending sorted selected raw scores of each mechanism at equal budget."""

    usmoe: np.ndarray
    token_choice: np.ndarray
    expert_choice: np.ndarray
    budget: int


def _blocks(total_rows: int, scope: str, seq_len: int | None):
    """Yield (start, stop) row ranges of the scope units."""
    if seq_len is None:
        seq_len = total_rows
    if seq_len <= 0 or total_rows % seq_len:
        raise ValueError(
            f"seq_len {seq_len} does not evenly divide {total_rows} rows"
        )
    if scope not in SCOPES:
        raise ValueError(f"unknown scope {scope!r}")
    if scope == "batch":
        yield 0, total_rows
    else:
        for start in range(0, total_rows, seq_len):
            yield start, start + seq_len


def _topk_rows(s: Matrix, k: int) -> np.ndarray:
    """Row-wise top-k mask; ties go to the smaller column index."""
    mask = np.zeros(s.shape, dtype=np.int64)
    # Stable argsort on the negated row keeps earlier indices first on ties.
    order = np.argsort(-s, axis=1, kind="stable")[:, :k]
    np.put_along_axis(mask, order, 1, axis=1)
    return mask


def _topk_cols(s: Matrix, cap: int) -> np.ndarray:
    """Column-wise top-cap mask; ties go to the smaller row index."""
    mask = np.zeros(s.shape, dtype=np.int64)
    order = np.argsort(-s, axis=0, kind="stable")[:cap, :]
    np.put_along_axis(mask, order, 1, axis=0)
    return mask


def _topk_global(s: Matrix, c: int) -> np.ndarray:
    """Global top-c mask over all entries; ties go to the smaller flat index."""
    flat = s.reshape(-1)
    order = np.argsort(-flat, kind="stable")[:c]
    mask = np.zeros(flat.shape, dtype=np.int64)
    mask[order] = 1
    return mask.reshape(s.shape)


def route_token_choice(scores: CompatibilityMatrix, k: int) -> RoutingPlan:
    """Each token activates its k highest-scoring experts.

    Row-wise selection is scope-free: it neither drops tokens nor shares
    budget across them.  Accepts softmax_rows (canonical), unified, or raw
    scores; the gates are whatever values were selected on.
    """
    s = scores.scores
    num_experts = s.shape[1]
    if not 1 <= k <= num_experts:
        raise ValueError(f"k must lie in [1, {num_experts}], got {k}")
    mask = _topk_rows(s, k)
    return RoutingPlan(
        mask=mask,
        gates=s * mask,
        mode="token_choice",
        scope="sequence",
        budget_used=int(mask.sum()),
        gate_basis=scores.basis,
        seq_len=s.shape[0],
    )


def route_expert_choice(
    scores: CompatibilityMatrix,
    cap: int,
    scope: str = "sequence",
    seq_len: int | None = None,
) -> RoutingPlan:
    """Each expert activates its cap highest-scoring tokens per scope unit.

    Column-wise selection balances expert load exactly but may drop a
    token entirely or assign it several experts.  Canonical basis is
    sigmoid; the legacy column-softmax basis is accepted for comparison.
    """
    s = scores.scores
    mask = np.zeros(s.shape, dtype=np.int64)
    for start, stop in _blocks(s.shape[0], scope, seq_len):
        block = s[start:stop]
        if not 1 <= cap <= block.shape[0]:
            raise ValueError(
                f"cap must lie in [1, {block.shape[0]}] per scope unit, got {cap}"
            )
        mask[start:stop] = _topk_cols(block, cap)
    return RoutingPlan(
        mask=mask,
        gates=s * mask,
        mode="expert_choice",
        scope=scope,
        budget_used=int(mask.sum()),
        gate_basis=scores.basis,
        seq_len=seq_len if seq_len is not None else s.shape[0],
    )


def route_unified(
    scores: CompatibilityMatrix,
    budget: RoutingBudget,
    scope: str = "sequence",
    seq_len: int | None = None,
    alpha: float | None = None,
) -> RoutingPlan:
    """Activate the budget's c highest-scoring pairs per scope unit.

    The one mechanism that lets strong tokens take several experts while
    weak tokens take none, because the ranking runs over the flattened
    matrix rather than within rows or columns.  Canonical basis is
    unified; any basis is accepted (verification suites rank raw scores).
    """
    s = scores.scores
    num_experts = s.shape[1]
    mask = np.zeros(s.shape, dtype=np.int64)
    for start, stop in _blocks(s.shape[0], scope, seq_len):
        block = s[start:stop]
        c = budget.resolve_pairs(block.shape[0], num_experts)
        mask[start:stop] = _topk_global(block, c)
    return RoutingPlan(
        mask=mask,
        gates=s * mask,
        mode="usmoe",
        scope=scope,
        budget_used=int(mask.sum()),
        gate_basis=scores.basis,
        alpha=alpha,
        seq_len=seq_len if seq_len is not None else s.shape[0],
    )


def selection_objective(scores: CompatibilityMatrix, plan: RoutingPlan) -> float:
    """Sum of the score values at the plan's selected pairs."""
    if scores.scores.shape != plan.mask.shape:
        raise ValueError("scores and plan shapes differ")
    return float((scores.scores * plan.mask).sum())


def budget_certificate(
    scores: CompatibilityMatrix, plan: RoutingPlan
) -> tuple[float, float, bool]:
    """Optimality certificate for a global-top-c plan.

    Returns (min selected score, max unselected score, ok) over the scope
    units; ok means no unselected pair outscores a selected one anywhere.
    Ties at the boundary are fine, the comparison is non-strict.
    """
    s = scores.scores
    worst_sel, best_unsel, ok = np.inf, -np.inf, True
    for start, stop in _blocks(s.shape[0], plan.scope, plan.seq_len):
        block = s[start:stop]
        sel = plan.mask[start:stop].astype(bool)
        if sel.any():
            worst_sel = min(worst_sel, float(block[sel].min()))
        if (~sel).any():
            best_unsel = max(best_unsel, float(block[~sel].max()))
        if sel.any() and (~sel).any():
            ok = ok and float(block[sel].min()) >= float(block[~sel].max())
    return worst_sel, best_unsel, ok


def dominance_profile(raw: CompatibilityMatrix, c: int) -> DominanceProfile:
    """Sorted selected raw scores of the three mechanisms at equal budget c.

    Requires c divisible by both the token and the expert count so that
    per-token and per-expert budgets land on integers.  The unified
    profile dominates the other two pointwise: its i-th smallest selected
    score is at least theirs, because the global top-c multiset majorizes
    every other c-subset of the same matrix.
    """
    if raw.basis != "raw_logits":
        raise ValueError("dominance_profile ranks raw scores")
    s = raw.scores
    num_tokens, num_experts = s.shape
    if c <= 0 or c % num_tokens or c % num_experts:
        raise ValueError(
            f"budget {c} must be a positive multiple of both {num_tokens} and {num_experts}"
        )
    profiles = {}
    for name, mask in (
        ("usmoe", _topk_global(s, c)),
        ("token_choice", _topk_rows(s, c // num_tokens)),
        ("expert_choice", _topk_cols(s, c // num_experts)),
    ):
        profiles[name] = np.sort(s[mask.astype(bool)])
    return DominanceProfile(
        usmoe=profiles["usmoe"],
        token_choice=profiles["token_choice"],
        expert_choice=profiles["expert_choice"],
        budget=c,
    )
