"""Token-expert compatibility scores and the score mappings routers select on.

A raw score matrix is ``logits = h @ W`` with one row per token and one
column per expert.  Three mapped bases are derived from it:

* ``softmax_rows`` - each token's row normalized; the token-choice basis.
* ``sigmoid``      - elementwise logistic; the expert-choice basis.
* ``unified``      - convex blend of the two, weighted by ``alpha`` on the
  sigmoid term.  Blending puts per-token and per-expert affinities on one
  comparable scale so a single global selection can rank all pairs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Matrix, matmul, sigmoid, stable_softmax

BASES = ("raw_logits", "softmax_rows", "sigmoid", "softmax_cols", "unified")


@dataclass(frozen=True)
class CompatibilityMatrix:
    """A (tokens x experts) score matrix tagged with the basis it lives in."""

    scores: Matrix
    basis: str

    def __post_init__(self) -> None:
        if self.basis not in BASES:
            raise ValueError(f"unknown basis {self.basis!r}")
        s = np.asarray(self.scores, dtype=np.float64)
        if s.ndim != 2:
            raise ValueError("scores must be 2-D (tokens x experts)")
        if s.size and not np.isfinite(s).all():
            raise ValueError("scores contain non-finite entries")
        object.__setattr__(self, "scores", s)
        if self.basis == "softmax_rows":
            if not np.allclose(s.sum(axis=1), 1.0, atol=1e-12, rtol=0.0):
                raise ValueError("softmax_rows basis requires rows summing to 1")
        elif self.basis == "softmax_cols":
            if not np.allclose(s.sum(axis=0), 1.0, atol=1e-12, rtol=0.0):
                raise ValueError("softmax_cols basis requires columns summing to 1")
        elif self.basis in ("sigmoid", "unified"):
            # Open interval mathematically; allow the closed ends so that
            # saturated float64 values surface in results rather than here.
            if s.size and (s.min() < 0.0 or s.max() > 1.0):
                raise ValueError(f"{self.basis} basis requires entries in [0, 1]")

    @property
    def num_tokens(self) -> int:
        return self.scores.shape[0]

    @property
    def num_experts(self) -> int:
        return self.scores.shape[1]


@dataclass(frozen=True)
class UnifiedScoreConfig:
    """Blend weight for the unified basis; ``alpha`` scales the sigmoid term."""

    alpha: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")

    @property
    def softmax_weight(self) -> float:
        return 1.0 - self.alpha


def logits(h: Matrix, router_weights: Matrix) -> CompatibilityMatrix:
    """Raw compatibility logits for tokens ``h`` (T x d) against ``W`` (d x N)."""
    return CompatibilityMatrix(matmul(h, router_weights), "raw_logits")


def _require_raw(scores: CompatibilityMatrix, op: str) -> Matrix:
    if scores.basis != "raw_logits":
        raise ValueError(f"{op} expects raw_logits input, got {scores.basis!r}")
    return scores.scores


def token_choice_scores(raw: CompatibilityMatrix) -> CompatibilityMatrix:
    """Row-wise softmax: each token distributes unit mass over experts."""
    z = _require_raw(raw, "token_choice_scores")
    return CompatibilityMatrix(stable_softmax(z, axis=1), "softmax_rows")


def expert_choice_scores(
    raw: CompatibilityMatrix, mapping: str = "sigmoid"
) -> CompatibilityMatrix:
    """Per-entry affinities for expert-side selection.

    ``sigmoid`` (default) scores every pair independently.  The legacy
    ``softmax_columns`` variant normalizes over tokens within each expert
    column; it is kept only so the two conventions can be compared.
    """
    z = _require_raw(raw, "expert_choice_scores")
    if mapping == "sigmoid":
        return CompatibilityMatrix(sigmoid(z), "sigmoid")
    if mapping == "softmax_columns":
        return CompatibilityMatrix(stable_softmax(z, axis=0), "softmax_cols")
    raise ValueError(f"unknown expert-choice mapping {mapping!r}")


def unified_scores(
    raw: CompatibilityMatrix, cfg: UnifiedScoreConfig = UnifiedScoreConfig()
) -> CompatibilityMatrix:
    """Blend the two mapped bases: (1-alpha)*softmax_rows + alpha*sigmoid."""
    z = _require_raw(raw, "unified_scores")
    u = cfg.softmax_weight * stable_softmax(z, axis=1) + cfg.alpha * sigmoid(z)
    return CompatibilityMatrix(u, "unified")
