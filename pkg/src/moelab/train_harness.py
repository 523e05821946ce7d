"""Synthetic training bench for comparing routing mechanisms end to end.

The task is cluster-separable regression: tokens are drawn near one of a
few well-separated centers and the target of a token in cluster c is a
fixed linear map of the token.  Each cluster's map is the sum of several
rank-limited primitive maps drawn from a small shared pool, so one
expert sized to a single primitive cannot realize a cluster's map alone:
full accuracy on a token needs all of its cluster's primitives.  A
correctly routed expert bank (one expert per primitive) realizes the
task exactly, so any remaining loss is attributable to routing and
capacity decisions, and the marginal value of granting a token another
well-chosen expert is real rather than incidental.

Every token reserves coordinate 0 as a constant marker feature — the
input-side analogue of a bias term, at a scale that makes it a real part
of the signal.  Corruption replaces the remaining content coordinates of
a fixed fraction of each sequence's tokens with isotropic noise of scale
``corrupt_std`` and zeroes the target, while the marker survives: it is
part of the encoding, not the content.  Spending expert budget on such a token is
harmful by construction — the experts must transmit the marker row to
fit the clean maps, so a pad token forced through an expert emits junk,
and shrinking that junk means shrinking marker capacity that the clean
targets need — and the marker determines which score rules can learn to
decline it.  A rule with an absolute activation can anchor a
negative weight on the marker so that content-free tokens score below
threshold, whereas a row-normalized rule is shift-invariant — it
renormalizes each row to the same total stake no matter how low the
whole row sits — and must keep spending on every token.

Training is full-batch gradient descent on one fixed sampled training
set; evaluation uses freshly sampled sequences.  Everything is seeded, so
a (config, seed) pair pins the entire run byte for byte.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .metrics import diagnostics
from .moe_layer import MoeLayerParams, backward, forward, init_params
from .numerics import Matrix, Rng, round_half_up
from .routing import RoutingBudget, RoutingPlan, route_expert_choice, route_token_choice, route_unified
from .scoring import (
    CompatibilityMatrix,
    UnifiedScoreConfig,
    expert_choice_scores,
    logits,
    token_choice_scores,
    unified_scores,
)


@dataclass(frozen=True)
class SyntheticTask:
    """Frozen task instance: centers, primitive map pool, and noise settings.

    ``primitive_down[j] @ primitive_up[j]`` is the j-th rank-limited
    primitive map; cluster ``c`` owns the set of primitives named by
    ``cluster_primitives[c]`` and its targets follow their sum.  The two
    factors are kept so that a model expert of matching inner width can
    be initialized to a primitive exactly.  Coordinate 0 of every center
    (and of every sampled token) is the constant marker feature.
    """

    centers: Matrix
    primitive_down: tuple[Matrix, ...]   # (d, map_rank) each
    primitive_up: tuple[Matrix, ...]     # (map_rank, d) each
    cluster_primitives: np.ndarray       # (num_clusters, m) indices into the pool
    seq_len: int
    jitter_std: float
    noise_std: float
    corrupt_fraction: float
    corrupt_std: float
    seed: int

    @property
    def num_clusters(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    @property
    def num_primitives(self) -> int:
        return len(self.primitive_down)

    @property
    def map_rank(self) -> int:
        return self.primitive_down[0].shape[1]

    @property
    def marker(self) -> float:
        return float(self.centers[0, 0])

    @property
    def maps(self) -> tuple[Matrix, ...]:
        """Dense per-cluster maps: sum of the cluster's primitives."""
        dense = [p @ q for p, q in zip(self.primitive_down, self.primitive_up)]
        out = []
        for pair in self.cluster_primitives:
            out.append(sum(dense[j] for j in sorted(set(int(i) for i in pair))))
        return tuple(out)


def make_task(
    num_clusters: int = 4,
    d: int = 8,
    seq_len: int = 16,
    num_primitives: int = 4,
    map_rank: int = 2,
    primitives_per_cluster: int = 3,
    center_radius: float = 3.0,
    marker: float = 3.0,
    jitter_std: float = 0.3,
    noise_std: float = 0.0,
    corrupt_fraction: float = 0.0,
    corrupt_std: float = 0.5,
    seed: int = 0,
) -> SyntheticTask:
    """Sample a task: marker-augmented centers, composed rank-limited maps.

    Center content (coordinates 1..d-1) sits on a radius-
    ``center_radius`` sphere; coordinate 0 is the constant ``marker``
    carried by every token, corrupted or not.  Cluster ``c`` is assigned
    the primitive window ``(c, c+1, ..., c+m-1) mod P`` (a ring over the
    pool of ``P`` primitives), so for ``num_clusters == num_primitives``
    every primitive serves exactly ``m`` clusters and no two clusters
    share the same set.
    """
    if not 0.0 <= corrupt_fraction < 1.0:
        raise ValueError("corrupt_fraction must lie in [0, 1)")
    if num_clusters > num_primitives:
        raise ValueError("need at least as many primitives as clusters")
    if d < 2:
        raise ValueError("need at least one content coordinate besides the marker")
    if not 1 <= map_rank <= d:
        raise ValueError("map_rank must lie in [1, d]")
    if not 1 <= primitives_per_cluster <= num_primitives:
        raise ValueError("primitives_per_cluster must lie in [1, num_primitives]")
    if marker <= 0:
        raise ValueError("marker must be positive")
    rng = Rng((seed, 0))
    raw = rng.normal((num_clusters, d - 1))
    centers = np.full((num_clusters, d), float(marker))
    centers[:, 1:] = center_radius * raw / np.linalg.norm(raw, axis=1, keepdims=True)
    primitive_down = tuple(
        rng.normal((d, map_rank), std=d ** -0.5) for _ in range(num_primitives)
    )
    primitive_up = tuple(
        rng.normal((map_rank, d), std=map_rank ** -0.5) for _ in range(num_primitives)
    )
    pairs = np.array(
        [
            [(c + i) % num_primitives for i in range(primitives_per_cluster)]
            for c in range(num_clusters)
        ],
        dtype=np.int64,
    ).reshape(num_clusters, primitives_per_cluster)
    return SyntheticTask(
        centers=centers,
        primitive_down=primitive_down,
        primitive_up=primitive_up,
        cluster_primitives=pairs,
        seq_len=seq_len,
        jitter_std=jitter_std,
        noise_std=noise_std,
        corrupt_fraction=corrupt_fraction,
        corrupt_std=corrupt_std,
        seed=seed,
    )


@dataclass(frozen=True)
class TaskBatch:
    tokens: Matrix        # (num_sequences * seq_len, d)
    targets: Matrix
    cluster_ids: np.ndarray  # -1 marks corrupted tokens
    num_sequences: int


def sample_batch(task: SyntheticTask, rng: Rng, num_sequences: int) -> TaskBatch:
    """Draw sequences; corrupt round_half_up(fraction * T) tokens in each.

    Jitter and corruption touch only content coordinates: coordinate 0
    stays exactly at the marker value on every token.  Corrupted tokens
    get isotropic noise content of scale ``corrupt_std`` and an all-zero
    target.
    """
    t, d = task.seq_len, task.dim
    total = num_sequences * t
    ids = np.asarray(rng.integers(0, task.num_clusters, (total,)))
    tokens = task.centers[ids].copy()
    tokens[:, 1:] += rng.normal((total, d - 1), std=task.jitter_std)
    targets = np.einsum("td,tdo->to", tokens, np.stack(task.maps)[ids])
    if task.noise_std > 0:
        targets = targets + rng.normal((total, d), std=task.noise_std)
    num_corrupt = round_half_up(task.corrupt_fraction * t)
    if num_corrupt:
        for s in range(num_sequences):
            positions = s * t + np.asarray(rng.permutation(t)[:num_corrupt])
            tokens[positions, 1:] = rng.normal((num_corrupt, d - 1), std=task.corrupt_std)
            targets[positions] = 0.0
            ids[positions] = -1
    return TaskBatch(tokens=tokens, targets=targets, cluster_ids=ids, num_sequences=num_sequences)


def oracle_routing_plan(task: SyntheticTask, cluster_ids: np.ndarray) -> RoutingPlan:
    """Unit-gate plan sending every clean token to its cluster's primitive pair.

    Corrupted tokens (id -1) are dropped.  Pairs a realizable task with a
    perfectly informed router, pinning the attainable optimum: experts
    initialized to the primitives under this plan reproduce the targets.
    """
    t = cluster_ids.shape[0]
    mask = np.zeros((t, task.num_primitives), dtype=np.int64)
    clean = np.arange(t)[cluster_ids >= 0]
    for col in range(task.cluster_primitives.shape[1]):
        mask[clean, task.cluster_primitives[cluster_ids[clean], col]] = 1
    return RoutingPlan(
        mask=mask,
        gates=mask.astype(np.float64),
        mode="usmoe",
        scope="sequence",
        budget_used=int(mask.sum()),
        gate_basis="raw_logits",
        seq_len=t,
    )


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "usmoe"
    budget: RoutingBudget = field(default_factory=lambda: RoutingBudget.per_token(2))
    alpha: float = 0.5
    learning_rate: float = 0.05
    steps: int = 2000
    train_sequences: int = 8
    eval_sequences: int = 32
    d_ff: int = 4
    num_experts: int = 4
    activation: str = "tanh"
    router_init_std: float | None = None
    scope: str = "sequence"
    seed: int = 0
    model_seed: int = 0

    def shared_key(self) -> tuple:
        """Everything that must match for a fair cross-mode comparison."""
        return (
            self.alpha,
            self.learning_rate,
            self.steps,
            self.train_sequences,
            self.eval_sequences,
            self.d_ff,
            self.num_experts,
            self.activation,
            self.router_init_std,
            self.scope,
            self.seed,
            self.model_seed,
        )


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; carries the partial report."""

    def __init__(self, report: "RunReport"):
        super().__init__(
            f"loss became non-finite at step {len(report.train_losses) - 1}"
        )
        self.report = report


@dataclass(frozen=True)
class RunReport:
    mode: str
    seed: int
    config: dict
    train_losses: list[float]
    final_eval_loss: float
    diagnostics: dict[str, list[float]]
    version: str = __version__

    def to_json(self) -> str:
        doc = dataclasses.asdict(self)
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        doc = json.loads(text)
        return cls(**doc)


def _route(h: Matrix, params: MoeLayerParams, cfg: TrainConfig, seq_len: int) -> RoutingPlan:
    raw = logits(h, params.router_weights)
    scope_len = h.shape[0] if cfg.scope == "batch" else seq_len
    if cfg.mode == "token_choice":
        k = cfg.budget.resolve_pairs(scope_len, cfg.num_experts) // scope_len
        return route_token_choice(token_choice_scores(raw), max(k, 1))
    if cfg.mode == "expert_choice":
        cap = cfg.budget.resolve_pairs(scope_len, cfg.num_experts) // cfg.num_experts
        return route_expert_choice(
            expert_choice_scores(raw), max(cap, 1), scope=cfg.scope, seq_len=seq_len
        )
    if cfg.mode == "usmoe":
        scores = unified_scores(raw, UnifiedScoreConfig(cfg.alpha))
        return route_unified(scores, cfg.budget, scope=cfg.scope, seq_len=seq_len, alpha=cfg.alpha)
    raise ValueError(f"unknown mode {cfg.mode!r}")


def _mse(a: Matrix, b: Matrix) -> float:
    return float(((a - b) ** 2).mean())


def batch_loss(task: SyntheticTask, params: MoeLayerParams, cfg: TrainConfig, batch: TaskBatch) -> float:
    plan = _route(batch.tokens, params, cfg, task.seq_len)
    return _mse(forward(batch.tokens, params, plan).output, batch.targets)


def _sgd(params: MoeLayerParams, grads, lr: float) -> MoeLayerParams:
    experts = tuple(
        dataclasses.replace(e, w1=e.w1 - lr * g1, w2=e.w2 - lr * g2)
        for e, g1, g2 in zip(params.experts, grads.d_expert_w1, grads.d_expert_w2)
    )
    return dataclasses.replace(
        params,
        router_weights=params.router_weights - lr * grads.d_router,
        experts=experts,
    )


def train(
    task: SyntheticTask, model: MoeLayerParams, cfg: TrainConfig
) -> tuple[RunReport, MoeLayerParams]:
    """Full-batch gradient descent; returns the report and final weights."""
    if model.dims != (task.dim, cfg.d_ff, cfg.num_experts):
        raise ValueError(
            f"model dims {model.dims} do not match task/config "
            f"{(task.dim, cfg.d_ff, cfg.num_experts)}"
        )
    base = Rng(cfg.seed)
    train_batch = sample_batch(task, base.split(0), cfg.train_sequences)
    eval_batch = sample_batch(task, base.split(1), cfg.eval_sequences)

    params = model
    losses: list[float] = []
    diag_series: dict[str, list[float]] = {
        "drop_ratio": [],
        "experts_per_sequence": [],
        "load_cv": [],
        "budget_used": [],
    }
    for _ in range(cfg.steps):
        plan = _route(train_batch.tokens, params, cfg, task.seq_len)
        out = forward(train_batch.tokens, params, plan).output
        losses.append(_mse(out, train_batch.targets))
        if not np.isfinite(losses[-1]):
            raise DivergenceError(
                RunReport(
                    mode=cfg.mode,
                    seed=cfg.seed,
                    config=_config_echo(task, cfg),
                    train_losses=losses,
                    final_eval_loss=float("nan"),
                    diagnostics=diag_series,
                )
            )
        diag = diagnostics(plan, task.seq_len, cfg.num_experts, cfg.train_sequences)
        diag_series["drop_ratio"].append(diag.drop_ratio)
        diag_series["experts_per_sequence"].append(diag.experts_per_sequence)
        diag_series["load_cv"].append(diag.load_cv)
        diag_series["budget_used"].append(float(diag.budget_used))
        if cfg.learning_rate != 0.0:
            upstream = 2.0 * (out - train_batch.targets) / out.size
            grads = backward(train_batch.tokens, params, plan, upstream)
            params = _sgd(params, grads, cfg.learning_rate)

    report = RunReport(
        mode=cfg.mode,
        seed=cfg.seed,
        config=_config_echo(task, cfg),
        train_losses=losses,
        final_eval_loss=batch_loss(task, params, cfg, eval_batch),
        diagnostics=diag_series,
    )
    return report, params


def _config_echo(task: SyntheticTask, cfg: TrainConfig) -> dict:
    return {
        "task": {
            "num_clusters": task.num_clusters,
            "d": task.dim,
            "seq_len": task.seq_len,
            "num_primitives": task.num_primitives,
            "map_rank": task.map_rank,
            "primitives_per_cluster": int(task.cluster_primitives.shape[1]),
            "marker": task.marker,
            "jitter_std": task.jitter_std,
            "noise_std": task.noise_std,
            "corrupt_fraction": task.corrupt_fraction,
            "corrupt_std": task.corrupt_std,
            "seed": task.seed,
        },
        "mode": cfg.mode,
        "budget": {"kind": cfg.budget.kind, "value": cfg.budget.value},
        "alpha": cfg.alpha,
        "learning_rate": cfg.learning_rate,
        "steps": cfg.steps,
        "train_sequences": cfg.train_sequences,
        "eval_sequences": cfg.eval_sequences,
        "d_ff": cfg.d_ff,
        "num_experts": cfg.num_experts,
        "activation": cfg.activation,
        "router_init_std": cfg.router_init_std,
        "scope": cfg.scope,
        "seed": cfg.seed,
        "model_seed": cfg.model_seed,
    }


def benchmark_task(corrupt_fraction: float = 0.0, seed: int = 0) -> SyntheticTask:
    """The tuned comparison task: 4 clusters in R^8, sequences of 16 tokens.

    Structural defaults come from :func:`make_task`: four rank-2
    primitives, three per cluster (so per-token demand exceeds a
    2-expert budget), marker scale 3, and corruption noise of scale 0.5
    that cannot be absorbed by zeroing any single weight row.
    """
    return make_task(corrupt_fraction=corrupt_fraction, seed=seed)


def benchmark_config(seed: int = 0) -> TrainConfig:
    """The tuned shared setting for cross-mechanism training comparisons.

    Differences from the plain :class:`TrainConfig` defaults, and why:

    - ``alpha=0.9``: score competition rides mostly on the absolute
      (sigmoid) branch, which can learn to decline content-free tokens
      outright; a softmax-heavy mix renormalizes every row to the same
      stake and subsidizes junk.
    - ``activation="identity"``: the task is a sum of linear maps, so
      linear experts keep the capacity ladder clean — every extra
      well-routed expert has real marginal value within the step budget.
    - ``learning_rate=0.1``: identity experts tolerate a faster rate;
      2000 steps then reach the structured regime on every seed.
    - ``router_init_std=0.01``: a near-flat initial score field lets
      usefulness, not the initial draw, decide which token-expert pairs
      win budget, preventing seed-dependent starvation.
    """
    return TrainConfig(
        alpha=0.9,
        learning_rate=0.1,
        activation="identity",
        router_init_std=0.01,
        seed=seed,
        model_seed=seed,
    )


def matched_budget_configs(base: TrainConfig, experts_per_token: int) -> dict[str, TrainConfig]:
    """One config per mechanism at the same total pairs per sequence.

    All three carry the identical per-token budget; each mechanism derives
    its own parameterization from it when routing (k for token choice,
    total/N as the per-expert cap, the total as one global pool).
    """
    budget = RoutingBudget.per_token(int(experts_per_token))
    return {
        mode: dataclasses.replace(base, mode=mode, budget=budget)
        for mode in ("token_choice", "expert_choice", "usmoe")
    }


def compare_modes(
    task: SyntheticTask, cfgs: dict[str, TrainConfig]
) -> dict[str, RunReport]:
    """Train one fresh model per config from a shared initialization.

    All configs must agree on every non-routing hyperparameter, otherwise
    the comparison confounds mechanism with setup.
    """
    keys = {label: cfg.shared_key() for label, cfg in cfgs.items()}
    baseline = next(iter(keys.values()))
    for label, key in keys.items():
        if key != baseline:
            raise ValueError(
                f"config {label!r} differs in shared hyperparameters; "
                "only mode and budget may vary across a comparison"
            )
    reports: dict[str, RunReport] = {}
    for label, cfg in cfgs.items():
        model = init_params(
            task.dim,
            cfg.d_ff,
            cfg.num_experts,
            Rng(cfg.model_seed),
            cfg.activation,
            cfg.router_init_std,
        )
        reports[label], _ = train(task, model, cfg)
    return reports
