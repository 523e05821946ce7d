"""A routed expert layer with hand-derived exact gradients.

The layer computes, for token row h_i,

    out_i = sum_j  gate_ij * FFN_j(h_i)   over the plan's selected pairs j,

where FFN_j(x) = act(x @ W1_j) @ W2_j and the gates are the selected score
values.  Differentiation follows the frozen-mask convention: the 0/1
selection is treated as a constant, while the gate values remain live
functions of the tokens and router weights through the score mapping that
produced them.  The loss therefore reaches the router only through the
gate values, never through the discrete selection.

Gate derivatives with respect to the logits z = h @ W:

    softmax rows   dg_ij/dz_il = s_ij (delta_jl - s_il)
    sigmoid        dg_ij/dz_il = delta_jl q_ij (1 - q_ij)
    unified        (1-alpha) * softmax branch + alpha * sigmoid branch

Jacobians are oriented J[a, b] = d out_a / d in_b.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np

from .numerics import Matrix, Rng, sigmoid, stable_softmax
from .routing import RoutingPlan

ACTIVATIONS = ("tanh", "identity")


def _act(a: Matrix, kind: str) -> Matrix:
    return np.tanh(a) if kind == "tanh" else a


def _act_grad(post: Matrix, kind: str) -> Matrix:
    # tanh'(a) expressed through the post-activation value.
    return 1.0 - post * post if kind == "tanh" else np.ones_like(post)


@dataclass(frozen=True)
class ExpertParams:
    """One two-layer feed-forward expert, d -> d_ff -> d, no biases."""

    w1: Matrix
    w2: Matrix

    def __post_init__(self) -> None:
        if self.w1.ndim != 2 or self.w2.ndim != 2:
            raise ValueError("expert weights must be 2-D")
        if self.w1.shape[1] != self.w2.shape[0] or self.w1.shape[0] != self.w2.shape[1]:
            raise ValueError(
                f"expert weight shapes are inconsistent: {self.w1.shape} vs {self.w2.shape}"
            )


@dataclass(frozen=True)
class MoeLayerParams:
    """Router weights plus the expert bank; all experts share one shape."""

    router_weights: Matrix
    experts: tuple[ExpertParams, ...]
    activation: str = "tanh"

    def __post_init__(self) -> None:
        object.__setattr__(self, "experts", tuple(self.experts))
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.router_weights.ndim != 2:
            raise ValueError("router weights must be 2-D (d x N)")
        d, n = self.router_weights.shape
        if n != len(self.experts):
            raise ValueError(
                f"router has {n} columns but {len(self.experts)} experts were given"
            )
        for j, e in enumerate(self.experts):
            if e.w1.shape[0] != d:
                raise ValueError(f"expert {j} expects d={e.w1.shape[0]}, router has d={d}")

    @property
    def dims(self) -> tuple[int, int, int]:
        """(d, d_ff, num_experts)"""
        d, n = self.router_weights.shape
        return d, self.experts[0].w1.shape[1] if self.experts else 0, n


@dataclass(frozen=True)
class LayerOutput:
    output: Matrix
    plan: RoutingPlan
    # gate_ij * FFN_j(h_i) per selected pair, (T, N, d); None unless requested
    contributions: np.ndarray | None = None


@dataclass(frozen=True)
class LayerGradients:
    """Exact gradients of a scalar loss for every parameter block."""

    d_tokens: Matrix
    d_router: Matrix
    d_expert_w1: tuple[Matrix, ...]
    d_expert_w2: tuple[Matrix, ...]


@dataclass(frozen=True)
class JacobianReport:
    """Top-1 single-token Jacobian, exact and decomposed.

    ``analytic`` is the direct chain-rule Jacobian; ``gate_frozen`` is the
    gate-times-expert-Jacobian part; ``routing_terms`` are the rank-one
    matrices contributed by the gate's dependence on the input, one per
    logit for softmax gates and two per logit (softmax branch then sigmoid
    branch) for unified gates.  Their sum must reproduce ``analytic``.
    ``numeric`` is a central-difference estimate of the same map.
    """

    analytic: Matrix
    numeric: Matrix
    gate_frozen: Matrix
    routing_terms: tuple[Matrix, ...]
    max_rel_error: float
    mode: str
    selected_expert: int
    gate: float


def init_params(
    d: int,
    d_ff: int,
    num_experts: int,
    rng: Rng,
    activation: str = "tanh",
    router_std: float | None = None,
) -> MoeLayerParams:
    """Gaussian init; router std 1/sqrt(d) by default so logits start order-one.

    Pass a smaller ``router_std`` to start all compatibility scores near
    the mapping's midpoint, letting selection pressure rather than the
    initial draw decide which token-expert pairs deserve budget.
    """
    if router_std is None:
        router_std = d ** -0.5
    router = rng.normal((d, num_experts), std=router_std)
    experts = tuple(
        ExpertParams(
            w1=rng.normal((d, d_ff), std=d ** -0.5),
            w2=rng.normal((d_ff, d), std=d_ff ** -0.5),
        )
        for _ in range(num_experts)
    )
    return MoeLayerParams(router, experts, activation)


def expert_forward(x: Matrix, expert: ExpertParams, activation: str) -> Matrix:
    return _act(x @ expert.w1, activation) @ expert.w2


def gate_values(
    h: Matrix,
    params: MoeLayerParams,
    mask: np.ndarray,
    gate_basis: str,
    alpha: float | None = None,
) -> Matrix:
    """Mapped scores at the masked pairs, as a dense (T, N) matrix.

    This is the differentiable path the layer sees: the mask is a frozen
    constant, the values flow from h and the router weights.
    """
    z = h @ params.router_weights
    if gate_basis == "raw_logits":
        mapped = z
    elif gate_basis == "softmax_rows":
        mapped = stable_softmax(z, axis=1)
    elif gate_basis == "sigmoid":
        mapped = sigmoid(z)
    elif gate_basis == "unified":
        if alpha is None:
            raise ValueError("unified gates need the blend weight alpha")
        mapped = (1.0 - alpha) * stable_softmax(z, axis=1) + alpha * sigmoid(z)
    else:
        raise ValueError(f"gates in basis {gate_basis!r} are not differentiable here")
    return mapped * mask


def _check_shapes(h: Matrix, params: MoeLayerParams, plan: RoutingPlan) -> None:
    d, _, n = params.dims
    if h.ndim != 2 or h.shape[1] != d:
        raise ValueError(f"tokens must be (T, {d}), got {h.shape}")
    if plan.mask.shape != (h.shape[0], n):
        raise ValueError(
            f"plan shape {plan.mask.shape} does not match tokens x experts {(h.shape[0], n)}"
        )


def forward(
    h: Matrix,
    params: MoeLayerParams,
    plan: RoutingPlan,
    keep_contributions: bool = False,
) -> LayerOutput:
    """Dispatch-combine evaluation: each expert sees only its selected rows."""
    _check_shapes(h, params, plan)
    t, n = plan.mask.shape
    out = np.zeros_like(h)
    contributions = np.zeros((t, n, h.shape[1])) if keep_contributions else None
    for j in range(n):
        rows = plan.mask[:, j].astype(bool)
        if not rows.any():
            continue
        y = expert_forward(h[rows], params.experts[j], params.activation)
        weighted = plan.gates[rows, j, None] * y
        out[rows] += weighted
        if contributions is not None:
            contributions[rows, j] = weighted
    return LayerOutput(output=out, plan=plan, contributions=contributions)


def forward_dense_reference(
    h: Matrix, params: MoeLayerParams, plan: RoutingPlan
) -> LayerOutput:
    """Every expert sees every row; unselected pairs are zeroed by the gates.

    Kept as an always-available cross-check for the dispatch path; the two
    must agree to float precision on every instance.
    """
    _check_shapes(h, params, plan)
    out = np.zeros_like(h)
    for j in range(plan.mask.shape[1]):
        y = expert_forward(h, params.experts[j], params.activation)
        out += plan.gates[:, j, None] * y
    return LayerOutput(output=out, plan=plan)


def backward(
    h: Matrix,
    params: MoeLayerParams,
    plan: RoutingPlan,
    upstream_grad: Matrix,
    differentiate_gates: bool = True,
) -> LayerGradients:
    """Exact gradients for loss L given dL/d(output).

    The plan must have been routed from these tokens and parameters; the
    gate values are recomputed here to build the differentiable chain and
    checked against the plan.  With ``differentiate_gates=False`` the
    gates are constants and the router receives no gradient (useful as a
    baseline: only the expert path remains).
    """
    _check_shapes(h, params, plan)
    if upstream_grad.shape != h.shape:
        raise ValueError("upstream gradient must match the output shape")
    t, n = plan.mask.shape
    d_tokens = np.zeros_like(h)
    d_w1, d_w2 = [], []
    # dL/d(gate_ij) for selected pairs; zero elsewhere
    gamma = np.zeros((t, n))

    for j in range(n):
        expert = params.experts[j]
        rows = plan.mask[:, j].astype(bool)
        if not rows.any():
            d_w1.append(np.zeros_like(expert.w1))
            d_w2.append(np.zeros_like(expert.w2))
            continue
        x = h[rows]
        a = x @ expert.w1
        post = _act(a, params.activation)
        y = post @ expert.w2
        g = plan.gates[rows, j]
        u = upstream_grad[rows]
        gamma[rows, j] = np.einsum("rd,rd->r", u, y)
        d_y = g[:, None] * u
        d_w2.append(post.T @ d_y)
        d_post = d_y @ expert.w2.T
        d_a = d_post * _act_grad(post, params.activation)
        d_w1.append(x.T @ d_a)
        d_tokens[rows] += d_a @ expert.w1.T

    if differentiate_gates:
        recomputed = gate_values(h, params, plan.mask, plan.gate_basis, plan.alpha)
        if not np.allclose(recomputed, plan.gates, atol=1e-10, rtol=0.0):
            raise ValueError(
                "plan gates do not match these tokens and parameters; "
                "route again before differentiating"
            )
        z = h @ params.router_weights
        if plan.gate_basis == "raw_logits":
            d_z = gamma
        elif plan.gate_basis == "softmax_rows":
            s = stable_softmax(z, axis=1)
            d_z = s * (gamma - (gamma * s).sum(axis=1, keepdims=True))
        elif plan.gate_basis == "sigmoid":
            q = sigmoid(z)
            d_z = gamma * q * (1.0 - q)
        else:  # unified; gate_values already rejected anything else
            s = stable_softmax(z, axis=1)
            q = sigmoid(z)
            alpha = plan.alpha
            d_z = (1.0 - alpha) * s * (
                gamma - (gamma * s).sum(axis=1, keepdims=True)
            ) + alpha * gamma * q * (1.0 - q)
        d_router = h.T @ d_z
        d_tokens += d_z @ params.router_weights.T
    else:
        d_router = np.zeros_like(params.router_weights)

    return LayerGradients(
        d_tokens=d_tokens,
        d_router=d_router,
        d_expert_w1=tuple(d_w1),
        d_expert_w2=tuple(d_w2),
    )


def _expert_jacobian(x: np.ndarray, expert: ExpertParams, activation: str) -> Matrix:
    """J[a, b] = d FFN(x)_a / d x_b for a single token."""
    a = x @ expert.w1
    post = _act(a, activation)
    return (expert.w2.T * _act_grad(post, activation)) @ expert.w1.T


def jacobian_report(
    x: np.ndarray,
    params: MoeLayerParams,
    mode: str,
    alpha: float = 0.5,
    fd_step: float = 1e-5,
) -> JacobianReport:
    """Top-1 Jacobian of one token's output with the selection frozen.

    The routed map is f(x) = gate(x) * FFN_k(x) with k the argmax expert
    of the mode's score row.  Both the direct chain-rule Jacobian and its
    decomposition into a gate-frozen part plus rank-one routing terms are
    returned; softmax gates contribute one rank-one term per expert, and
    unified gates contribute a second family from the sigmoid branch, so
    the routing sensitivity carries twice as many terms.
    """
    if mode not in ("token_choice", "usmoe"):
        raise ValueError(f"jacobian_report handles token_choice or usmoe, not {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("x must be a single token vector")
    w = params.router_weights
    d, _, n = params.dims

    def score_row(vec: np.ndarray) -> np.ndarray:
        z = vec @ w
        s = stable_softmax(z[None, :], axis=1)[0]
        if mode == "token_choice":
            return s
        q = sigmoid(z[None, :])[0]
        return (1.0 - alpha) * s + alpha * q

    row = score_row(x)
    k = int(np.argmax(row))  # ties go to the smaller index
    expert = params.experts[k]
    gate = float(row[k])
    e_out = expert_forward(x[None, :], expert, params.activation)[0]

    z = x @ w
    s = stable_softmax(z[None, :], axis=1)[0]
    q = sigmoid(z[None, :])[0]
    delta = np.eye(n)[k]
    if mode == "token_choice":
        dgate_dz = s[k] * (delta - s)
        branch_coefs = [s[k] * (delta - s)]
    else:
        soft = (1.0 - alpha) * s[k] * (delta - s)
        sig = alpha * q[k] * (1.0 - q[k]) * delta
        dgate_dz = soft + sig
        branch_coefs = [soft, sig]

    gate_frozen = gate * _expert_jacobian(x, expert, params.activation)
    # Direct form: routing sensitivity collapses to one outer product.
    analytic = gate_frozen + np.outer(e_out, w @ dgate_dz)
    routing_terms = tuple(
        np.outer(e_out, coefs[l] * w[:, l])
        for coefs in branch_coefs
        for l in range(n)
    )

    def frozen_map(vec: np.ndarray) -> np.ndarray:
        return score_row(vec)[k] * expert_forward(vec[None, :], expert, params.activation)[0]

    numeric = np.zeros((d, d))
    for b in range(d):
        bump = np.zeros(d)
        bump[b] = fd_step
        numeric[:, b] = (frozen_map(x + bump) - frozen_map(x - bump)) / (2 * fd_step)

    err = np.abs(analytic - numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return JacobianReport(
        analytic=analytic,
        numeric=numeric,
        gate_frozen=gate_frozen,
        routing_terms=routing_terms,
        max_rel_error=float((err / scale).max()),
        mode=mode,
        selected_expert=k,
        gate=gate,
    )


def _encode(arr: Matrix) -> dict:
    return {
        "shape": list(arr.shape),
        "data": base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode(
            "ascii"
        ),
    }


def _decode(obj: dict) -> Matrix:
    arr = np.frombuffer(base64.b64decode(obj["data"]), dtype="<f8")
    return arr.reshape(obj["shape"]).astype(np.float64)


def save_params(params: MoeLayerParams, path) -> None:
    """Single JSON document; arrays as base64 little-endian float64."""
    d, d_ff, n = params.dims
    doc = {
        "dims": {"d": d, "d_ff": d_ff, "num_experts": n},
        "activation": params.activation,
        "router_weights": _encode(params.router_weights),
        "experts": [
            {"w1": _encode(e.w1), "w2": _encode(e.w2)} for e in params.experts
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_params(path) -> MoeLayerParams:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return MoeLayerParams(
        router_weights=_decode(doc["router_weights"]),
        experts=tuple(
            ExpertParams(w1=_decode(e["w1"]), w2=_decode(e["w2"]))
            for e in doc["experts"]
        ),
        activation=doc["activation"],
    )
