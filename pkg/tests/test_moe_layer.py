"""Layer forward/backward checks against local finite-difference oracles.

The reference computations here deliberately avoid the library's own
helpers: score mappings are re-derived with plain numpy expressions and
derivatives are estimated by central differences, so agreement is
evidence rather than tautology.
"""

import dataclasses

import numpy as np
import numpy.testing as npt
import pytest

from moelab.moe_layer import (
    ExpertParams,
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
from moelab.numerics import Rng
from moelab.routing import RoutingBudget, route_expert_choice, route_token_choice, route_unified
from moelab.scoring import (
    CompatibilityMatrix,
    UnifiedScoreConfig,
    expert_choice_scores,
    logits,
    token_choice_scores,
    unified_scores,
)

FD_STEP = 1e-5


def reference_gates(h, params, mask, basis, alpha):
    """Score mapping written out longhand, independent of the library."""
    z = h @ params.router_weights
    if basis == "raw_logits":
        mapped = z
    elif basis == "softmax_rows":
        e = np.exp(z - z.max(axis=1, keepdims=True))
        mapped = e / e.sum(axis=1, keepdims=True)
    elif basis == "sigmoid":
        mapped = 1.0 / (1.0 + np.exp(-z))
    elif basis == "unified":
        e = np.exp(z - z.max(axis=1, keepdims=True))
        soft = e / e.sum(axis=1, keepdims=True)
        sig = 1.0 / (1.0 + np.exp(-z))
        mapped = (1.0 - alpha) * soft + alpha * sig
    else:
        raise AssertionError(basis)
    return mapped * mask


def reference_loss(h, params, mask, basis, alpha, probe):
    """sum(probe * layer_output) with the mask frozen and gates live."""
    gates = reference_gates(h, params, mask, basis, alpha)
    act = np.tanh if params.activation == "tanh" else (lambda a: a)
    out = np.zeros_like(h)
    for j, expert in enumerate(params.experts):
        out += gates[:, j, None] * (act(h @ expert.w1) @ expert.w2)
    return float((probe * out).sum())


def replace_entry(arr, idx, value):
    out = arr.copy()
    out[idx] = value
    return out


def with_expert(params, j, **kw):
    experts = list(params.experts)
    experts[j] = dataclasses.replace(experts[j], **kw)
    return dataclasses.replace(params, experts=tuple(experts))


def fd_gradient(f, arr):
    """Central differences of scalar f with respect to every entry of arr."""
    grad = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        up = f(replace_entry(arr, idx, arr[idx] + FD_STEP))
        down = f(replace_entry(arr, idx, arr[idx] - FD_STEP))
        grad[idx] = (up - down) / (2 * FD_STEP)
    return grad


def max_rel_error(a, b):
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1.0)
    return float((np.abs(a - b) / scale).max())


def small_layer(seed, d=5, d_ff=7, n=3, activation="tanh"):
    return init_params(d, d_ff, n, Rng(seed), activation)


def route_for(h, params, mode, alpha=0.5):
    raw = logits(h, params.router_weights)
    if mode == "token_choice":
        return route_token_choice(token_choice_scores(raw), k=2)
    if mode == "expert_choice":
        return route_expert_choice(expert_choice_scores(raw), cap=2)
    scores = unified_scores(raw, UnifiedScoreConfig(alpha))
    return route_unified(scores, RoutingBudget.global_pairs(6), alpha=alpha)


def test_single_pair_forward_is_gate_times_expert():
    params = small_layer(0)
    h = Rng(1).normal((1, 5))
    plan = route_token_choice(token_choice_scores(logits(h, params.router_weights)), k=1)
    j = int(np.argmax(plan.mask[0]))
    out = forward(h, params, plan).output
    expected = plan.gates[0, j] * expert_forward(h, params.experts[j], "tanh")
    npt.assert_allclose(out, expected, atol=1e-15)


def test_dispatch_matches_dense_reference():
    rng = Rng(2)
    for trial in range(15):
        t = 1 + trial % 6
        params = small_layer(100 + trial)
        h = rng.split(trial).normal((t, 5))
        mode = ("token_choice", "expert_choice", "usmoe")[trial % 3]
        plan = route_for(h, params, mode)
        sparse = forward(h, params, plan).output
        dense = forward_dense_reference(h, params, plan).output
        npt.assert_allclose(sparse, dense, atol=1e-12, rtol=0.0)


def test_dropped_tokens_emit_zero_rows():
    params = small_layer(3)
    h = Rng(4).normal((4, 5))
    scores = expert_choice_scores(logits(h, params.router_weights))
    plan = route_expert_choice(scores, cap=1)
    dropped = ~plan.mask.any(axis=1)
    assert dropped.any(), "instance should drop at least one token"
    out = forward(h, params, plan).output
    npt.assert_array_equal(out[dropped], 0.0)


def test_contributions_sum_to_the_output():
    params = small_layer(5)
    h = Rng(6).normal((4, 5))
    plan = route_for(h, params, "usmoe")
    res = forward(h, params, plan, keep_contributions=True)
    npt.assert_allclose(res.contributions.sum(axis=1), res.output, atol=1e-15)
    # contributions vanish off the mask
    assert (res.contributions[plan.mask == 0] == 0.0).all()


@pytest.mark.parametrize(
    "mode,basis",
    [
        ("token_choice", "softmax_rows"),
        ("expert_choice", "sigmoid"),
        ("usmoe", "unified"),
    ],
)
def test_backward_matches_finite_differences(mode, basis):
    alpha = 0.3
    params = small_layer(7, activation="tanh")
    h = Rng(8).normal((4, 5))
    probe = Rng(9).normal((4, 5))
    plan = route_for(h, params, mode, alpha=alpha)
    assert plan.gate_basis == basis

    grads = backward(h, params, plan, upstream_grad=probe)

    mask = plan.mask
    a = plan.alpha

    def loss_h(h2):
        return reference_loss(h2, params, mask, basis, a, probe)

    assert max_rel_error(grads.d_tokens, fd_gradient(loss_h, h)) < 1e-6

    def loss_w(w2):
        p = dataclasses.replace(params, router_weights=w2)
        return reference_loss(h, p, mask, basis, a, probe)

    assert max_rel_error(grads.d_router, fd_gradient(loss_w, params.router_weights)) < 1e-6

    for j in range(3):
        def loss_w1(w, j=j):
            return reference_loss(h, with_expert(params, j, w1=w), mask, basis, a, probe)

        def loss_w2(w, j=j):
            return reference_loss(h, with_expert(params, j, w2=w), mask, basis, a, probe)

        assert max_rel_error(grads.d_expert_w1[j], fd_gradient(loss_w1, params.experts[j].w1)) < 1e-6
        assert max_rel_error(grads.d_expert_w2[j], fd_gradient(loss_w2, params.experts[j].w2)) < 1e-6


def test_backward_with_raw_logit_gates():
    params = small_layer(10)
    h = Rng(11).normal((3, 5))
    probe = Rng(12).normal((3, 5))
    raw = logits(h, params.router_weights)
    plan = route_unified(raw, RoutingBudget.global_pairs(4))
    assert plan.gate_basis == "raw_logits"
    grads = backward(h, params, plan, probe)

    def loss_h(h2):
        return reference_loss(h2, params, plan.mask, "raw_logits", None, probe)

    assert max_rel_error(grads.d_tokens, fd_gradient(loss_h, h)) < 1e-6

    def loss_w(w2):
        p = dataclasses.replace(params, router_weights=w2)
        return reference_loss(h, p, plan.mask, "raw_logits", None, probe)

    assert max_rel_error(grads.d_router, fd_gradient(loss_w, params.router_weights)) < 1e-6


def test_frozen_gates_cut_the_router_path():
    params = small_layer(13)
    h = Rng(14).normal((4, 5))
    probe = Rng(15).normal((4, 5))
    plan = route_for(h, params, "usmoe")
    grads = backward(h, params, plan, probe, differentiate_gates=False)
    npt.assert_array_equal(grads.d_router, 0.0)

    # With gates constant, d_tokens is only the expert-path derivative.
    gates = plan.gates.copy()

    def loss_h(h2):
        act = np.tanh
        out = np.zeros_like(h2)
        for j, e in enumerate(params.experts):
            out += gates[:, j, None] * (act(h2 @ e.w1) @ e.w2)
        return float((probe * out).sum())

    assert max_rel_error(grads.d_tokens, fd_gradient(loss_h, h)) < 1e-6


def test_backward_rejects_stale_plans():
    params = small_layer(16)
    h = Rng(17).normal((3, 5))
    plan = route_for(h, params, "token_choice")
    with pytest.raises(ValueError, match="route again"):
        backward(h + 0.5, params, plan, np.ones_like(h))


def test_identity_activation_gives_linear_experts():
    params = small_layer(18, activation="identity")
    e = params.experts[0]
    x = Rng(19).normal((3, 5))
    npt.assert_allclose(expert_forward(x, e, "identity"), x @ (e.w1 @ e.w2), atol=1e-15)


def test_jacobian_report_token_choice_term_by_term():
    params = small_layer(20)
    x = Rng(21).normal((5,))
    rep = jacobian_report(x, params, "token_choice")
    d, _, n = params.dims
    w = params.router_weights
    assert len(rep.routing_terms) == n

    # Re-derive every piece from scratch.
    z = x @ w
    e = np.exp(z - z.max())
    s = e / e.sum()
    k = int(np.argmax(s))
    assert k == rep.selected_expert
    assert rep.gate == pytest.approx(s[k], abs=1e-15)

    expert = params.experts[k]
    e_out = np.tanh(x @ expert.w1) @ expert.w2
    post = np.tanh(x @ expert.w1)
    j_ffn = (expert.w2.T * (1 - post * post)) @ expert.w1.T
    npt.assert_allclose(rep.gate_frozen, s[k] * j_ffn, atol=1e-12)

    for l in range(n):
        coef = s[k] * ((1.0 if l == k else 0.0) - s[l])
        npt.assert_allclose(rep.routing_terms[l], coef * np.outer(e_out, w[:, l]), atol=1e-12)

    recomposed = rep.gate_frozen + sum(rep.routing_terms)
    npt.assert_allclose(rep.analytic, recomposed, atol=1e-10, rtol=0.0)
    assert rep.max_rel_error < 1e-4


def test_jacobian_report_unified_has_both_branches():
    alpha = 0.4
    params = small_layer(22)
    x = Rng(23).normal((5,))
    rep = jacobian_report(x, params, "usmoe", alpha=alpha)
    d, _, n = params.dims
    w = params.router_weights
    assert len(rep.routing_terms) == 2 * n

    z = x @ w
    e = np.exp(z - z.max())
    s = e / e.sum()
    q = 1.0 / (1.0 + np.exp(-z))
    u = (1 - alpha) * s + alpha * q
    k = int(np.argmax(u))
    assert k == rep.selected_expert
    expert = params.experts[k]
    e_out = np.tanh(x @ expert.w1) @ expert.w2

    # softmax branch first, then the sigmoid branch (diagonal: only l == k).
    for l in range(n):
        coef = (1 - alpha) * s[k] * ((1.0 if l == k else 0.0) - s[l])
        npt.assert_allclose(rep.routing_terms[l], coef * np.outer(e_out, w[:, l]), atol=1e-12)
    for l in range(n):
        coef = alpha * q[k] * (1 - q[k]) * (1.0 if l == k else 0.0)
        npt.assert_allclose(rep.routing_terms[n + l], coef * np.outer(e_out, w[:, l]), atol=1e-12)

    recomposed = rep.gate_frozen + sum(rep.routing_terms)
    npt.assert_allclose(rep.analytic, recomposed, atol=1e-10, rtol=0.0)
    assert rep.max_rel_error < 1e-4


def test_jacobian_with_linear_experts_reduces_to_closed_form():
    params = small_layer(24, activation="identity")
    x = Rng(25).normal((5,))
    rep = jacobian_report(x, params, "token_choice")
    expert = params.experts[rep.selected_expert]
    npt.assert_allclose(rep.gate_frozen, rep.gate * (expert.w1 @ expert.w2).T, atol=1e-13)
    assert rep.max_rel_error < 1e-4


def test_jacobian_report_rejects_other_modes():
    params = small_layer(26)
    with pytest.raises(ValueError, match="token_choice or usmoe"):
        jacobian_report(np.ones(5), params, "expert_choice")


def test_gate_values_bases():
    params = small_layer(27)
    h = Rng(28).normal((3, 5))
    mask = np.ones((3, 3), dtype=int)
    z = h @ params.router_weights
    npt.assert_allclose(gate_values(h, params, mask, "raw_logits"), z, atol=0)
    got = gate_values(h, params, mask, "unified", alpha=0.5)
    npt.assert_allclose(got, reference_gates(h, params, mask, "unified", 0.5), atol=1e-15)
    with pytest.raises(ValueError, match="alpha"):
        gate_values(h, params, mask, "unified")
    with pytest.raises(ValueError, match="not differentiable"):
        gate_values(h, params, mask, "softmax_cols")


def test_checkpoint_round_trip_is_exact(tmp_path):
    params = small_layer(29, d=4, d_ff=6, n=2, activation="identity")
    path = tmp_path / "params.json"
    save_params(params, path)
    loaded = load_params(path)
    npt.assert_array_equal(loaded.router_weights, params.router_weights)
    assert loaded.activation == "identity"
    for a, b in zip(loaded.experts, params.experts):
        npt.assert_array_equal(a.w1, b.w1)
        npt.assert_array_equal(a.w2, b.w2)


def test_init_params_shapes_and_validation():
    params = init_params(6, 12, 4, Rng(30))
    assert params.dims == (6, 12, 4)
    assert params.router_weights.shape == (6, 4)
    with pytest.raises(ValueError, match="activation"):
        init_params(4, 8, 2, Rng(0), activation="relu")
    with pytest.raises(ValueError, match="inconsistent"):
        ExpertParams(w1=np.ones((4, 8)), w2=np.ones((8, 5)))
    with pytest.raises(ValueError, match="experts"):
        MoeLayerParams(np.ones((4, 3)), params.experts[:2])


def test_forward_shape_validation():
    params = small_layer(31)
    h = Rng(32).normal((3, 5))
    plan = route_for(h, params, "token_choice")
    with pytest.raises(ValueError, match="tokens must be"):
        forward(np.ones((3, 4)), params, plan)
    with pytest.raises(ValueError, match="does not match"):
        forward(np.ones((2, 5)), params, plan)
