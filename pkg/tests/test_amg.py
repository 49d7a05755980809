import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mugcp.amg import AMGWeights, amg_forward, amg_variant, project_vcp, visual_bottlenecks
from mugcp.errors import ConfigurationError, ContractError
from mugcp.gradcheck import finite_diff_check
from mugcp.state import PromptConfig, _init_amg, amg_prefix, as_tensors, init_state
from mugcp.tensor import Tensor

import oracles

D_TEXT, D_IMG, HEADS = 8, 12, 2


def amg_params(seed, mode="full", randomize_ln=True):
    rng = np.random.default_rng(seed)
    raw = _init_amg(rng, "amg", mode, D_TEXT, D_IMG)
    for k in raw:
        if randomize_ln and (k.endswith(".gamma") or k.endswith(".beta")) or k.endswith(".bias"):
            raw[k] = raw[k] + rng.normal(0.0, 0.1, size=raw[k].shape)
    return raw


def weights(raw, requires_grad=False):
    return AMGWeights.from_mapping(as_tensors(raw, requires_grad), "amg")


def oracle_full(raw, p_td, f_x):
    a = {k[len("amg."):]: v for k, v in raw.items()}
    q = oracles.layer_norm(p_td, a["ln_query.gamma"], a["ln_query.beta"])
    kv = oracles.layer_norm(f_x, a["ln_image.gamma"], a["ln_image.beta"])
    g = (p_td + oracles.attention(a, "cross_attn", q, kv, HEADS)) * \
        (p_td + oracles.attention(a, "self_attn", q, q, HEADS))
    h = oracles.layer_norm(g, a["ln_ffn.gamma"], a["ln_ffn.beta"])
    return g + oracles.linear(a, "ffn.fc2", oracles.gelu(oracles.linear(a, "ffn.fc1", h)))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(1, 7))
def test_full_mode_matches_oracle(seed, n, tokens):
    raw = amg_params(seed)
    rng = np.random.default_rng(seed ^ 0x5EED)
    p_td, f_x = rng.normal(size=(n, D_TEXT)), rng.normal(size=(tokens, D_IMG))
    got = amg_forward(Tensor(p_td), Tensor(f_x), weights(raw), HEADS).data
    assert got.shape == (n, D_TEXT)
    assert np.allclose(got, oracle_full(raw, p_td, f_x), atol=1e-11)


def test_zero_output_weights_reduce_to_square(rng):
    raw = amg_params(1)
    for k in list(raw):
        if k.startswith(("amg.self_attn.o.", "amg.cross_attn.o.", "amg.ffn.fc2.")):
            raw[k] = np.zeros_like(raw[k])
    p_td = rng.normal(size=(16, D_TEXT))
    out = amg_forward(Tensor(p_td), Tensor(rng.normal(size=(4, D_IMG))), weights(raw), HEADS).data
    assert out.tobytes() == (p_td * p_td).tobytes()


def test_shape_preserved_at_defaults(default_backbone, rng):
    state = init_state(default_backbone, PromptConfig(), seed=1)
    w = AMGWeights.from_mapping(state, "amg")
    out = amg_forward(Tensor(rng.normal(size=(16, 32))), Tensor(rng.normal(size=(9, 48))), w, 4)
    assert out.shape == (16, 32)
    vcp = project_vcp(out, 0, visual_bottlenecks(state, 4))
    assert vcp.shape == (16, 48)


def test_empty_image_tokens_rejected(rng):
    w = weights(amg_params(2))
    with pytest.raises(ContractError):
        amg_forward(Tensor(rng.normal(size=(3, D_TEXT))), Tensor(np.zeros((0, D_IMG))), w, HEADS)


def test_every_amg_weight_gradient(rng):
    raw = amg_params(3)
    p_td, f_x = Tensor(rng.normal(size=(3, D_TEXT))), Tensor(rng.normal(size=(4, D_IMG)))
    proj = rng.normal(size=(3, D_TEXT))
    rep = finite_diff_check(
        lambda p: (amg_forward(p_td, f_x, AMGWeights.from_mapping(p, "amg"), HEADS) * proj).sum(),
        as_tensors(raw))
    assert set(rep.errors) == set(raw)
    assert rep.max_error < 1e-4, rep.failures(1e-4)


def test_full_variant_is_amg_forward(rng):
    w = weights(amg_params(4))
    p_td, f_x = Tensor(rng.normal(size=(3, D_TEXT))), Tensor(rng.normal(size=(5, D_IMG)))
    assert amg_variant(w, "full", HEADS)(p_td, f_x).data.tobytes() == \
        amg_forward(p_td, f_x, w, HEADS).data.tobytes()


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-3, 3))
def test_linear_only_is_affine(seed, alpha):
    f = amg_variant(weights(amg_params(seed, "linear-only")), "linear-only", HEADS)
    x = np.random.default_rng(seed).normal(size=(4, D_TEXT))
    f0 = f(Tensor(np.zeros_like(x)), None).data
    lhs = f(Tensor(alpha * x), None).data - f0
    rhs = alpha * (f(Tensor(x), None).data - f0)
    assert np.allclose(lhs, rhs, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_self_only_ignores_image_tokens_full_does_not(seed):
    rng = np.random.default_rng(seed)
    p_td = Tensor(rng.normal(size=(3, D_TEXT)))
    f1, f2 = Tensor(rng.normal(size=(4, D_IMG))), Tensor(rng.normal(size=(4, D_IMG)))
    self_only = amg_variant(weights(amg_params(seed, "self-only")), "self-only", HEADS)
    assert self_only(p_td, f1).data.tobytes() == self_only(p_td, f2).data.tobytes()
    full = amg_variant(weights(amg_params(seed)), "full", HEADS)
    assert not np.array_equal(full(p_td, f1).data, full(p_td, f2).data)


def test_cross_only_depends_on_image_tokens(rng):
    g = amg_variant(weights(amg_params(5, "cross-only")), "cross-only", HEADS)
    p_td = Tensor(rng.normal(size=(3, D_TEXT)))
    a = g(p_td, Tensor(rng.normal(size=(4, D_IMG)))).data
    b = g(p_td, Tensor(rng.normal(size=(4, D_IMG)))).data
    assert not np.array_equal(a, b)


def test_unknown_mode_and_missing_branch():
    with pytest.raises(ConfigurationError):
        amg_variant(weights(amg_params(0)), "gated", HEADS)
    with pytest.raises(ConfigurationError):
        amg_variant(weights(amg_params(0, "self-only")), "full", HEADS)(
            Tensor(np.ones((2, D_TEXT))), Tensor(np.ones((2, D_IMG))))


def test_sharing_invariant(toy_backbone, rng):
    shared = init_state(toy_backbone, PromptConfig(n_cond=4, n_ctx=2, amg_shared=True), seed=1)
    assert not any(k.startswith("amg.0.") for k in shared)
    per_layer = init_state(toy_backbone, PromptConfig(n_cond=4, n_ctx=2, amg_shared=False), seed=1)
    assert any(k.startswith("amg.0.") for k in per_layer) and \
        any(k.startswith("amg.1.") for k in per_layer)
    p_td, f_x = Tensor(rng.normal(size=(4, 8))), Tensor(rng.normal(size=(4, 12)))
    cfg = PromptConfig(n_cond=4, n_ctx=2, amg_shared=True)
    outs = [amg_forward(p_td, f_x, AMGWeights.from_mapping(shared, amg_prefix(cfg, i)), 2).data
            for i in range(2)]
    assert outs[0].tobytes() == outs[1].tobytes()
    cfg = PromptConfig(n_cond=4, n_ctx=2, amg_shared=False)
    outs = [amg_forward(p_td, f_x, AMGWeights.from_mapping(per_layer, amg_prefix(cfg, i)), 2).data
            for i in range(2)]
    assert not np.array_equal(outs[0], outs[1])


def test_visual_bottlenecks_distinct_and_affine_at_zero(toy_backbone, rng):
    state = init_state(toy_backbone, PromptConfig(n_cond=4, n_ctx=2), seed=2)
    bottles = visual_bottlenecks(state, 2)
    zero = project_vcp(Tensor(np.zeros((4, 8))), 1, bottles).data
    assert np.array_equal(zero, np.tile(state["vcp.bottleneck.1.bias"].data, (4, 1)))
    x = Tensor(rng.normal(size=(4, 8)))
    assert not np.array_equal(project_vcp(x, 0, bottles).data, project_vcp(x, 1, bottles).data)
