import numpy as np
import pytest

from mugcp.backbone import KVCache, SyntheticInstance, encode_instance_offline, instance_tokens
from mugcp.errors import ConfigurationError
from mugcp.scp import generate_pd, project_scp, text_bottlenecks
from mugcp.state import PromptConfig, init_state
from mugcp.tensor import Tensor

import oracles


def random_instance(bb, rng, iid):
    c = bb.config
    caption = tuple(int(t) for t in rng.integers(0, c.caption_vocab, size=c.caption_len))
    return SyntheticInstance(iid, rng.normal(size=c.d_feature), 0, caption, "train")


def frozen_decoder(bb):
    return {f"L_{n}.{p}": bb.array(f"dec.{n}.{p}") for n in "qkvo" for p in ("weight", "bias")}


def cache_equivalence_errors(bb, n_instances, seed=0):
    """Max relative error of generate_pd vs the joint-sequence oracle per instance."""
    rng = np.random.default_rng(seed)
    w = frozen_decoder(bb)
    errs = []
    for i in range(n_instances):
        inst = random_instance(bb, rng, f"r{i}")
        p_q = rng.normal(0.0, 0.5, size=(16, bb.config.d_mllms))
        got = generate_pd(bb, Tensor(p_q), encode_instance_offline(bb, inst)).data
        want = oracles.joint_sequence_pd(w, instance_tokens(bb, inst), p_q, bb.config.heads)
        errs.append(np.abs(got - want).max() / max(1.0, np.abs(want).max()))
    return errs


def test_cache_equivalence_small_sample(default_backbone):
    assert max(cache_equivalence_errors(default_backbone, 10, seed=7)) < 1e-10


def test_output_shape(default_backbone, rng):
    inst = random_instance(default_backbone, rng, "a")
    out = generate_pd(default_backbone, Tensor(rng.normal(size=(16, 64))),
                      encode_instance_offline(default_backbone, inst))
    assert out.shape == (16, 64)


def test_empty_cache_is_pure_self_attention(toy_backbone, rng):
    bb = toy_backbone
    c = bb.config
    dh = c.d_mllms // c.heads
    empty = KVCache("empty", np.zeros((0, c.d_mllms)), np.zeros((c.heads, 0, dh)),
                    np.zeros((c.heads, 0, dh)))
    p_q = rng.normal(size=(4, c.d_mllms))
    got = generate_pd(bb, Tensor(p_q), empty).data
    want = oracles.attention(_dec_as_attn(bb), "a", p_q, p_q, c.heads)
    assert np.allclose(got, want, atol=1e-12)


def _dec_as_attn(bb):
    return {f"a.{n}.{p}": bb.array(f"dec.{n}.{p}") for n in "qkvo" for p in ("weight", "bias")}


def test_width_mismatch_is_configuration_error(toy_backbone, rng):
    inst = random_instance(toy_backbone, rng, "a")
    cache = encode_instance_offline(toy_backbone, inst)
    with pytest.raises(ConfigurationError):
        generate_pd(toy_backbone, Tensor(np.ones((4, 7))), cache)
    bad = KVCache("b", cache.z, np.zeros((3, 3, 5)), np.zeros((3, 3, 5)))
    with pytest.raises(ConfigurationError):
        generate_pd(toy_backbone, Tensor(np.ones((4, 16))), bad)


def test_distinct_instances_give_distinct_pd(toy_backbone, rng):
    p_q = Tensor(rng.normal(size=(4, 16)))
    outs = [generate_pd(toy_backbone, p_q,
                        encode_instance_offline(toy_backbone, random_instance(toy_backbone, rng, i))
                        ).data.tobytes() for i in range(20)]
    assert len(set(outs)) == 20


def test_bottlenecks(toy_backbone, rng):
    state = init_state(toy_backbone, PromptConfig(n_cond=4, n_ctx=2), seed=1)
    bottles = text_bottlenecks(state, 2)
    zero = project_scp(Tensor(np.zeros((4, 16))), 0, bottles).data
    assert np.array_equal(zero, np.tile(state["scp.text_bottleneck.0.bias"].data, (4, 1)))
    p_d = Tensor(rng.normal(size=(4, 16)))
    a, b = project_scp(p_d, 0, bottles), project_scp(p_d, 1, bottles)
    assert a.shape == (4, 8) and not np.array_equal(a.data, b.data)
    with pytest.raises(ConfigurationError):
        project_scp(p_d, 2, bottles)


def test_default_bottleneck_shape(default_backbone, rng):
    state = init_state(default_backbone, PromptConfig(), seed=1)
    out = project_scp(Tensor(rng.normal(size=(16, 64))), 3, text_bottlenecks(state, 4))
    assert out.shape == (16, 32)


def test_query_prompt_init_statistics(default_backbone):
    q = init_state(default_backbone, PromptConfig(), seed=3)["scp.query"].data
    assert q.shape == (16, 64)
    assert abs(q.std() - 0.02) < 0.002 and abs(q.mean()) < 0.002
