import threading

import numpy as np
import pytest

from mugcp.backbone import (BackboneConfig, CacheStore, SyntheticInstance, build_backbone,
                            embed_class_text, encode_instance_offline, instance_tokens, patch_embed)
from mugcp.data import DataSpec, build_dataset
from mugcp.errors import ConfigurationError

import oracles


def _instance(backbone, seed=0, iid="x"):
    c = backbone.config
    rng = np.random.default_rng(seed)
    caption = tuple(int(t) for t in rng.integers(0, c.caption_vocab, size=c.caption_len))
    return SyntheticInstance(iid, rng.normal(size=c.d_feature), 0, caption, "train")


def test_same_seed_is_bit_identical():
    a, b = build_backbone(BackboneConfig(seed=4)), build_backbone(BackboneConfig(seed=4))
    assert a.fingerprint() == b.fingerprint()
    assert all(a.array(k).tobytes() == b.array(k).tobytes() for k in a)
    assert a.class_names == b.class_names


def test_different_seeds_differ():
    a, b = build_backbone(BackboneConfig(seed=1)), build_backbone(BackboneConfig(seed=2))
    assert any(a.array(k).tobytes() != b.array(k).tobytes() for k in a)


def test_heads_must_divide_widths():
    with pytest.raises(ConfigurationError, match="heads=5"):
        BackboneConfig(heads=5, d_text=32)
    with pytest.raises(ConfigurationError):
        BackboneConfig(depth=13)


def test_weights_are_read_only(toy_backbone):
    with pytest.raises(ValueError):
        toy_backbone.array("dec.q.weight")[0, 0] = 1.0


def test_cache_shape_forced_by_config():
    bb = build_backbone(BackboneConfig(heads=2, d_mllms=64, caption_len=7))
    cache = encode_instance_offline(bb, _instance(bb))
    assert cache.keys.shape == (2, 7, 32)
    assert cache.values.shape == (2, 7, 32)
    assert cache.z.shape == (7, 64)


def test_cache_store_reuses_entries(toy_backbone):
    store = CacheStore()
    inst = _instance(toy_backbone)
    first = store.get(toy_backbone, inst)
    second = store.get(toy_backbone, inst)
    assert first is second and store.builds == 1
    again = encode_instance_offline(toy_backbone, inst)
    assert again.keys.tobytes() == first.keys.tobytes()


def test_cache_store_concurrent_insert_if_absent(toy_backbone):
    store = CacheStore()
    inst = _instance(toy_backbone)
    got = []
    threads = [threading.Thread(target=lambda: got.append(store.get(toy_backbone, inst)))
               for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert store.builds == 1 and all(g is got[0] for g in got)


def test_cache_matches_independent_recompute(toy_backbone):
    bb = toy_backbone
    c = bb.config
    inst = _instance(bb, seed=9)
    w = {k: bb.array(k) for k in bb}
    h = oracles.gelu(inst.features @ w["inst.fc1.weight"] + w["inst.fc1.bias"])
    z = (h @ w["inst.fc2.weight"] + w["inst.fc2.bias"]).reshape(c.caption_len, c.d_mllms)
    z = z + w["caption_embed"][list(inst.caption_ids)]
    assert np.allclose(instance_tokens(bb, inst), z, atol=1e-13)
    k = z @ w["dec.k.weight"] + w["dec.k.bias"]
    v = z @ w["dec.v.weight"] + w["dec.v.bias"]
    cache = encode_instance_offline(bb, inst)
    dh = c.d_mllms // c.heads
    for head in range(c.heads):
        cols = slice(head * dh, (head + 1) * dh)
        assert np.allclose(cache.keys[head], k[:, cols], atol=1e-13)
        assert np.allclose(cache.values[head], v[:, cols], atol=1e-13)


def test_class_text_embeddings(default_backbone):
    sos, words, eos = embed_class_text(default_backbone, 5)
    assert words.shape == (3, 32) and sos.shape == (32,) and eos.shape == (32,)
    again = embed_class_text(default_backbone, 5)
    assert np.array_equal(words, again[1])
    names = [embed_class_text(default_backbone, k)[1].tobytes()
             for k in range(default_backbone.config.n_classes)]
    assert len(set(names)) == len(names)
    with pytest.raises(LookupError):
        embed_class_text(default_backbone, 99)


def test_patch_embed_shape_bias_and_recompute(default_backbone):
    bb = default_backbone
    inst = _instance(bb)
    e0 = patch_embed(bb, inst)
    assert e0.shape == (9, 48)
    zero = patch_embed(bb, np.zeros(bb.config.d_feature))
    assert np.array_equal(zero, bb.array("patch.bias").reshape(9, 48))
    manual = (inst.features @ bb.array("patch.weight") + bb.array("patch.bias")).reshape(9, 48)
    assert np.allclose(e0, manual, atol=1e-14)


def test_lexicon_round_trip(default_backbone):
    for k, name in enumerate(default_backbone.class_names):
        assert default_backbone.class_id(name) == k
    with pytest.raises(LookupError):
        default_backbone.class_id("not a class")


def test_cache_bytes_stable_across_dataset_rebuilds(toy_backbone):
    spec = DataSpec(n_base=3, n_new=3, n_test=2, topic_words=2)
    d1 = build_dataset(spec, toy_backbone, 2, seed=1)
    d2 = build_dataset(spec, toy_backbone, 2, seed=1)
    for a, b in zip(d1.train, d2.train):
        assert encode_instance_offline(toy_backbone, a).keys.tobytes() == \
            encode_instance_offline(toy_backbone, b).keys.tobytes()
