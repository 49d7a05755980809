"""Synthetic few-shot task: Gaussian class clusters with disjoint base/new splits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import FrozenBackbone, SyntheticInstance
from .errors import ConfigurationError
from .rng import make_rng


@dataclass(frozen=True)
class DataSpec:
    """Cluster geometry and split sizes.

    Class centers, caption topics and the test splits depend only on the
    backbone seed; the few-shot training sample depends on the run seed.
    """

    n_base: int = 8
    n_new: int = 8
    cluster_std: float = 0.3
    n_test: int = 10
    topic_words: int = 4
    caption_fidelity: float = 0.7

    def __post_init__(self):
        if self.n_base < 1 or self.n_new < 0 or self.n_test < 1 or self.topic_words < 1:
            raise ConfigurationError("n_base, n_test, topic_words must be >= 1 and n_new >= 0")
        if self.cluster_std < 0 or not 0 <= self.caption_fidelity <= 1:
            raise ConfigurationError("cluster_std must be >= 0 and caption_fidelity in [0, 1]")


@dataclass(frozen=True)
class SyntheticData:
    base_classes: tuple[int, ...]
    new_classes: tuple[int, ...]
    train: tuple[SyntheticInstance, ...]
    test_base: tuple[SyntheticInstance, ...]
    test_new: tuple[SyntheticInstance, ...]
    topics: dict
    centers: np.ndarray


def _make_instance(rng, iid, k, split, centers, topics, spec, backbone) -> SyntheticInstance:
    c = backbone.config
    feats = centers[k] + rng.normal(0.0, spec.cluster_std, size=c.d_feature)
    feats.flags.writeable = False
    topic = topics[k]
    caption = []
    for _ in range(c.caption_len):
        if rng.random() < spec.caption_fidelity:
            caption.append(int(topic[rng.integers(0, len(topic))]))
        else:
            caption.append(int(rng.integers(0, c.caption_vocab)))
    return SyntheticInstance(iid, feats, k, tuple(caption), split)


def build_dataset(spec: DataSpec, backbone: FrozenBackbone, shots: int, seed: int) -> SyntheticData:
    c = backbone.config
    if spec.n_base + spec.n_new > c.n_classes:
        raise ConfigurationError(f"n_base + n_new = {spec.n_base + spec.n_new} exceeds the "
                                 f"backbone's {c.n_classes} class names")
    if shots < 1:
        raise ConfigurationError("shots must be >= 1")
    if spec.topic_words > c.caption_vocab:
        raise ConfigurationError("topic_words exceeds caption_vocab")
    world = make_rng(c.seed, "data", "world")
    n_total = spec.n_base + spec.n_new
    centers = world.normal(0.0, 1.0, size=(n_total, c.d_feature))
    centers.flags.writeable = False
    topics = {k: tuple(int(w) for w in world.choice(c.caption_vocab, size=spec.topic_words,
                                                    replace=False))
              for k in range(n_total)}
    base = tuple(range(spec.n_base))
    new = tuple(range(spec.n_base, n_total))

    test_rng = make_rng(c.seed, "data", "test")
    test_base = tuple(_make_instance(test_rng, f"test-c{k}-{j}", k, "base", centers, topics,
                                     spec, backbone)
                      for k in base for j in range(spec.n_test))
    test_new = tuple(_make_instance(test_rng, f"test-c{k}-{j}", k, "new", centers, topics,
                                    spec, backbone)
                     for k in new for j in range(spec.n_test))
    shot_rng = make_rng(seed, "data", "shots")
    train = tuple(_make_instance(shot_rng, f"train-s{seed}-c{k}-{j}", k, "train", centers, topics,
                                 spec, backbone)
                  for k in base for j in range(shots))
    return SyntheticData(base, new, train, test_base, test_new, topics, centers)
