"""Seeded, frozen stand-ins for the dual encoders and the MLLM decoder layer.

Everything here is generated from ``BackboneConfig.seed`` and never
mutated afterwards. Weight arrays are float64 and read-only; indexing the
backbone (``backbone["text.0.attn.q.weight"]``) returns a non-trainable
:class:`~mugcp.tensor.Tensor` in the working precision.

Layer indices are 0-based throughout: insertion layer ``i`` is encoder
block ``i``.
"""

from __future__ import annotations

import hashlib
import re
import threading
import zlib
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .layers import (AttentionWeights, LayerNorm, Linear, encoder_block, init_encoder_block,
                     init_layer_norm, init_linear)
from .rng import make_rng
from .tensor import Tensor, gelu_np

SOS, EOS, X_TOKEN = 0, 1, 2
EMBED_STD = 0.02
BIAS_STD = 0.02

_SYLLABLES = ("ka", "lo", "mi", "ren", "tu", "sa", "vor", "ne", "pi", "dal", "qu", "zo",
              "fe", "gri", "ba", "mun", "te", "ols", "ya", "wik", "cho", "ler", "ti", "ham")


@dataclass(frozen=True)
class BackboneConfig:
    """Widths and extents of the mock backbone.

    ``depth`` is the encoder depth (4 at desk scale, up to 12).
    ``n_classes`` sizes the class-name vocabulary shared by base and new splits.
    """

    d_text: int = 32
    d_img: int = 48
    d_mllms: int = 64
    d_embed: int = 32
    heads: int = 4
    depth: int = 4
    n_patches: int = 9
    name_len: int = 3
    caption_len: int = 7
    d_feature: int = 16
    n_classes: int = 16
    caption_vocab: int = 64
    hash_buckets: int = 128
    seed: int = 0

    def __post_init__(self):
        for name in ("d_text", "d_img", "d_mllms", "d_embed", "heads", "depth", "n_patches",
                     "name_len", "d_feature", "n_classes", "caption_vocab", "hash_buckets"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.caption_len < 0:
            raise ConfigurationError("caption_len must be >= 0")
        for name in ("d_text", "d_img", "d_mllms"):
            if getattr(self, name) % self.heads:
                raise ConfigurationError(
                    f"heads={self.heads} does not divide {name}={getattr(self, name)}")
        if self.depth > 12:
            raise ConfigurationError("depth is limited to 12")


@dataclass(frozen=True)
class SyntheticInstance:
    """A synthetic "image": a feature vector drawn from its class cluster."""

    instance_id: str
    features: np.ndarray
    class_id: int
    caption_ids: tuple[int, ...]
    split: str = "train"


@dataclass(frozen=True)
class KVCache:
    """Key/value states of the decoder layer for one instance, [heads, S, d_head]."""

    instance_id: str
    z: np.ndarray
    keys: np.ndarray
    values: np.ndarray

    @property
    def length(self) -> int:
        return self.keys.shape[1]


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


def _pseudo_words(rng: np.random.Generator, count: int, taken: set[str]) -> list[str]:
    words = []
    while len(words) < count:
        n = int(rng.integers(2, 4))
        w = "".join(_SYLLABLES[i] for i in rng.integers(0, len(_SYLLABLES), size=n))
        if w not in taken and w != "x":
            taken.add(w)
            words.append(w)
    return words


class FrozenBackbone(Mapping):
    """Immutable weights plus the vocabulary of the mock models."""

    def __init__(self, config: BackboneConfig, weights: dict[str, np.ndarray],
                 class_names: tuple[str, ...], caption_words: tuple[str, ...]):
        self.config = config
        self._weights = {k: _readonly(v) for k, v in weights.items()}
        self.class_names = class_names
        self.caption_words = caption_words
        self._class_word_ids = {}
        for k, name in enumerate(class_names):
            for j, w in enumerate(name.split()):
                self._class_word_ids[w] = self.class_token_offset + k * config.name_len + j
        self._tensors: dict[tuple[str, str], Tensor] = {}
        self._lock = threading.Lock()

    # Mapping protocol -> Tensor views in the working precision
    def __getitem__(self, name: str) -> Tensor:
        key = (name, np.dtype(T.get_dtype()).str)
        t = self._tensors.get(key)
        if t is None:
            arr = self._weights[name].astype(T.get_dtype())
            arr.flags.writeable = False
            t = Tensor._wrap(arr)
            with self._lock:
                t = self._tensors.setdefault(key, t)
        return t

    def __iter__(self):
        return iter(self._weights)

    def __len__(self) -> int:
        return len(self._weights)

    def array(self, name: str) -> np.ndarray:
        return self._weights[name]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self._weights):
            h.update(name.encode())
            h.update(self._weights[name].tobytes())
        return h.hexdigest()

    @property
    def class_token_offset(self) -> int:
        return 3

    @property
    def hash_offset(self) -> int:
        return 3 + self.config.n_classes * self.config.name_len

    @property
    def vocab_size(self) -> int:
        return self.hash_offset + self.config.hash_buckets

    def class_id(self, name: str) -> int:
        try:
            return self.class_names.index(name)
        except ValueError:
            raise LookupError(f"unknown class name {name!r}") from None

    def tokenize(self, text: str) -> list[int]:
        """Word ids for ``text``: class-name words and ``x`` are exact, the rest hash to buckets."""
        ids = []
        for w in re.findall(r"[a-z0-9']+", text.lower()):
            if w in self._class_word_ids:
                ids.append(self._class_word_ids[w])
            elif w == "x":
                ids.append(X_TOKEN)
            else:
                ids.append(self.hash_offset + zlib.crc32(w.encode()) % self.config.hash_buckets)
        return ids

    def decoder_weights(self) -> AttentionWeights:
        return AttentionWeights.from_mapping(self, "dec")


def build_backbone(config: BackboneConfig) -> FrozenBackbone:
    """Generate every frozen weight deterministically from ``config.seed``."""
    c = config
    rng = make_rng(c.seed, "backbone")
    w: dict[str, np.ndarray] = {}
    w["word_embed"] = rng.normal(0.0, EMBED_STD, size=(3 + c.n_classes * c.name_len + c.hash_buckets,
                                                       c.d_text))
    w.update(init_linear(rng, "patch", c.d_feature, c.n_patches * c.d_img, bias_std=BIAS_STD))
    hidden = 2 * c.d_mllms
    w.update(init_linear(rng, "inst.fc1", c.d_feature, hidden, bias_std=BIAS_STD))
    w.update(init_linear(rng, "inst.fc2", hidden, max(c.caption_len, 1) * c.d_mllms,
                         bias_std=BIAS_STD))
    w["caption_embed"] = rng.normal(0.0, 0.5, size=(c.caption_vocab, c.d_mllms))
    for n in ("q", "k", "v", "o"):
        w.update(init_linear(rng, f"dec.{n}", c.d_mllms, c.d_mllms, bias_std=BIAS_STD))
    for i in range(c.depth):
        w.update(init_encoder_block(rng, f"text.{i}", c.d_text, bias_std=BIAS_STD))
        w.update(init_encoder_block(rng, f"img.{i}", c.d_img, bias_std=BIAS_STD))
    w.update(init_layer_norm("text.ln_final", c.d_text))
    w.update(init_linear(rng, "text.proj", c.d_text, c.d_embed, bias=False))
    w.update(init_layer_norm("img.ln_final", c.d_img))
    w.update(init_linear(rng, "img.proj", c.d_img, c.d_embed, bias=False))

    lex_rng = make_rng(c.seed, "lexicon")
    taken: set[str] = set()
    words = _pseudo_words(lex_rng, c.n_classes * c.name_len, taken)
    class_names = tuple(" ".join(words[k * c.name_len:(k + 1) * c.name_len])
                        for k in range(c.n_classes))
    caption_words = tuple(_pseudo_words(lex_rng, c.caption_vocab, taken))
    return FrozenBackbone(c, w, class_names, caption_words)


# -- frozen computations on raw arrays ---------------------------------------------

def instance_tokens(backbone: FrozenBackbone, inst: SyntheticInstance) -> np.ndarray:
    """Z_x: the mock instance encoder output, [S, d_mllms]."""
    c = backbone.config
    f = np.asarray(inst.features, dtype=np.float64)
    if f.shape != (c.d_feature,):
        raise DimensionError(f"instance features {f.shape} != ({c.d_feature},)")
    if len(inst.caption_ids) != c.caption_len:
        raise DimensionError(f"caption length {len(inst.caption_ids)} != {c.caption_len}")
    h = gelu_np(f @ backbone.array("inst.fc1.weight") + backbone.array("inst.fc1.bias"))
    z = h @ backbone.array("inst.fc2.weight") + backbone.array("inst.fc2.bias")
    z = z.reshape(max(c.caption_len, 1), c.d_mllms)[:c.caption_len]
    return z + backbone.array("caption_embed")[list(inst.caption_ids)]


def _heads_split(x: np.ndarray, heads: int) -> np.ndarray:
    s, d = x.shape
    return x.reshape(s, heads, d // heads).transpose(1, 0, 2)


def encode_instance_offline(backbone: FrozenBackbone, inst: SyntheticInstance) -> KVCache:
    """Run the instance through the frozen decoder projections once; K_x, V_x are the cache."""
    z = instance_tokens(backbone, inst)
    h = backbone.config.heads
    k = z @ backbone.array("dec.k.weight") + backbone.array("dec.k.bias")
    v = z @ backbone.array("dec.v.weight") + backbone.array("dec.v.bias")
    return KVCache(inst.instance_id, _readonly(z), _readonly(_heads_split(k, h)),
                   _readonly(_heads_split(v, h)))


@dataclass
class CacheStore:
    """Insert-if-absent store of per-instance KV caches."""

    _items: dict = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock)
    builds: int = 0

    def get(self, backbone: FrozenBackbone, inst: SyntheticInstance) -> KVCache:
        cache = self._items.get(inst.instance_id)
        if cache is not None:
            return cache
        built = encode_instance_offline(backbone, inst)
        with self._lock:
            if inst.instance_id not in self._items:
                self._items[inst.instance_id] = built
                self.builds += 1
            return self._items[inst.instance_id]

    def __len__(self) -> int:
        return len(self._items)

    def __contains__(self, instance_id) -> bool:
        return instance_id in self._items


def embed_class_text(backbone: FrozenBackbone, class_id: int):
    """(w_SOS [d], words [L, d], w_EOS [d]) for one class name."""
    c = backbone.config
    if not 0 <= class_id < c.n_classes:
        raise LookupError(f"unknown class id {class_id}")
    table = backbone.array("word_embed")
    start = backbone.class_token_offset + class_id * c.name_len
    return table[SOS], table[start:start + c.name_len], table[EOS]


def patch_embed(backbone: FrozenBackbone, inst_or_features) -> np.ndarray:
    """E_0: affine map of the feature vector to M patch tokens, [M, d_img]."""
    c = backbone.config
    f = getattr(inst_or_features, "features", inst_or_features)
    f = np.asarray(f, dtype=np.float64)
    flat = f @ backbone.array("patch.weight") + backbone.array("patch.bias")
    return flat.reshape(c.n_patches, c.d_img)


# -- frozen encoder stages on tensors --------------------------------------------

def text_layer(backbone: FrozenBackbone, x: Tensor, i: int) -> Tensor:
    return encoder_block(x, backbone, f"text.{i}", backbone.config.heads)


def image_layer(backbone: FrozenBackbone, x: Tensor, i: int) -> Tensor:
    return encoder_block(x, backbone, f"img.{i}", backbone.config.heads)


def _project_normalize(h: Tensor, proj: Linear) -> Tensor:
    if h.ndim == 1:
        y = T.l2_normalize(proj(T.reshape(h, (1, h.shape[0]))))
        return T.reshape(y, (y.shape[-1],))
    return T.l2_normalize(proj(h))


def pool_text(backbone: FrozenBackbone, x: Tensor) -> Tensor:
    """EOS-position state (last token) -> final LN -> projection -> unit norm."""
    h = LayerNorm.from_mapping(backbone, "text.ln_final")(x[..., -1, :])
    return _project_normalize(h, Linear.from_mapping(backbone, "text.proj"))


def pool_image(backbone: FrozenBackbone, x: Tensor) -> Tensor:
    """First-patch state -> final LN -> projection -> unit norm."""
    h = LayerNorm.from_mapping(backbone, "img.ln_final")(x[..., 0, :])
    return _project_normalize(h, Linear.from_mapping(backbone, "img.proj"))


def encode_text_ids(backbone: FrozenBackbone, ids: list[int]) -> np.ndarray:
    """Promptless text path: {SOS, ids, EOS} through every frozen block, pooled."""
    table = backbone.array("word_embed")
    x = T.as_tensor(table[[SOS, *ids, EOS]])
    for i in range(backbone.config.depth):
        x = text_layer(backbone, x, i)
    return pool_text(backbone, x).data.astype(np.float64)


def encode_image_features(backbone: FrozenBackbone, features) -> np.ndarray:
    """Promptless image path: patches through every frozen block, pooled."""
    x = T.as_tensor(patch_embed(backbone, features))
    for i in range(backbone.config.depth):
        x = image_layer(backbone, x, i)
    return pool_image(backbone, x).data.astype(np.float64)
