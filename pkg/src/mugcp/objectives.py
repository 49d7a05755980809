"""Adapted cross-entropy, consistency loss, supervision text banks and templates."""

from __future__ import annotations

import json
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .backbone import FrozenBackbone, SyntheticInstance, encode_image_features, encode_text_ids
from .errors import ConfigurationError, ContractError
from .layers import FeedForward, Linear
from .tensor import Tensor

PROVENANCE = ("custom", "expansion", "external")
DEFAULT_LAMBDA = 8.0


@dataclass(frozen=True)
class LossConfig:
    lam: float = DEFAULT_LAMBDA
    aug_std: float = 0.05

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ConfigurationError(f"lam must be finite and >= 0, got {self.lam}")
        if self.aug_std < 0:
            raise ConfigurationError("aug_std must be >= 0")


# -- templates ----------------------------------------------------------------

def render_custom_template(class_name: str, t_mllms: str) -> str:
    if not class_name:
        raise ContractError("class name must be non-empty")
    if not t_mllms:
        return f"a photo of a {class_name}."
    return f"a photo of a {class_name}, with {t_mllms}."


def render_llm_prompt(class_name: str, domain_name: str, t_mllms: str) -> str:
    for label, value in (("class name", class_name), ("domain", domain_name),
                         ("description", t_mllms)):
        if not value:
            raise ContractError(f"{label} must be non-empty")
    return (f"What fine-grained characteristics can be used to differentiate the {class_name} "
            f"and {domain_name}? Combine the VQA-description: {t_mllms}. "
            f'Texts should be of the form: "<A/An/The> <category> is <VQA-description> '
            f'and <fine-grained characteristics>".')


# -- adapters -----------------------------------------------------------------

@dataclass(frozen=True)
class Adapter:
    """x + fc2(gelu(fc1(x)))"""

    mlp: FeedForward

    @classmethod
    def from_mapping(cls, params: Mapping[str, Tensor], prefix: str) -> "Adapter":
        return cls(FeedForward(Linear.from_mapping(params, f"{prefix}.fc1"),
                               Linear.from_mapping(params, f"{prefix}.fc2")))

    def __call__(self, x) -> Tensor:
        x = T.as_tensor(x)
        row = T.reshape(x, (1, x.shape[0])) if x.ndim == 1 else x
        out = row + self.mlp(row)
        return T.reshape(out, x.shape) if x.ndim == 1 else out


@dataclass(frozen=True)
class Adapters:
    image: Adapter
    text: Adapter

    @classmethod
    def from_mapping(cls, params: Mapping[str, Tensor]) -> "Adapters":
        return cls(Adapter.from_mapping(params, "adapter.image"),
                   Adapter.from_mapping(params, "adapter.text"))


# -- losses -------------------------------------------------------------------

def _nonzero(name: str, t: Tensor) -> None:
    if np.any(np.sum(t.data * t.data, axis=-1) == 0):
        raise ContractError(f"{name} has zero norm")


def ce_loss(f_star, t_star_all, target: int, adapters: Adapters | None, tau: float) -> Tensor:
    """-log softmax_k(cos(adapt(F*), adapt(T*_k)) / tau)[target]."""
    f_star, t_star_all = T.as_tensor(f_star), T.as_tensor(t_star_all)
    if not 0 <= target < t_star_all.shape[0]:
        raise ContractError(f"target {target} outside 0..{t_star_all.shape[0] - 1}")
    if not tau > 0:
        raise ContractError("temperature must be positive")
    f = adapters.image(f_star) if adapters else f_star
    t = adapters.text(t_star_all) if adapters else t_star_all
    _nonzero("adapted image feature", f)
    _nonzero("adapted text feature", t)
    cos = T.cosine_similarity(T.reshape(f, (1, f.shape[-1])), t, axis=-1)
    return -T.log_softmax(cos * (1.0 / tau), axis=-1)[target]


def cc_loss(t_prime, t_star_adapted, f_prime, f_star_adapted) -> Tensor:
    """2 - cos(T', adapt(T*)) - cos(F', adapt(F*)); lies in [0, 4]."""
    vecs = [T.as_tensor(v) for v in (t_prime, t_star_adapted, f_prime, f_star_adapted)]
    for name, v in zip(("T'", "adapted T*", "F'", "adapted F*"), vecs):
        _nonzero(name, v)
    t_p, t_a, f_p, f_a = vecs
    return 2.0 - T.cosine_similarity(t_p, t_a) - T.cosine_similarity(f_p, f_a)


def total_loss(ce, cc, lam: float) -> Tensor:
    if lam < 0:
        raise ContractError("lam must be >= 0")
    return T.as_tensor(ce) + T.as_tensor(cc) * lam


# -- supervision bank -----------------------------------------------------------

@dataclass
class AugmentedTextBank:
    """Per-class supervision sentence embeddings (unit rows, read-only)."""

    embeddings: dict[int, np.ndarray]
    sentences: dict[int, list[str]] = field(default_factory=dict)
    provenance: dict[int, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        for k, e in list(self.embeddings.items()):
            e = np.array(e, dtype=np.float64)
            if e.ndim != 2 or e.shape[0] == 0:
                raise ConfigurationError(f"class {k} has no supervision sentences")
            norms = np.linalg.norm(e, axis=1, keepdims=True)
            if np.any(norms == 0):
                raise ConfigurationError(f"class {k} has a zero-norm sentence embedding")
            e = e / norms
            e.flags.writeable = False
            self.embeddings[k] = e

    def classes(self) -> list[int]:
        return sorted(self.embeddings)

    def require(self, classes: Sequence[int]) -> None:
        missing = [k for k in classes if k not in self.embeddings]
        if missing:
            raise ConfigurationError(f"bank has no sentences for classes {missing}")


def sample_supervision(bank: AugmentedTextBank, k: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly pick one of class ``k``'s sentence embeddings."""
    e = bank.embeddings.get(k)
    if e is None or len(e) == 0:
        raise ConfigurationError(f"class {k} has no supervision sentences")
    return e[int(rng.integers(0, len(e)))]


def mock_encode_sentence(backbone: FrozenBackbone, sentence: str) -> np.ndarray:
    """Hashed word tokens through the frozen, promptless text encoder."""
    return encode_text_ids(backbone, backbone.tokenize(sentence))


def load_bank(path, backbone: FrozenBackbone) -> AugmentedTextBank:
    """Read a bank JSON: ``{class name: {sentences, embeddings?, provenance}}``."""
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: top level must be an object keyed by class name")
    emb, sent, prov = {}, {}, {}
    for name, entry in raw.items():
        k = backbone.class_id(name)
        if not isinstance(entry, dict) or not entry.get("sentences"):
            raise ConfigurationError(f"{path}: class {name!r} needs a non-empty 'sentences' list")
        unknown = set(entry) - {"sentences", "embeddings", "provenance"}
        if unknown:
            raise ConfigurationError(f"{path}: class {name!r} has unknown keys {sorted(unknown)}")
        sentences = [str(s) for s in entry["sentences"]]
        tags = entry.get("provenance", ["external"] * len(sentences))
        if len(tags) != len(sentences) or any(t not in PROVENANCE for t in tags):
            raise ConfigurationError(f"{path}: class {name!r} provenance must list one of "
                                     f"{PROVENANCE} per sentence")
        if "embeddings" in entry:
            e = np.asarray(entry["embeddings"], dtype=np.float64)
            if e.ndim != 2 or e.shape[0] != len(sentences):
                raise ConfigurationError(f"{path}: class {name!r} has {len(sentences)} sentences "
                                         f"but embeddings of shape {e.shape}")
            if e.shape[1] != backbone.config.d_embed:
                raise ConfigurationError(f"{path}: embedding width {e.shape[1]} != "
                                         f"{backbone.config.d_embed}")
        else:
            e = np.stack([mock_encode_sentence(backbone, s) for s in sentences])
        emb[k], sent[k], prov[k] = e, sentences, list(tags)
    return AugmentedTextBank(emb, sent, prov)


def class_description(backbone: FrozenBackbone, topic_words: Sequence[int]) -> str:
    """Render caption-topic word ids as the stand-in MLLM description of a class."""
    words = [backbone.caption_words[w] for w in topic_words]
    if len(words) <= 1:
        return "".join(words)
    return ", ".join(words[:-1]) + " and " + words[-1]


def build_default_bank(backbone: FrozenBackbone, topics: Mapping[int, Sequence[int]]) -> AugmentedTextBank:
    """Custom-template sentences for each class, mock-encoded.

    ``topics`` maps class id to its caption topic word ids; each class gets the
    full description plus one sentence per topic word.
    """
    emb, sent, prov = {}, {}, {}
    for k, topic in sorted(topics.items()):
        name = backbone.class_names[k]
        sentences = [render_custom_template(name, class_description(backbone, topic))]
        sentences += [render_custom_template(name, backbone.caption_words[w]) for w in topic]
        emb[k] = np.stack([mock_encode_sentence(backbone, s) for s in sentences])
        sent[k] = sentences
        prov[k] = ["custom"] * len(sentences)
    return AugmentedTextBank(emb, sent, prov)


def augment_image_features(inst: SyntheticInstance, backbone: FrozenBackbone,
                           rng: np.random.Generator, std: float = 0.05) -> np.ndarray:
    """F': the instance re-encoded through the promptless image path after Gaussian jitter.

    Jitter std is ``std`` times the RMS of the instance's feature vector.
    """
    f = np.asarray(inst.features, dtype=np.float64)
    scale = float(np.sqrt(np.mean(f * f)))
    noise = rng.normal(0.0, 1.0, size=f.shape) * (std * scale)
    return encode_image_features(backbone, f + noise)
