"""Parameter views and transformer building blocks over :mod:`mugcp.tensor`.

Parameters live in flat ``name -> Tensor`` mappings; the dataclasses here
are thin views that pick entries out by prefix. ``init_*`` helpers return
the raw arrays for a freshly initialized block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import ConfigurationError
from .tensor import Tensor


@dataclass(frozen=True)
class Linear:
    weight: Tensor
    bias: Tensor | None = None

    @classmethod
    def from_mapping(cls, params: Mapping[str, Tensor], prefix: str) -> "Linear":
        bias = params[f"{prefix}.bias"] if f"{prefix}.bias" in params else None
        return cls(params[f"{prefix}.weight"], bias)

    def __call__(self, x) -> Tensor:
        y = T.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


@dataclass(frozen=True)
class LayerNorm:
    gamma: Tensor
    beta: Tensor

    @classmethod
    def from_mapping(cls, params: Mapping[str, Tensor], prefix: str) -> "LayerNorm":
        return cls(params[f"{prefix}.gamma"], params[f"{prefix}.beta"])

    def __call__(self, x) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


@dataclass(frozen=True)
class FeedForward:
    fc1: Linear
    fc2: Linear

    @classmethod
    def from_mapping(cls, params, prefix: str) -> "FeedForward":
        return cls(Linear.from_mapping(params, f"{prefix}.fc1"),
                   Linear.from_mapping(params, f"{prefix}.fc2"))

    def __call__(self, x) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


@dataclass(frozen=True)
class AttentionWeights:
    q: Linear
    k: Linear
    v: Linear
    o: Linear

    @classmethod
    def from_mapping(cls, params, prefix: str) -> "AttentionWeights":
        return cls(*(Linear.from_mapping(params, f"{prefix}.{n}") for n in "qkvo"))


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[..., t, d] -> [..., heads, t, d // heads]"""
    *lead, t, d = x.shape
    if heads < 1 or d % heads:
        raise ConfigurationError(f"{heads} heads do not divide width {d}")
    return T.swapaxes(T.reshape(x, (*lead, t, heads, d // heads)), -3, -2)


def merge_heads(x: Tensor) -> Tensor:
    """[..., heads, t, dh] -> [..., t, heads * dh]"""
    *lead, h, t, dh = x.shape
    return T.reshape(T.swapaxes(x, -3, -2), (*lead, t, h * dh))


def scaled_dot_product(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    return T.matmul(T.softmax(scores, axis=-1), v)


def multi_head_attention(q_in, k_in, v_in, weights: AttentionWeights, heads: int) -> Tensor:
    """Project, split into heads, attend with softmax(QK^T/sqrt(d_h))V, merge, project out.

    Leading batch axes are carried through unchanged.
    """
    if k_in.shape[-2] < 1:
        raise ConfigurationError("attention needs at least one key")
    q = split_heads(weights.q(q_in), heads)
    k = split_heads(weights.k(k_in), heads)
    v = split_heads(weights.v(v_in), heads)
    return weights.o(merge_heads(scaled_dot_product(q, k, v)))


def encoder_block(x: Tensor, params, prefix: str, heads: int) -> Tensor:
    """Pre-LN transformer block: x + MHA(LN(x)), then + FFN(LN(.))."""
    attn = AttentionWeights.from_mapping(params, f"{prefix}.attn")
    h = LayerNorm.from_mapping(params, f"{prefix}.ln1")(x)
    x = x + multi_head_attention(h, h, h, attn, heads)
    ffn = FeedForward.from_mapping(params, f"{prefix}.mlp")
    return x + ffn(LayerNorm.from_mapping(params, f"{prefix}.ln2")(x))


# -- initializers -------------------------------------------------------------

def init_linear(rng: np.random.Generator, prefix: str, d_in: int, d_out: int,
                bias: bool = True, std: float | None = None,
                bias_std: float = 0.0) -> dict[str, np.ndarray]:
    """Weight ~ N(0, std^2) with std defaulting to 1/sqrt(d_in)."""
    std = 1.0 / math.sqrt(d_in) if std is None else std
    out = {f"{prefix}.weight": rng.normal(0.0, std, size=(d_in, d_out))}
    if bias:
        out[f"{prefix}.bias"] = rng.normal(0.0, bias_std, size=d_out) if bias_std else np.zeros(d_out)
    return out


def init_layer_norm(prefix: str, d: int) -> dict[str, np.ndarray]:
    return {f"{prefix}.gamma": np.ones(d), f"{prefix}.beta": np.zeros(d)}


def init_attention(rng, prefix: str, d_q: int, d_kv: int, d_attn: int, d_out: int,
                   bias_std: float = 0.0) -> dict:
    out = {}
    out.update(init_linear(rng, f"{prefix}.q", d_q, d_attn, bias_std=bias_std))
    out.update(init_linear(rng, f"{prefix}.k", d_kv, d_attn, bias_std=bias_std))
    out.update(init_linear(rng, f"{prefix}.v", d_kv, d_attn, bias_std=bias_std))
    out.update(init_linear(rng, f"{prefix}.o", d_attn, d_out, bias_std=bias_std))
    return out


def init_ffn(rng, prefix: str, d: int, expansion: int = 4, bias_std: float = 0.0) -> dict:
    out = init_linear(rng, f"{prefix}.fc1", d, expansion * d, bias_std=bias_std)
    out.update(init_linear(rng, f"{prefix}.fc2", expansion * d, d, bias_std=bias_std))
    return out


def init_encoder_block(rng, prefix: str, d: int, bias_std: float = 0.0) -> dict:
    out = init_layer_norm(f"{prefix}.ln1", d)
    out.update(init_attention(rng, f"{prefix}.attn", d, d, d, d, bias_std=bias_std))
    out.update(init_layer_norm(f"{prefix}.ln2", d))
    out.update(init_ffn(rng, f"{prefix}.mlp", d, bias_std=bias_std))
    return out
