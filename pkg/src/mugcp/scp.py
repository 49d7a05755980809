"""Semantic conditional prompts: learnable queries attending into an instance KV-cache."""

from __future__ import annotations

from collections.abc import Mapping, Sequence

from . import tensor as T
from .backbone import FrozenBackbone, KVCache
from .errors import ConfigurationError
from .layers import AttentionWeights, Linear, merge_heads, scaled_dot_product, split_heads
from .tensor import Tensor


def decoder_weights(backbone: FrozenBackbone, state: Mapping[str, Tensor]) -> AttentionWeights:
    """Decoder projections with trainable L_q/L_o (and L_k/L_v if present) taken from ``state``."""

    def pick(n: str) -> Linear:
        if f"scp.L_{n}.weight" in state:
            return Linear.from_mapping(state, f"scp.L_{n}")
        return Linear.from_mapping(backbone, f"dec.{n}")

    return AttentionWeights(pick("q"), pick("k"), pick("v"), pick("o"))


def generate_pd(backbone: FrozenBackbone, query: Tensor, cache: KVCache,
                decoder: AttentionWeights | None = None, recompute_kv: bool = False) -> Tensor:
    """P_D = L_o(attn(L_q(P_Q), [K_x; L_k(P_Q)], [V_x; L_v(P_Q)])), shape [n, d_mllms].

    With ``recompute_kv`` the cached keys/values are rebuilt from the cached
    Z_x through ``decoder.k``/``decoder.v`` (only needed when those are trained).
    """
    c = backbone.config
    h = c.heads
    if query.ndim != 2 or query.shape[1] != c.d_mllms:
        raise ConfigurationError(f"query prompt shape {query.shape} incompatible with "
                                 f"d_mllms={c.d_mllms}")
    if cache.keys.ndim != 3 or cache.keys.shape[0] * cache.keys.shape[2] != c.d_mllms \
            or cache.keys.shape[0] != h or cache.keys.shape != cache.values.shape:
        raise ConfigurationError(f"cache of shape {cache.keys.shape} does not match backbone "
                                 f"(heads={h}, d_mllms={c.d_mllms})")
    dec = decoder or backbone.decoder_weights()
    if recompute_kv:
        z = T.as_tensor(cache.z)
        k_past, v_past = split_heads(dec.k(z), h), split_heads(dec.v(z), h)
    else:
        k_past, v_past = T.as_tensor(cache.keys), T.as_tensor(cache.values)
    q = split_heads(dec.q(query), h)
    k = T.concat([k_past, split_heads(dec.k(query), h)], axis=1)
    v = T.concat([v_past, split_heads(dec.v(query), h)], axis=1)
    return dec.o(merge_heads(scaled_dot_product(q, k, v)))


def text_bottlenecks(state: Mapping[str, Tensor], n_layers: int) -> list[Linear]:
    return [Linear.from_mapping(state, f"scp.text_bottleneck.{i}") for i in range(n_layers)]


def project_scp(p_d: Tensor, layer: int, bottlenecks: Sequence[Linear]) -> Tensor:
    """P_TD^i = F_t[i](P_D), [n, d_text]."""
    if not 0 <= layer < len(bottlenecks):
        raise ConfigurationError(f"layer {layer} is not an insertion layer "
                                 f"(have {len(bottlenecks)})")
    return bottlenecks[layer](p_d)
