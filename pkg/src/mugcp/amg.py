"""Attention mutual-guidance: gated self/cross attention over the semantic prompt.

Full mode computes::

    P_cross = P_TD + CrossAttn(LN(P_TD), LN(F_x))
    P_self  = P_TD + SelfAttn(LN(P_TD))
    G       = P_cross * P_self
    P_C     = G + FFN(LN(G))

and a per-layer affine map takes P_C to the image width (the visual prompt).
"""

from __future__ import annotations

from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass

from . import tensor as T
from .errors import ConfigurationError, ContractError, DimensionError
from .layers import AttentionWeights, FeedForward, LayerNorm, Linear, multi_head_attention
from .tensor import Tensor

MODES = ("full", "self-only", "cross-only", "linear-only")


@dataclass(frozen=True)
class AMGWeights:
    self_attn: AttentionWeights | None = None
    cross_attn: AttentionWeights | None = None
    ln_query: LayerNorm | None = None
    ln_image: LayerNorm | None = None
    ln_ffn: LayerNorm | None = None
    ffn: FeedForward | None = None
    linear: Linear | None = None

    @classmethod
    def from_mapping(cls, params: Mapping[str, Tensor], prefix: str) -> "AMGWeights":
        def has(name):
            return any(k.startswith(f"{prefix}.{name}.") for k in params)

        return cls(
            self_attn=AttentionWeights.from_mapping(params, f"{prefix}.self_attn")
            if has("self_attn") else None,
            cross_attn=AttentionWeights.from_mapping(params, f"{prefix}.cross_attn")
            if has("cross_attn") else None,
            ln_query=LayerNorm.from_mapping(params, f"{prefix}.ln_query") if has("ln_query") else None,
            ln_image=LayerNorm.from_mapping(params, f"{prefix}.ln_image") if has("ln_image") else None,
            ln_ffn=LayerNorm.from_mapping(params, f"{prefix}.ln_ffn") if has("ln_ffn") else None,
            ffn=FeedForward.from_mapping(params, f"{prefix}.ffn") if has("ffn") else None,
            linear=Linear.from_mapping(params, f"{prefix}.linear") if has("linear") else None,
        )


def _run(p_td: Tensor, f_x: Tensor | None, w: AMGWeights, heads: int, mode: str) -> Tensor:
    if mode == "linear-only":
        if w.linear is None:
            raise ConfigurationError("linear-only mode needs the 'linear' weights")
        return w.linear(p_td)

    use_self = mode in ("full", "self-only")
    use_cross = mode in ("full", "cross-only")
    if (use_self and w.self_attn is None) or (use_cross and w.cross_attn is None):
        raise ConfigurationError(f"AMG weights lack a branch required by mode {mode!r}")
    q = w.ln_query(p_td)
    gate = None
    if use_cross:
        f_x = T.as_tensor(f_x) if f_x is not None else None
        if f_x is None or f_x.ndim != 2 or f_x.shape[0] == 0:
            raise ContractError("cross-attention needs a non-empty image token sequence F_x")
        kv = w.ln_image(f_x)
        gate = p_td + multi_head_attention(q, kv, kv, w.cross_attn, heads)
    if use_self:
        p_self = p_td + multi_head_attention(q, q, q, w.self_attn, heads)
        gate = p_self if gate is None else gate * p_self
    return gate + w.ffn(w.ln_ffn(gate))


def amg_forward(p_td: Tensor, f_x, weights: AMGWeights, heads: int) -> Tensor:
    """Full mutual-guidance block, [n, d_text] -> [n, d_text]."""
    if weights.ln_image is not None and f_x is not None and \
            T.as_tensor(f_x).shape[-1] != weights.ln_image.gamma.shape[0]:
        raise DimensionError(f"F_x width {T.as_tensor(f_x).shape[-1]} != "
                             f"{weights.ln_image.gamma.shape[0]}")
    return _run(p_td, f_x, weights, heads, "full")


def amg_variant(weights: AMGWeights, mode: str, heads: int) -> Callable[[Tensor, Tensor], Tensor]:
    """Forward function for one of the ablation modes."""
    if mode not in MODES:
        raise ConfigurationError(f"unknown AMG mode {mode!r}")
    if mode == "full":
        return lambda p_td, f_x: amg_forward(p_td, f_x, weights, heads)
    return lambda p_td, f_x: _run(p_td, f_x, weights, heads, mode)


def visual_bottlenecks(state: Mapping[str, Tensor], n_layers: int) -> list[Linear]:
    return [Linear.from_mapping(state, f"vcp.bottleneck.{i}") for i in range(n_layers)]


def project_vcp(p_c: Tensor, layer: int, bottlenecks: Sequence[Linear]) -> Tensor:
    """P_VC^i = F_v[i](P_C^i), [n, d_img]."""
    if not 0 <= layer < len(bottlenecks):
        raise ConfigurationError(f"layer {layer} is not an insertion layer "
                                 f"(have {len(bottlenecks)})")
    return bottlenecks[layer](p_c)
