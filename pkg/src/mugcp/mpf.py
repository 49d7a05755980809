"""Multi-prompt fusion, sequence assembly, deep prompting and cosine prediction."""

from __future__ import annotations

import csv
from collections.abc import Mapping, Sequence

import numpy as np

from . import tensor as T
from .amg import AMGWeights, amg_variant, project_vcp, visual_bottlenecks
from .backbone import (CacheStore, FrozenBackbone, SyntheticInstance, embed_class_text,
                       image_layer, patch_embed, pool_image, pool_text, text_layer)
from .errors import ContractError, DimensionError
from .scp import decoder_weights, generate_pd, project_scp, text_bottlenecks
from .state import PromptConfig, amg_prefix
from .tensor import Tensor


def fuse_prompts(p_ctx, p_cond) -> Tensor:
    """Broadcast-sum-average: row j of the result is p_ctx[j] + mean_k p_cond[k]."""
    p_ctx, p_cond = T.as_tensor(p_ctx), T.as_tensor(p_cond)
    if p_ctx.ndim != 2 or p_cond.ndim != 2 or p_ctx.shape[1] != p_cond.shape[1]:
        raise DimensionError(f"fuse_prompts: widths differ, {p_ctx.shape} vs {p_cond.shape}")
    if p_cond.shape[0] == 0:
        raise DimensionError("fuse_prompts: empty conditional prompt")
    return p_ctx + T.mean(p_cond, axis=0, keepdims=True)


def _blocks(parts, lead: tuple[int, ...], width: int) -> list[Tensor]:
    out = []
    for part in parts:
        if part is None:
            continue
        t = T.as_tensor(part)
        if t.shape[-1] != width:
            raise DimensionError(f"sequence block width {t.shape[-1]} != {width}")
        if t.ndim == 1:
            t = T.reshape(t, (1, width))
        if t.ndim - 2 < len(lead):
            t = T.broadcast_to(t, (*lead, *t.shape[-2:]))
        elif tuple(t.shape[:-2]) != lead:
            raise DimensionError(f"block batch dims {t.shape[:-2]} != {lead}")
        out.append(t)
    return out


def assemble_text_sequence(sos, p_ta, words, p_td, eos) -> Tensor:
    """{w_SOS, P_TA, w_1..w_L, P_TD, w_EOS} concatenated along the token axis.

    ``words`` of shape [K, L, d] makes a K-class batch: the other blocks are
    replicated across class rows. ``sos``/``eos`` may be [d] or [K, d];
    ``p_ta``/``p_td`` may be ``None`` to leave the block out.
    """
    words = T.as_tensor(words)
    width = words.shape[-1]
    lead = tuple(words.shape[:-2])
    if lead:
        sos, eos = (T.as_tensor(t) for t in (sos, eos))
        sos = T.reshape(sos, (*lead, 1, width)) if sos.ndim == len(lead) + 1 else sos
        eos = T.reshape(eos, (*lead, 1, width)) if eos.ndim == len(lead) + 1 else eos
    return T.concat(_blocks([sos, p_ta, words, p_td, eos], lead, width), axis=-2)


def assemble_visual_sequence(patches, p_vc, p_va) -> Tensor:
    """{v_1..v_M, P_VC, P_VA} concatenated along the token axis."""
    patches = T.as_tensor(patches)
    return T.concat(_blocks([patches, p_vc, p_va], (), patches.shape[-1]), axis=-2)


def text_layout(mode: str, n_ctx: int, name_len: int, n_cond: int) -> dict[str, slice]:
    """Token positions of each block of the text sequence under an MPF mode."""
    sizes = [("sos", 1), ("ctx", n_ctx), ("words", name_len)]
    if mode in ("concat", "both"):
        sizes.append(("cond", n_cond))
    sizes.append(("eos", 1))
    out, pos = {}, 0
    for name, size in sizes:
        out[name] = slice(pos, pos + size)
        pos += size
    return out


def visual_layout(mode: str, n_patches: int, n_cond: int, n_ctx: int) -> dict[str, slice]:
    sizes = [("patches", n_patches)]
    if mode in ("concat", "both"):
        sizes.append(("cond", n_cond))
    sizes.append(("ctx", n_ctx))
    out, pos = {}, 0
    for name, size in sizes:
        out[name] = slice(pos, pos + size)
        pos += size
    return out


def _mode_blocks(mode: str, p_ctx: Tensor, p_cond: Tensor):
    """(context block, conditional block) placed in the sequence under ``mode``."""
    if mode == "add":
        return fuse_prompts(p_ctx, p_cond), None
    if mode == "concat":
        return p_ctx, p_cond
    return fuse_prompts(p_ctx, p_cond), p_cond


def semantic_prompt_source(backbone: FrozenBackbone, state: Mapping[str, Tensor],
                           inst: SyntheticInstance, config: PromptConfig,
                           cache: CacheStore | None = None) -> Tensor:
    """P_D for one instance: decoder pass over the cache, or the learnable fixed P_D."""
    if config.mllm_cache == "random-init":
        return state["scp.random_pd"]
    kv = (cache or CacheStore()).get(backbone, inst)
    return generate_pd(backbone, state["scp.query"], kv, decoder_weights(backbone, state),
                       recompute_kv=config.train_kv)


def forward_dual_encoder(backbone: FrozenBackbone, state: Mapping[str, Tensor],
                         inst: SyntheticInstance, classes: Sequence[int], config: PromptConfig,
                         cache: CacheStore | None = None) -> tuple[Tensor, Tensor]:
    """Run both prompted encoders; returns (F* [d_embed], T* [K, d_embed]), unit-norm rows.

    At each insertion layer the prompt positions left by the previous layer
    are overwritten by freshly assembled blocks; non-prompt tokens carry over.
    """
    c = backbone.config
    n_layers = config.insertion_layers(c.depth)
    mode = config.mpf_mode
    if not classes:
        raise ContractError("need at least one class")

    p_d = semantic_prompt_source(backbone, state, inst, config, cache)
    f_bottle = text_bottlenecks(state, n_layers)
    v_bottle = visual_bottlenecks(state, n_layers)

    rows = [embed_class_text(backbone, k) for k in classes]
    sos, eos = rows[0][0], rows[0][2]
    words = np.stack([r[1] for r in rows])
    e0 = patch_embed(backbone, inst)
    tl = text_layout(mode, config.n_ctx, c.name_len, config.n_cond)

    x_text = x_img = None
    amg_fns = {}
    for i in range(c.depth):
        if i < n_layers:
            p_td = project_scp(p_d, i, f_bottle)
            f_x = T.as_tensor(e0) if i == 0 else x_img[:c.n_patches]
            prefix = amg_prefix(config, i)
            if prefix not in amg_fns:
                amg_fns[prefix] = amg_variant(AMGWeights.from_mapping(state, prefix),
                                              config.amg_mode, c.heads)
            p_vc = project_vcp(amg_fns[prefix](p_td, f_x), i, v_bottle)
            t_ctx, t_cond = _mode_blocks(mode, state[f"ctx.text.{i}"], p_td)
            v_ctx, v_cond = _mode_blocks(mode, state[f"ctx.image.{i}"], p_vc)
            if i == 0:
                x_text = assemble_text_sequence(sos, t_ctx, words, t_cond, eos)
                x_img = assemble_visual_sequence(e0, v_cond, v_ctx)
            else:
                x_text = assemble_text_sequence(x_text[:, tl["sos"]], t_ctx, x_text[:, tl["words"]],
                                                t_cond, x_text[:, tl["eos"]])
                x_img = assemble_visual_sequence(x_img[:c.n_patches], v_cond, v_ctx)
        x_text = text_layer(backbone, x_text, i)
        x_img = image_layer(backbone, x_img, i)
    return pool_image(backbone, x_img), pool_text(backbone, x_text)


def predict(f_star, t_star, tau: float) -> Tensor:
    """softmax_k(cos(F*, T*_k) / tau) over the K class rows."""
    if not tau > 0:
        raise ContractError("temperature must be positive")
    f_star, t_star = T.as_tensor(f_star), T.as_tensor(t_star)
    f_row = T.reshape(f_star, (1, f_star.shape[-1]))
    cos = T.cosine_similarity(f_row, t_star, axis=-1)
    return T.softmax(cos * (1.0 / tau), axis=-1)


def write_embeddings_csv(path, records) -> int:
    """Write (instance_id, class_id, split, kind, predicted, vector) records; returns row count.

    ``records`` yields dicts with keys instance_id, class_id, split, kind
    ("image" or "text"), predicted (int or ""), vector (1-D array).
    """
    rows = list(records)
    width = len(rows[0]["vector"]) if rows else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["instance_id", "class_id", "split", "kind", "predicted",
                    *(f"v{j}" for j in range(width))])
        for r in rows:
            w.writerow([r["instance_id"], r["class_id"], r["split"], r["kind"], r["predicted"],
                        *(repr(float(v)) for v in r["vector"])])
    return len(rows)
