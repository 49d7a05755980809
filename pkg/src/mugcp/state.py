"""Learnable prompt parameters and the switches that shape them."""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from .backbone import X_TOKEN, FrozenBackbone
from .errors import ConfigurationError
from .layers import init_attention, init_ffn, init_layer_norm, init_linear
from .rng import make_rng
from .tensor import Tensor

AMG_MODES = ("full", "self-only", "cross-only", "linear-only")
MPF_MODES = ("add", "concat", "both")
CACHE_MODES = ("on", "random-init")
PROMPT_STD = 0.02

# name prefix -> reporting group, first match wins
_GROUPS = (
    ("scp.query", "P_Q"),
    ("scp.random_pd", "P_D"),
    ("scp.L_q.", "L_q"),
    ("scp.L_o.", "L_o"),
    ("scp.L_k.", "L_k"),
    ("scp.L_v.", "L_v"),
    ("scp.text_bottleneck.", "F_t"),
    ("amg", "AMG"),
    ("vcp.bottleneck.", "F_v"),
    ("ctx.text.", "P_T"),
    ("ctx.image.", "P_V"),
    ("adapter.image.", "adapter_va"),
    ("adapter.text.", "adapter_ta"),
)


@dataclass(frozen=True)
class PromptConfig:
    """Prompt lengths, insertion depth, temperature and ablation switches.

    ``n_layers`` of ``None`` means "insert at every encoder layer".
    """

    n_cond: int = 16
    n_ctx: int = 4
    n_layers: int | None = None
    tau: float = 0.01
    amg_mode: str = "full"
    amg_shared: bool = True
    mpf_mode: str = "both"
    mllm_cache: str = "on"
    train_kv: bool = False
    adapter_ratio: float = 0.5
    eval_with_adapters: bool = True

    def __post_init__(self):
        if self.n_cond < 1 or self.n_ctx < 1:
            raise ConfigurationError("prompt lengths n_cond and n_ctx must be >= 1")
        if self.n_layers is not None and self.n_layers < 1:
            raise ConfigurationError("n_layers must be >= 1")
        if not self.tau > 0:
            raise ConfigurationError("tau must be positive")
        if self.amg_mode not in AMG_MODES:
            raise ConfigurationError(f"amg_mode must be one of {AMG_MODES}, got {self.amg_mode!r}")
        if self.mpf_mode not in MPF_MODES:
            raise ConfigurationError(f"mpf_mode must be one of {MPF_MODES}, got {self.mpf_mode!r}")
        if self.mllm_cache not in CACHE_MODES:
            raise ConfigurationError(f"mllm_cache must be one of {CACHE_MODES}")
        if not 0 < self.adapter_ratio <= 4:
            raise ConfigurationError("adapter_ratio must be in (0, 4]")

    def insertion_layers(self, depth: int) -> int:
        n = depth if self.n_layers is None else self.n_layers
        if n > depth:
            raise ConfigurationError(f"n_layers={n} exceeds encoder depth {depth}")
        return n


def group_of(name: str) -> str:
    for prefix, group in _GROUPS:
        if name.startswith(prefix):
            return group
    raise KeyError(f"parameter {name!r} belongs to no group")


def amg_prefix(config: PromptConfig, layer: int) -> str:
    return "amg" if config.amg_shared else f"amg.{layer}"


class PromptState(Mapping):
    """Ordered ``name -> Tensor`` map of every trainable parameter."""

    def __init__(self, params: dict[str, Tensor]):
        self._params = dict(params)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def groups(self) -> list[str]:
        seen: dict[str, None] = {}
        for name in self._params:
            seen.setdefault(group_of(name), None)
        return list(seen)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self._params.items()}

    def copy(self) -> "PromptState":
        return PromptState({k: Tensor(p.data, requires_grad=p.requires_grad)
                            for k, p in self._params.items()})

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        if set(arrays) != set(self._params):
            missing = set(self._params) - set(arrays)
            extra = set(arrays) - set(self._params)
            raise ConfigurationError(f"parameter set mismatch: missing={sorted(missing)} "
                                     f"unexpected={sorted(extra)}")
        for k, p in self._params.items():
            a = np.asarray(arrays[k])
            if a.shape != p.shape:
                raise ConfigurationError(f"{k}: shape {a.shape} != {p.shape}")
            p.data[...] = a


def init_state(backbone: FrozenBackbone, config: PromptConfig, seed: int) -> PromptState:
    """Fresh prompt parameters for one run, all drawn from ``(seed, "prompt-init")``."""
    c = backbone.config
    n_layers = config.insertion_layers(c.depth)
    rng = make_rng(seed, "prompt-init")
    arrays: dict[str, np.ndarray] = {}

    if config.mllm_cache == "on":
        arrays["scp.query"] = rng.normal(0.0, PROMPT_STD, size=(config.n_cond, c.d_mllms))
        decoder_names = ("q", "o", "k", "v") if config.train_kv else ("q", "o")
        for n in decoder_names:
            arrays[f"scp.L_{n}.weight"] = backbone.array(f"dec.{n}.weight").copy()
            arrays[f"scp.L_{n}.bias"] = backbone.array(f"dec.{n}.bias").copy()
    else:
        arrays["scp.random_pd"] = rng.normal(0.0, PROMPT_STD, size=(config.n_cond, c.d_mllms))

    for i in range(n_layers):
        arrays.update(init_linear(rng, f"scp.text_bottleneck.{i}", c.d_mllms, c.d_text))

    amg_layers = [None] if config.amg_shared else range(n_layers)
    for i in amg_layers:
        prefix = "amg" if i is None else f"amg.{i}"
        arrays.update(_init_amg(rng, prefix, config.amg_mode, c.d_text, c.d_img))

    for i in range(n_layers):
        arrays.update(init_linear(rng, f"vcp.bottleneck.{i}", c.d_text, c.d_img))

    x_row = backbone.array("word_embed")[X_TOKEN]
    for i in range(n_layers):
        if i == 0:
            # "X X ... X": one X embedding per context slot
            arrays[f"ctx.text.{i}"] = np.tile(x_row, (config.n_ctx, 1))
        else:
            arrays[f"ctx.text.{i}"] = rng.normal(0.0, PROMPT_STD, size=(config.n_ctx, c.d_text))
        arrays[f"ctx.image.{i}"] = rng.normal(0.0, PROMPT_STD, size=(config.n_ctx, c.d_img))

    hidden = max(1, int(round(c.d_embed * config.adapter_ratio)))
    for side in ("image", "text"):
        arrays.update(init_linear(rng, f"adapter.{side}.fc1", c.d_embed, hidden))
        arrays.update(init_linear(rng, f"adapter.{side}.fc2", hidden, c.d_embed))

    return PromptState({k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()})


def _init_amg(rng, prefix: str, mode: str, d_text: int, d_img: int) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    if mode == "linear-only":
        out.update(init_linear(rng, f"{prefix}.linear", d_text, d_text))
        return out
    out.update(init_layer_norm(f"{prefix}.ln_query", d_text))
    if mode in ("full", "self-only"):
        out.update(init_attention(rng, f"{prefix}.self_attn", d_text, d_text, d_text, d_text))
    if mode in ("full", "cross-only"):
        out.update(init_layer_norm(f"{prefix}.ln_image", d_img))
        out.update(init_attention(rng, f"{prefix}.cross_attn", d_text, d_img, d_text, d_text))
    out.update(init_layer_norm(f"{prefix}.ln_ffn", d_text))
    out.update(init_ffn(rng, f"{prefix}.ffn", d_text))
    return out


def as_tensors(arrays: Mapping[str, np.ndarray], requires_grad: bool = True) -> PromptState:
    return PromptState({k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in arrays.items()})

