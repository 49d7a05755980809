"""Strict TOML experiment configuration.

Sections map one-to-one onto config dataclasses::

    [backbone]  BackboneConfig      [prompt]  PromptConfig
    [train]     TrainConfig         [loss]    LossConfig
    [data]      DataSpec            [io]      bank, out_dir

Unknown sections or keys, and values of the wrong type, raise
:class:`ConfigFileError` naming the file, line and key.
"""

from __future__ import annotations

import dataclasses
import re
import sys
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import BackboneConfig
from .data import DataSpec
from .errors import ConfigurationError
from .objectives import LossConfig
from .state import PromptConfig
from .trainer import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigFileError(ConfigurationError):
    pass


@dataclass(frozen=True)
class IOConfig:
    bank: str = ""
    out_dir: str = ""


@dataclass(frozen=True)
class ExperimentConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    prompt: PromptConfig = field(default_factory=PromptConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    data: DataSpec = field(default_factory=DataSpec)
    io: IOConfig = field(default_factory=IOConfig)

    @property
    def bank_path(self) -> str | None:
        return self.io.bank or None


SECTIONS: dict[str, type] = {
    "backbone": BackboneConfig,
    "prompt": PromptConfig,
    "train": TrainConfig,
    "loss": LossConfig,
    "data": DataSpec,
    "io": IOConfig,
}

_DOCS = {
    "backbone": "Frozen mock encoders and decoder layer (widths, depth, extents, seed).",
    "prompt": "Prompt lengths, insertion depth, temperature, ablation switches.",
    "train": "Optimization and seeds.",
    "loss": "Consistency-loss weight and image-feature jitter.",
    "data": "Synthetic few-shot task.",
    "io": "Optional supervision bank JSON and default output directory.",
}

_KEYS = {
    "d_text": "text encoder width", "d_img": "image encoder width",
    "d_mllms": "decoder (MLLM) width", "d_embed": "joint embedding width",
    "heads": "attention heads; must divide d_text, d_img and d_mllms",
    "depth": "encoder depth (<= 12)", "n_patches": "image patch tokens",
    "name_len": "tokens per class name", "caption_len": "caption tokens per instance",
    "d_feature": "raw instance feature width", "n_classes": "class-name vocabulary size",
    "caption_vocab": "caption word vocabulary size", "hash_buckets": "buckets for non-class words",
    "seed": "backbone weight seed (also fixes class centers and test splits)",
    "n_cond": "conditional prompt length", "n_ctx": "contextual prompt length",
    "n_layers": "insertion layers; unset means every layer",
    "tau": "softmax temperature", "amg_mode": "full | self-only | cross-only | linear-only",
    "amg_shared": "one mutual-guidance block for all layers",
    "mpf_mode": "add | concat | both", "mllm_cache": "on | random-init",
    "train_kv": "also train the decoder key/value projections",
    "adapter_ratio": "adapter hidden width as a fraction of d_embed",
    "eval_with_adapters": "apply adapters when predicting",
    "shots": "training instances per base class", "epochs": "passes over the shots",
    "lr": "AdamW learning rate (constant)", "batch_size": "only 1 is supported",
    "weight_decay": "decoupled weight decay", "seeds": "run seeds",
    "precision": "f32 | f64", "lam": "consistency-loss weight",
    "aug_std": "image jitter std, relative to feature RMS",
    "n_base": "base (training) classes", "n_new": "new (held-out) classes",
    "cluster_std": "within-class feature std", "n_test": "test instances per class",
    "topic_words": "caption topic words per class",
    "caption_fidelity": "probability a caption word is on-topic",
    "bank": "supervision bank JSON; empty builds one from class descriptions",
    "out_dir": "default output directory for train and ablate",
}


def _line_of(text: str, section: str | None, key: str | None) -> int | None:
    current = None
    for n, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        m = re.match(r"^\[([^\]]+)\]", s)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return n
            continue
        if key is not None and current == section and re.match(rf"^{re.escape(key)}\s*=", s):
            return n
    return None


def _coerce(value, hint, where: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if hint is bool:
        if isinstance(value, bool):
            return value
    elif hint is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif hint is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif hint is str:
        if isinstance(value, str):
            return value
    elif origin is tuple:
        if isinstance(value, list):
            return tuple(_coerce(v, args[0], where) for v in value)
    elif origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], where)
    raise ConfigFileError(f"{where}: expected {getattr(hint, '__name__', hint)}, "
                          f"got {type(value).__name__} {value!r}")


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigFileError(f"{source}: {exc}") from None
    parts = {}
    for section, body in raw.items():
        if section not in SECTIONS:
            line = _line_of(text, section, None)
            raise ConfigFileError(f"{source}:{line}: unknown section [{section}]; "
                                  f"expected one of {list(SECTIONS)}")
        if not isinstance(body, dict):
            raise ConfigFileError(f"{source}: '{section}' must be a [section]")
        cls = SECTIONS[section]
        hints = typing.get_type_hints(cls)
        kwargs = {}
        for key, value in body.items():
            line = _line_of(text, section, key)
            where = f"{source}:{line}: [{section}] {key}"
            if key not in hints:
                raise ConfigFileError(f"{where}: unknown key; known keys: {sorted(hints)}")
            kwargs[key] = _coerce(value, hints[key], where)
        try:
            parts[section] = cls(**kwargs)
        except ConfigurationError as exc:
            raise ConfigFileError(f"{source}: [{section}] {exc}") from None
    return ExperimentConfig(**parts)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigFileError(f"cannot read config {path}: {exc}") from None
    exp = parse_config(text, str(path))
    if exp.io.bank and not Path(exp.io.bank).is_absolute():
        exp = dataclasses.replace(exp, io=dataclasses.replace(
            exp.io, bank=str((path.parent / exp.io.bank).resolve())))
    return exp


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return f'"{v}"'
    if isinstance(v, tuple):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return repr(v)


def config_reference() -> str:
    """Every section and key with its default, as a commented TOML document."""
    lines = ["# mugcp experiment configuration reference (all defaults)", ""]
    for section, cls in SECTIONS.items():
        lines.append(f"# {_DOCS[section]}")
        lines.append(f"[{section}]")
        for f in dataclasses.fields(cls):
            default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
            if default is None:
                entry = f"# {f.name} = <unset>"
            else:
                entry = f"{f.name} = {_toml_value(default)}"
            lines.append(f"{entry:<28}# {_KEYS[f.name]}")
        lines.append("")
    return "\n".join(lines)
