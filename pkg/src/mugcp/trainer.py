"""Few-shot training with AdamW, base-to-new evaluation, seed aggregation and ablations."""

from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import logging
import time
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import build_backbone
from .data import SyntheticData, build_dataset
from .errors import ConfigurationError, ContractError, NonFiniteError, TrainingDiverged
from .model import MuGCP
from .mpf import text_layout, visual_layout
from .objectives import (AugmentedTextBank, LossConfig, augment_image_features,
                         build_default_bank, load_bank, sample_supervision)
from .rng import make_rng
from .state import PromptState, as_tensors
from .tensor import Tape, precision

log = logging.getLogger(__name__)

METRIC_FIELDS = ("base_acc", "new_acc", "hm", "train_acc", "final_loss")
PROMPT_SWITCHES = ("amg_mode", "amg_shared", "mpf_mode", "mllm_cache", "n_cond", "n_ctx",
                   "n_layers", "tau")
GRID_KEYS = PROMPT_SWITCHES + ("lam", "shots")


@dataclass(frozen=True)
class TrainConfig:
    shots: int = 4
    epochs: int = 20
    lr: float = 2e-4
    batch_size: int = 1
    weight_decay: float = 1e-2
    seeds: tuple[int, ...] = (1, 2, 3)
    precision: str = "f32"

    def __post_init__(self):
        if self.shots < 1:
            raise ConfigurationError("shots must be >= 1")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if not self.lr > 0:
            raise ConfigurationError("lr must be positive")
        if self.batch_size != 1:
            raise ConfigurationError("only batch_size = 1 is supported")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be >= 0")
        if not self.seeds:
            raise ConfigurationError("seeds must be non-empty")
        if self.precision not in ("f32", "f64"):
            raise ConfigurationError("precision must be 'f32' or 'f64'")


# -- optimizer ------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: Mapping, grads: Mapping[str, np.ndarray | None], state: AdamState,
               lr: float = 2e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 1e-2) -> None:
    """One AdamW update in place; decay multiplies the weights, not the gradient.

    ``params`` maps names to arrays or tensors (their ``.data`` is updated).
    A missing or ``None`` gradient counts as zero.
    """
    for name in params:
        g = grads.get(name)
        if g is not None and not np.isfinite(g).all():
            raise NonFiniteError("adamw_step", f"gradient of {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        w = p if isinstance(p, np.ndarray) else p.data
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(w)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        v = state.v[name]
        if weight_decay:
            w *= 1.0 - lr * weight_decay
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        w -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# -- metrics --------------------------------------------------------------------

def harmonic_mean(base_acc: float, new_acc: float) -> float:
    """2bn/(b+n); 0 when both are 0."""
    if base_acc < 0 or new_acc < 0:
        raise ContractError("accuracies must be non-negative")
    if base_acc + new_acc == 0:
        return 0.0
    return 2.0 * base_acc * new_acc / (base_acc + new_acc)


@dataclass(frozen=True)
class SeedMetrics:
    seed: int
    base_acc: float
    new_acc: float
    hm: float
    train_acc: float
    final_loss: float
    epoch_losses: tuple[float, ...]
    wall_clock: float = field(default=0.0, compare=False)

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("wall_clock")
        d["epoch_losses"] = list(self.epoch_losses)
        return d


@dataclass(frozen=True)
class MetricsRecord:
    per_seed: tuple[SeedMetrics, ...]

    @property
    def seeds(self) -> list[int]:
        return [m.seed for m in self.per_seed]

    def mean(self) -> dict[str, float]:
        return {f: float(np.mean([getattr(m, f) for m in self.per_seed])) for f in METRIC_FIELDS}

    def std(self) -> dict[str, float]:
        return {f: float(np.std([getattr(m, f) for m in self.per_seed])) for f in METRIC_FIELDS}

    @property
    def wall_clock(self) -> float:
        return float(sum(m.wall_clock for m in self.per_seed))


def evaluate(model, state, instances: Sequence, classes: Sequence[int]) -> float:
    """Fraction of ``instances`` whose argmax prediction over ``classes`` is correct."""
    if not instances:
        raise ConfigurationError("cannot evaluate an empty split")
    correct = sum(int(model.predict_class(state, inst, classes) == inst.class_id)
                  for inst in instances)
    return correct / len(instances)


# -- training -------------------------------------------------------------------

def _step_inputs(model: MuGCP, bank, inst, seed, epoch, step, aug_std):
    t_prime = sample_supervision(bank, inst.class_id, make_rng(seed, "bank", epoch, step))
    f_prime = augment_image_features(inst, model.backbone, make_rng(seed, "aug", epoch, step),
                                     aug_std)
    return t_prime, f_prime


def train_fewshot(config: TrainConfig, model: MuGCP, data: SyntheticData, seed: int,
                  bank: AugmentedTextBank, loss_config: LossConfig | None = None
                  ) -> tuple[PromptState, SeedMetrics]:
    """Train one seed with batch size 1 and report base/new/HM accuracy.

    Raises :class:`TrainingDiverged` (carrying the last epoch-end parameters)
    if any step produces a non-finite value.
    """
    loss_config = loss_config or LossConfig()
    bank.require(data.base_classes)
    backbone = model.backbone
    fingerprint = backbone.fingerprint()
    started = time.perf_counter()
    classes = data.base_classes
    with precision(config.precision):
        state = model.init_state(seed)
        adam = AdamState()
        last_good = state.arrays()
        epoch_losses: list[float] = []
        for epoch in range(config.epochs):
            order = make_rng(seed, "order", epoch).permutation(len(data.train))
            running = 0.0
            for step, idx in enumerate(order):
                inst = data.train[idx]
                t_prime, f_prime = _step_inputs(model, bank, inst, seed, epoch, step,
                                                loss_config.aug_std)
                try:
                    with Tape() as tape:
                        loss, _, _ = model.loss(state, inst, classes, t_prime, f_prime,
                                                loss_config.lam)
                    tape.backward(loss)
                    adamw_step(state, {k: p.grad for k, p in state.items()}, adam, lr=config.lr,
                               weight_decay=config.weight_decay)
                except NonFiniteError as exc:
                    raise TrainingDiverged(f"seed {seed} epoch {epoch} step {step}: {exc}",
                                           last_good_state=as_tensors(last_good)) from exc
                running += loss.item()
            epoch_losses.append(running / len(data.train))
            last_good = state.arrays()
            log.info("seed %d epoch %d loss %.4f", seed, epoch, epoch_losses[-1])

        if epoch_losses:
            final_loss = epoch_losses[-1]
        else:
            final_loss = float(np.mean([
                model.loss(state, inst, classes,
                           *_step_inputs(model, bank, inst, seed, 0, j, loss_config.aug_std),
                           loss_config.lam)[0].item()
                for j, inst in enumerate(data.train)]))
        train_acc = evaluate(model, state, data.train, classes)
        base_acc = evaluate(model, state, data.test_base, classes)
        new_acc = evaluate(model, state, data.test_new, data.new_classes) if data.test_new else 0.0
    if backbone.fingerprint() != fingerprint:
        raise RuntimeError("frozen backbone weights changed during training")
    metrics = SeedMetrics(seed, base_acc, new_acc, harmonic_mean(base_acc, new_acc), train_acc,
                          float(final_loss), tuple(float(x) for x in epoch_losses),
                          wall_clock=time.perf_counter() - started)
    return state, metrics


@dataclass
class ExperimentResult:
    states: dict[int, PromptState]
    record: MetricsRecord
    model: MuGCP
    bank: AugmentedTextBank


def experiment_bank(exp, model: MuGCP, data: SyntheticData) -> AugmentedTextBank:
    if exp.bank_path:
        return load_bank(exp.bank_path, model.backbone)
    return build_default_bank(model.backbone, data.topics)


def run_experiment(exp, seeds: Sequence[int] | None = None, backbone=None) -> ExperimentResult:
    """Train every seed of an experiment config (see :mod:`mugcp.config`)."""
    backbone = backbone or build_backbone(exp.backbone)
    model = MuGCP(backbone, exp.prompt)
    seeds = tuple(seeds if seeds is not None else exp.train.seeds)
    states, per_seed, bank = {}, [], None
    for seed in seeds:
        data = build_dataset(exp.data, backbone, exp.train.shots, seed)
        if bank is None:
            bank = experiment_bank(exp, model, data)
        states[seed], m = train_fewshot(exp.train, model, data, seed, bank, exp.loss)
        per_seed.append(m)
    return ExperimentResult(states, MetricsRecord(tuple(per_seed)), model, bank)


# -- ablations ------------------------------------------------------------------

@dataclass
class AblationRow:
    switches: dict
    record: MetricsRecord
    text_length: int
    visual_length: int


def apply_switches(exp, switches: Mapping):
    """Copy of an experiment config with grid switches applied."""
    unknown = set(switches) - set(GRID_KEYS)
    if unknown:
        raise ConfigurationError(f"unknown ablation switches {sorted(unknown)}; "
                                 f"known: {list(GRID_KEYS)}")
    prompt = {k: v for k, v in switches.items() if k in PROMPT_SWITCHES}
    out = dataclasses.replace(exp, prompt=dataclasses.replace(exp.prompt, **prompt))
    if "lam" in switches:
        out = dataclasses.replace(out, loss=dataclasses.replace(out.loss, lam=switches["lam"]))
    if "shots" in switches:
        out = dataclasses.replace(out, train=dataclasses.replace(out.train, shots=switches["shots"]))
    return out


def run_ablation_grid(base, grid: Mapping[str, Sequence], seeds: Sequence[int] | None = None
                      ) -> list[AblationRow]:
    """One train+eval per cell of the Cartesian product of ``grid``, per seed."""
    unknown = set(grid) - set(GRID_KEYS)
    if unknown:
        raise ConfigurationError(f"unknown ablation switches {sorted(unknown)}")
    keys = list(grid)
    backbone = build_backbone(base.backbone)
    rows = []
    for values in itertools.product(*(grid[k] for k in keys)):
        switches = dict(zip(keys, values))
        exp = apply_switches(base, switches)
        result = run_experiment(exp, seeds=seeds, backbone=backbone)
        p, c = exp.prompt, base.backbone
        tl = text_layout(p.mpf_mode, p.n_ctx, c.name_len, p.n_cond)
        vl = visual_layout(p.mpf_mode, c.n_patches, p.n_cond, p.n_ctx)
        rows.append(AblationRow(switches, result.record, tl["eos"].stop, vl["ctx"].stop))
    return rows


# -- output files -------------------------------------------------------------------

def write_metrics(out_dir, rows: Sequence[AblationRow]) -> None:
    """metrics.csv (one row per seed per cell), metrics.json (mean/std), timing.json.

    Wall-clock times go only to timing.json so the other two files are
    byte-identical across reruns.
    """
    out_dir = Path(out_dir)
    switch_keys = sorted({k for r in rows for k in r.switches})
    with open(out_dir / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*switch_keys, "seed", *METRIC_FIELDS])
        for r in rows:
            for m in r.record.per_seed:
                w.writerow([r.switches.get(k, "") for k in switch_keys] + [m.seed] +
                           [repr(float(getattr(m, f))) for f in METRIC_FIELDS])
    summary = {"cells": [{"switches": r.switches, "seeds": r.record.seeds,
                          "text_length": r.text_length, "visual_length": r.visual_length,
                          "mean": r.record.mean(), "std": r.record.std(),
                          "per_seed": [m.as_dict() for m in r.record.per_seed]} for r in rows]}
    (out_dir / "metrics.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    timing = {"cells": [{"switches": r.switches,
                         "wall_clock": {str(m.seed): m.wall_clock for m in r.record.per_seed}}
                        for r in rows]}
    (out_dir / "timing.json").write_text(json.dumps(timing, indent=2) + "\n")



# -- gradient check -----------------------------------------------------------------

def gradcheck_total_loss(exp, seed: int, step: float = 1e-5):
    """Finite-difference check of the total loss over every trainable parameter.

    Runs in 64-bit precision on the first training instance of ``seed``.
    Returns ``(report, state)``; group names come from :func:`mugcp.state.group_of`.
    """
    from .gradcheck import finite_diff_check

    backbone = build_backbone(exp.backbone)
    model = MuGCP(backbone, exp.prompt)
    data = build_dataset(exp.data, backbone, exp.train.shots, seed)
    bank = experiment_bank(exp, model, data)
    inst = data.train[0]
    t_prime, f_prime = _step_inputs(model, bank, inst, seed, 0, 0, exp.loss.aug_std)
    with precision("f64"):
        state = model.init_state(seed)
        report = finite_diff_check(
            lambda p: model.loss(p, inst, data.base_classes, t_prime, f_prime, exp.loss.lam)[0],
            state, step=step)
    return report, state
