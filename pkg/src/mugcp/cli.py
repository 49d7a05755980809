"""Command-line entry point: ``mugcp <subcommand> ...``.

Every subcommand accepts ``--seed`` and ``--precision`` either before or
after the subcommand name.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import re
import shutil
import sys
import tempfile
import typing
from pathlib import Path

from .backbone import build_backbone
from .checkpoint import checkpoint_dtype, load_checkpoint, save_checkpoint
from .config import ConfigFileError, ExperimentConfig, load_config
from .data import build_dataset
from .errors import ConfigurationError, IntegrityError, MugcpError
from .model import MuGCP
from .mpf import write_embeddings_csv
from .objectives import Adapters, render_custom_template, render_llm_prompt
from .state import group_of
from .tensor import precision
from .trainer import (GRID_KEYS, AblationRow, evaluate, gradcheck_total_loss, harmonic_mean,
                      run_ablation_grid, run_experiment, write_metrics)

log = logging.getLogger("mugcp")

SPLITS = ("base", "new", "both")


# -- shared helpers ---------------------------------------------------------------

def _with_overrides(exp: ExperimentConfig, args) -> ExperimentConfig:
    train = exp.train
    if getattr(args, "seed", None):
        train = dataclasses.replace(train, seeds=tuple(args.seed))
    if getattr(args, "precision", None):
        train = dataclasses.replace(train, precision=args.precision)
    return dataclasses.replace(exp, train=train)


def _first_seed(exp: ExperimentConfig) -> int:
    return exp.train.seeds[0]


def _publish(tmp: Path, out: Path) -> None:
    """Move the finished contents of ``tmp`` into ``out``, replacing same-named entries."""
    if not out.exists():
        os.replace(tmp, out)
        return
    for child in sorted(tmp.iterdir()):
        target = out / child.name
        if target.is_dir():
            shutil.rmtree(target)
        elif target.exists():
            target.unlink()
        os.replace(child, target)
    tmp.rmdir()


def _staged(out: Path, fill) -> None:
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        fill(tmp)
        _publish(tmp, out)
    finally:
        if tmp.exists():
            shutil.rmtree(tmp)


def load_state(exp: ExperimentConfig, checkpoint, seed: int, backbone=None,
               dtype: str | None = None):
    """Model and prompt state restored from a checkpoint directory.

    The state uses the checkpoint's dtype unless ``dtype`` overrides it.
    """
    arrays = load_checkpoint(checkpoint)
    dtype = dtype or checkpoint_dtype(arrays)
    model = MuGCP(backbone or build_backbone(exp.backbone), exp.prompt)
    with precision(dtype):
        state = model.init_state(seed)
        try:
            state.load_arrays(arrays)
        except ConfigurationError as exc:
            raise IntegrityError(f"checkpoint does not match config: {exc}") from None
    return model, state, dtype


def evaluate_splits(model: MuGCP, state, exp: ExperimentConfig, seed: int, split: str,
                    dtype: str) -> dict:
    if split not in SPLITS:
        raise ConfigurationError(f"split must be one of {SPLITS}")
    data = build_dataset(exp.data, model.backbone, exp.train.shots, seed)
    out: dict = {"split": split, "seed": seed}
    with precision(dtype):
        if split in ("base", "both"):
            out["base_acc"] = evaluate(model, state, data.test_base, data.base_classes)
        if split in ("new", "both"):
            out["new_acc"] = evaluate(model, state, data.test_new, data.new_classes)
    if split == "both":
        out["hm"] = harmonic_mean(out["base_acc"], out["new_acc"])
    return out


def _slug(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "_", name.lower()).strip("_") or "class"


# -- subcommands ------------------------------------------------------------------

def cmd_train(args) -> int:
    exp = _with_overrides(load_config(args.config), args)
    out = Path(args.out or exp.io.out_dir or "runs/train")
    config_text = Path(args.config).read_text()

    def fill(tmp: Path):
        result = run_experiment(exp)
        for seed, state in result.states.items():
            save_checkpoint(tmp / "checkpoints" / f"seed_{seed}", state, dtype=exp.train.precision)
        write_metrics(tmp, [AblationRow({}, result.record, 0, 0)])
        (tmp / "config.toml").write_text(config_text)
        mean = result.record.mean()
        print(json.dumps({"seeds": result.record.seeds, "mean": mean}, sort_keys=True))

    _staged(out, fill)
    return 0


def cmd_eval(args) -> int:
    exp = _with_overrides(load_config(args.config), args)
    seed = _first_seed(exp)
    model, state, dtype = load_state(exp, args.checkpoint, seed, dtype=args.precision)
    result = evaluate_splits(model, state, exp, seed, args.split, dtype)
    text = json.dumps(result, indent=2, sort_keys=True) + "\n"
    sys.stdout.write(text)
    out = Path(args.out) if args.out else Path(args.checkpoint) / f"eval_{args.split}.json"
    out.write_text(text)
    return 0


def cmd_gradcheck(args) -> int:
    exp = _with_overrides(load_config(args.config), args)
    if args.precision and args.precision != "f64":
        print("note: gradcheck always runs in f64", file=sys.stderr)
    report, state = gradcheck_total_loss(exp, _first_seed(exp), step=args.step)
    groups = report.grouped(group_of)
    ok = True
    print(f"{'group':<12} {'max_rel_err':>12}  result")
    for g in state.groups():
        err = groups[g]
        passed = err < args.tolerance
        ok &= passed
        print(f"{g:<12} {err:12.3e}  {'PASS' if passed else 'FAIL'}")
    print(f"tolerance {args.tolerance:g}: {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def parse_grid_value(key: str, raw: str):
    if key not in GRID_KEYS:
        raise ConfigurationError(f"unknown grid key {key!r}; known: {list(GRID_KEYS)}")
    from .objectives import LossConfig
    from .state import PromptConfig
    from .trainer import TrainConfig
    for cls in (PromptConfig, LossConfig, TrainConfig):
        hints = typing.get_type_hints(cls)
        if key in hints:
            hint = hints[key]
            break
    args = [a for a in typing.get_args(hint) if a is not type(None)]
    if args:
        if raw.lower() in ("none", ""):
            return None
        hint = args[0]
    if hint is bool:
        if raw.lower() not in ("true", "false"):
            raise ConfigurationError(f"{key}: expected true/false, got {raw!r}")
        return raw.lower() == "true"
    try:
        return hint(raw)
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {raw!r} as {hint.__name__}") from None


def parse_grid(items) -> dict[str, list]:
    grid: dict[str, list] = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigurationError(f"grid entry {item!r} must look like key=v1,v2")
        key, values = item.split("=", 1)
        key = key.strip()
        grid[key] = [parse_grid_value(key, v.strip()) for v in values.split(",")]
    return grid


def cmd_ablate(args) -> int:
    exp = _with_overrides(load_config(args.config), args)
    grid = parse_grid(args.grid)
    out = Path(args.out or exp.io.out_dir or "runs/ablate")

    def fill(tmp: Path):
        rows = run_ablation_grid(exp, grid)
        write_metrics(tmp, rows)
        for r in rows:
            print(json.dumps({"switches": r.switches, "mean": r.record.mean()}, sort_keys=True))

    _staged(out, fill)
    return 0


def cmd_dump_embeddings(args) -> int:
    exp = _with_overrides(load_config(args.config), args)
    seed = _first_seed(exp)
    model, state, dtype = load_state(exp, args.checkpoint, seed, dtype=args.precision)
    data = build_dataset(exp.data, model.backbone, exp.train.shots, seed)
    parts = []
    if args.split in ("base", "both"):
        parts.append((data.test_base, data.base_classes))
    if args.split in ("new", "both"):
        parts.append((data.test_new, data.new_classes))
    records = []
    with precision(dtype):
        adapters = Adapters.from_mapping(state) if exp.prompt.eval_with_adapters else None
        for instances, classes in parts:
            for inst in instances:
                f, t = model.encode(state, inst, classes)
                if adapters is not None:
                    f, t = adapters.image(f), adapters.text(t)
                pred = model.predict_class(state, inst, classes)
                records.append({"instance_id": inst.instance_id, "class_id": inst.class_id,
                                "split": inst.split, "kind": "image", "predicted": pred,
                                "vector": f.data.reshape(-1)})
                for j, k in enumerate(classes):
                    records.append({"instance_id": inst.instance_id, "class_id": k,
                                    "split": inst.split, "kind": "text", "predicted": "",
                                    "vector": t.data[j]})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    n = write_embeddings_csv(out, records)
    print(f"wrote {n} rows to {out}")
    return 0


def _render_inputs(args, parser) -> dict[str, str]:
    pairs: dict[str, str] = {}
    if args.descriptions:
        raw = json.loads(Path(args.descriptions).read_text())
        if not isinstance(raw, dict) or not all(isinstance(v, str) for v in raw.values()):
            parser.error("--descriptions must be a JSON object {class name: description}")
        pairs.update(raw)
    names, texts = args.class_name or [], args.description or []
    if len(texts) != len(names):
        parser.error("give one --description per --class")
    pairs.update(zip(names, texts))
    if not pairs:
        parser.error("render-templates needs --descriptions FILE or at least one --class")
    empty = sorted(name for name, text in pairs.items() if not name or not text)
    if empty:
        parser.error(f"class names and descriptions must be non-empty: {empty}")
    return pairs


def cmd_render_templates(args, parser) -> int:
    pairs = _render_inputs(args, parser)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, text in pairs.items():
        body = (render_custom_template(name, text) + "\n"
                + render_llm_prompt(name, args.domain, text) + "\n")
        (out / f"{_slug(name)}.txt").write_text(body)
    print(f"wrote {len(pairs)} files to {out}")
    return 0


# -- parser ---------------------------------------------------------------------

def _global_flags(default) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, action="append", default=default,
                   help="run seed; repeat to train several (overrides [train] seeds)")
    p.add_argument("--precision", choices=("f32", "f64"), default=default,
                   help="floating-point precision (overrides [train] precision)")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mugcp", parents=[_global_flags(None)],
                                     description="Multi-modal prompt learning on a mock backbone.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch losses")
    sub = parser.add_subparsers(dest="command", required=True)
    flags = _global_flags(argparse.SUPPRESS)

    p = sub.add_parser("train", parents=[flags], help="train every seed; write checkpoints and metrics")
    p.add_argument("config")
    p.add_argument("--out", help="output directory (default: [io] out_dir)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[flags], help="evaluate a checkpoint on base/new classes")
    p.add_argument("checkpoint")
    p.add_argument("config")
    p.add_argument("--split", choices=SPLITS, default="both")
    p.add_argument("--out", help="metrics file (default: CHECKPOINT/eval_SPLIT.json)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[flags], help="finite-difference check of the total loss")
    p.add_argument("config")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", parents=[flags], help="train+eval over a grid of switches")
    p.add_argument("config")
    p.add_argument("--grid", action="append", metavar="KEY=V1,V2",
                   help=f"switch values; keys: {', '.join(GRID_KEYS)}")
    p.add_argument("--out", help="output directory (default: [io] out_dir)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dump-embeddings", parents=[flags], help="write image/text embeddings CSV")
    p.add_argument("checkpoint")
    p.add_argument("config")
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=SPLITS, default="both")
    p.set_defaults(func=cmd_dump_embeddings)

    p = sub.add_parser("render-templates", parents=[flags],
                       help="write the custom and expansion prompts for each class")
    p.add_argument("--descriptions", help="JSON object mapping class name to description")
    p.add_argument("--class", dest="class_name", action="append", help="class name (repeatable)")
    p.add_argument("--description", action="append", help="description for the matching --class")
    p.add_argument("--domain", default="object", help="domain name used in the expansion prompt")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render_templates)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        if args.func is cmd_render_templates:
            return cmd_render_templates(args, parser)
        return args.func(args)
    except ConfigFileError as exc:
        print(f"mugcp: config error: {exc}", file=sys.stderr)
        return 2
    except IntegrityError as exc:
        print(f"mugcp: integrity error: {exc}", file=sys.stderr)
        return 3
    except MugcpError as exc:
        print(f"mugcp: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
