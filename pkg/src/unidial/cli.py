"""``unidial`` command line: gendata, train, eval, ablate, generate, export-attention.

Exit codes: 0 success, 1 usage error, 2 data or schema error, 3 non-finite
loss.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics
from .autograd import NonFiniteError
from .corpus import (
    ANSWERS,
    OOVError,
    Vocab,
    attach_dense,
    generate_synthetic_corpus,
    load_dense,
    load_dialogs,
    load_features,
    save_dense,
    save_dialogs,
    save_features,
)
from .inference import export_attention, generate_answer, predict
from .losses import ABLATION_MODES, NonFiniteLossError
from .model import CheckpointError, ModelConfig, full_scale_profile
from .trainer import TrainConfig, TrainingData, load_models, train

SCHEMA_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- config files ----------------------------------------------------------
def _check_fields(cls, section: dict, path: str) -> None:
    known = {f.name: f for f in fields(cls)}
    for key in section:
        if key not in known:
            raise DataError(f"{path}.{key}: unknown key")


def load_run_config(path, vocab_size: int) -> tuple[ModelConfig, TrainConfig]:
    """Parse ``{"schema_version": 1, "model": {...}, "train": {...}}``; errors name the offending field."""
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"{path}: config file not found")
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON ({e})")
    return parse_run_config(raw, vocab_size)


def parse_run_config(raw: dict, vocab_size: int) -> tuple[ModelConfig, TrainConfig]:
    if not isinstance(raw, dict):
        raise DataError("config: top level must be an object")
    for key in raw:
        if key not in ("schema_version", "model", "train"):
            raise DataError(f"config.{key}: unknown key")
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise DataError(f"config.schema_version: expected {SCHEMA_VERSION}, got {raw.get('schema_version')!r}")
    model = dict(raw.get("model", {}))
    train_section = dict(raw.get("train", {}))
    _check_fields(ModelConfig, model, "config.model")
    _check_fields(TrainConfig, train_section, "config.train")
    if model.setdefault("vocab_size", vocab_size) != vocab_size:
        raise DataError(f"config.model.vocab_size: {model['vocab_size']} does not match the vocabulary ({vocab_size})")
    try:
        mcfg = ModelConfig(**model)
    except (TypeError, ValueError) as e:
        raise DataError(f"config.model: {e}")
    try:
        tcfg = TrainConfig(**train_section)
    except (TypeError, ValueError) as e:
        raise DataError(f"config.train: {e}")
    return mcfg, tcfg


# -- data directories -------------------------------------------------------
def split_paths(data_dir, split: str) -> dict[str, Path]:
    d = Path(data_dir)
    return {"dialogs": d / f"{split}_dialogs.json", "features": d / f"{split}_features.bin",
            "dense": d / f"{split}_dense.json", "vocab": d / "vocab.json"}


def load_split(data_dir, split: str, dense_path=None, need_dense: bool = False) -> TrainingData:
    paths = split_paths(data_dir, split)
    if not Path(data_dir).is_dir():
        raise DataError(f"{data_dir}: data directory not found")
    for key in ("dialogs", "features", "vocab"):
        if not paths[key].exists():
            raise DataError(f"{paths[key]}: missing")
    try:
        dialogs, _ = load_dialogs(paths["dialogs"])
        features = load_features(paths["features"])
        vocab = Vocab.load(paths["vocab"])
        dense_file = Path(dense_path) if dense_path is not None else paths["dense"]
        if dense_file.exists():
            attach_dense(dialogs, load_dense(dense_file))
        elif need_dense:
            raise DataError(f"{dense_file}: missing")
        return TrainingData(dialogs, features, vocab)
    except (ValueError, KeyError) as e:
        raise DataError(f"{data_dir}: {e}")


# -- commands ------------------------------------------------------------------
def cmd_gendata(args) -> int:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"{out}: cannot create ({e})")
    dialogs, features, vocab = generate_synthetic_corpus(
        args.seed, args.images, args.rounds, n_candidates=args.candidates, n_regions=args.regions,
        d_img=args.d_img, world_seed=args.world_seed, first_image_id=args.first_image_id,
    )
    paths = split_paths(out, args.split)
    try:
        save_dialogs(paths["dialogs"], dialogs, ANSWERS)
        save_features(paths["features"], features)
        save_dense(paths["dense"], dialogs)
        vocab.save(paths["vocab"])
    except OSError as e:
        raise DataError(f"{out}: cannot write ({e})")
    print(f"wrote {len(dialogs)} dialogs / {sum(len(d.rounds) for d in dialogs)} rounds to {out}")
    return EXIT_OK


def _resolve_config(args, vocab_size: int) -> tuple[ModelConfig, TrainConfig]:
    if args.config is not None:
        mcfg, tcfg = load_run_config(args.config, vocab_size)
    else:
        mcfg, tcfg = ModelConfig(vocab_size=vocab_size), TrainConfig()
    overrides = {}
    if getattr(args, "mode", None):
        overrides["ablation_mode"] = args.mode
    if getattr(args, "dense_annotations", None):
        overrides["dense_finetune"] = True
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if overrides:
        try:
            tcfg = TrainConfig(**{**tcfg.to_dict(), **overrides})
        except ValueError as e:
            raise DataError(f"config.train: {e}")
    return mcfg, tcfg


def cmd_train(args) -> int:
    dense = args.dense_annotations is not None
    if dense and not Path(args.dense_annotations).exists():
        raise DataError(f"{args.dense_annotations}: missing")
    data = load_split(args.data, args.split, args.dense_annotations, need_dense=dense)
    mcfg, tcfg = _resolve_config(args, len(data.vocab))
    if args.resume and not Path(args.out).exists():
        raise DataError(f"{args.out}: nothing to resume")
    try:
        trainer = train(mcfg, tcfg, data, args.out, args.log, resume=args.resume, stop_after=args.stop_after,
                        init_from=args.init)
    except CheckpointError as e:
        raise DataError(str(e))
    last = trainer.history[-1] if trainer.history else None
    msg = f"step {trainer.step}/{trainer.tcfg.total_steps}"
    if last is not None:
        msg += f" l_total={last.total:.4f}"
    print(f"{msg}; checkpoint {args.out}")
    return EXIT_OK


def evaluate_checkpoint(ckpt, data: TrainingData, setting: str) -> tuple[dict, list[dict]]:
    try:
        mcfg, models, config = load_models(ckpt)
    except (CheckpointError, FileNotFoundError, KeyError, ValueError) as e:
        raise DataError(f"{ckpt}: {e}")
    if config.get("vocab") is not None and list(config["vocab"]) != list(data.vocab.itos):
        raise DataError(f"{ckpt}: checkpoint vocabulary does not match the data")
    rows = predict(data.dialogs, data.features, models[setting], data.vocab, setting)
    return metrics.evaluate_predictions(rows, data.dialogs), rows


def cmd_eval(args) -> int:
    data = load_split(args.data, args.split)
    report, rows = evaluate_checkpoint(args.ckpt, data, args.setting)
    out = Path(args.out)
    metrics.write_report(out, report)
    pred = Path(args.predictions) if args.predictions else out.with_name(out.stem + "_predictions.jsonl")
    metrics.write_predictions(pred, rows)
    print(json.dumps({k: round(report[k], 4) for k in metrics.REPORT_KEYS}))
    return EXIT_OK


def ablation_columns() -> list[str]:
    return [f"{s}_{k}" for s in ("disc", "gen") for k in metrics.REPORT_KEYS]


def run_ablation(data_dir, seeds: int, out, config=None, modes: Sequence[str] = ABLATION_MODES,
                 train_split: str = "train", eval_split: str | None = None, work_dir=None) -> dict:
    """Train every (mode, seed) cell, evaluate both settings, write mean table plus per-cell CSV."""
    train_data = load_split(data_dir, train_split)
    eval_split = eval_split or (
        "val" if split_paths(data_dir, "val")["dialogs"].exists() else train_split)
    eval_data = load_split(data_dir, eval_split)
    if config is not None:
        mcfg, base = load_run_config(config, len(train_data.vocab))
    else:
        mcfg, base = ModelConfig(vocab_size=len(train_data.vocab)), TrainConfig()
    out = Path(out)
    work = Path(work_dir) if work_dir is not None else out.parent / (out.stem + "_runs")
    work.mkdir(parents=True, exist_ok=True)
    cells: dict[tuple[str, int], dict[str, float]] = {}
    for mode in modes:
        for seed in range(seeds):
            tcfg = TrainConfig(**{**base.to_dict(), "ablation_mode": mode, "seed": base.seed + seed})
            ckpt = work / f"{mode}_seed{seed}.ckpt"
            train(mcfg, tcfg, train_data, ckpt)
            row = {}
            for setting in ("disc", "gen"):
                rep, _ = evaluate_checkpoint(ckpt, eval_data, setting)
                row.update({f"{setting}_{k}": v for k, v in rep.items()})
            cells[(mode, seed)] = row
            print(f"{mode} seed {seed}: disc r1 {row['disc_r1']:.4f}  gen r1 {row['gen_r1']:.4f}", flush=True)
    cols = ablation_columns()
    means = {mode: {c: float(np.mean([cells[(mode, s)][c] for s in range(seeds)])) for c in cols} for mode in modes}
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode"] + cols)
        for mode in modes:
            w.writerow([mode] + [repr(means[mode][c]) for c in cols])
    with open(out.with_name(out.stem + "_cells.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "seed"] + cols)
        for (mode, seed) in sorted(cells, key=lambda k: (list(modes).index(k[0]), k[1])):
            w.writerow([mode, seed] + [repr(cells[(mode, seed)][c]) for c in cols])
    return {"means": means, "cells": cells}


def cmd_ablate(args) -> int:
    modes = args.modes.split(",") if args.modes else list(ABLATION_MODES)
    bad = [m for m in modes if m not in ABLATION_MODES]
    if bad:
        raise UsageError(f"unknown modes: {bad}")
    run_ablation(args.data, args.seeds, args.out, args.config, modes, args.train_split, args.eval_split)
    print(f"wrote {args.out}")
    return EXIT_OK


def _find_round(data: TrainingData, image_id: int, round_id: int):
    for d in data.dialogs:
        if d.image_id == image_id:
            if not 1 <= round_id <= len(d.rounds):
                raise DataError(f"image {image_id} has no round {round_id}")
            return d
    raise DataError(f"image {image_id} not in split")


def cmd_generate(args) -> int:
    data = load_split(args.data, args.split)
    d = _find_round(data, args.image_id, args.round)
    _, models, _ = load_models(args.ckpt)
    words = generate_answer(d, args.round, data.features[d.image_id], models["gen"], data.vocab, args.max_len)
    print(" ".join(words))
    return EXIT_OK


def cmd_export_attention(args) -> int:
    data = load_split(args.data, args.split)
    d = _find_round(data, args.image_id, args.round)
    _, models, _ = load_models(args.ckpt)
    paths = export_attention(d, args.round, data.features[d.image_id], models[args.setting], data.vocab,
                             args.out, args.setting)
    for name, p in paths.items():
        print(f"{name}: {p}")
    return EXIT_OK


# -- entry point ---------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="unidial", description="Unified discriminative/generative visual dialog model.")
    p.add_argument("--full-scale-profile", action="store_true", help="print the full-scale configuration and exit")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gendata", help="write a synthetic corpus split")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--images", type=int, required=True)
    g.add_argument("--rounds", type=int, required=True)
    g.add_argument("--candidates", type=int, default=100)
    g.add_argument("--regions", type=int, default=8)
    g.add_argument("--d-img", type=int, default=32)
    g.add_argument("--world-seed", type=int, default=0)
    g.add_argument("--first-image-id", type=int, default=0)
    g.add_argument("--split", default="train")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gendata)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--split", default="train")
    t.add_argument("--out", required=True)
    t.add_argument("--log")
    t.add_argument("--mode", choices=ABLATION_MODES)
    t.add_argument("--seed", type=int)
    t.add_argument("--dense-annotations")
    t.add_argument("--init", help="start from this checkpoint's weights (dense finetuning)")
    t.add_argument("--resume", action="store_true")
    t.add_argument("--stop-after", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="rank candidates and report metrics")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val")
    e.add_argument("--setting", choices=("disc", "gen"), required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--predictions")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate every ablation mode over several seeds")
    a.add_argument("--data", required=True)
    a.add_argument("--seeds", type=int, default=1)
    a.add_argument("--out", required=True)
    a.add_argument("--config")
    a.add_argument("--modes", help="comma-separated subset of modes")
    a.add_argument("--train-split", default="train")
    a.add_argument("--eval-split")
    a.set_defaults(func=cmd_ablate)

    gen = sub.add_parser("generate", help="greedy answer for one round")
    gen.add_argument("--ckpt", required=True)
    gen.add_argument("--data", required=True)
    gen.add_argument("--split", default="val")
    gen.add_argument("--image-id", type=int, required=True)
    gen.add_argument("--round", type=int, required=True)
    gen.add_argument("--max-len", type=int)
    gen.set_defaults(func=cmd_generate)

    x = sub.add_parser("export-attention", help="dump last-layer attention for one round as CSV")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--split", default="val")
    x.add_argument("--image-id", type=int, required=True)
    x.add_argument("--round", type=int, required=True)
    x.add_argument("--setting", choices=("disc", "gen"), default="disc")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_attention)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.full_scale_profile:
            print(json.dumps({"schema_version": SCHEMA_VERSION, "model": full_scale_profile().to_dict(),
                              "train": {"batch_size": 120, "epochs": 20, "peak_lr": 2e-4}}, indent=2))
            return EXIT_OK
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("a command is required")
        return args.func(args)
    except UsageError as e:
        print(f"unidial: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, OOVError) as e:
        print(f"unidial: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteLossError, NonFiniteError) as e:
        print(f"unidial: numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
