"""Command-line entry points: synth, train, eval, gradcheck, compare.

Exit codes: 0 success, 1 validation or configuration error, 2 numeric abort,
3 internal error.
"""

import argparse
import json
import os
import shutil
import sys
import time
from contextlib import contextmanager
from pathlib import Path

from . import data as D
from .config import load_config
from .errors import (CheckpointError, ConfigError, DataValueError, EncodingError, NumericError,
                     SchemaError, TrainingAborted)
from .evaluation import compare_methods, evaluate_split
from .model import init_model, load_checkpoint, save_checkpoint
from .training import train_run

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_INTERNAL = 0, 1, 2, 3
_RUN_MARKER = "resolved_config.txt"


class ValidationError(Exception):
    pass


def _log(path):
    fh = open(path, "a", encoding="utf-8")

    def write(msg):
        fh.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} {msg}\n")
        fh.flush()

    write.close = fh.close
    return write


@contextmanager
def _staged_dir(out):
    """Build outputs in a sibling staging directory, then move them into place."""
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not (out / _RUN_MARKER).exists() \
            and not (out / "manifest").exists():
        raise ConfigError(f"refusing to overwrite non-empty directory {out}")
    stage = out.with_name(out.name + ".partial")
    if stage.exists():
        shutil.rmtree(stage)
    stage.mkdir(parents=True)
    published = False

    def publish():
        nonlocal published
        if out.exists():
            shutil.rmtree(out)
        os.replace(stage, out)
        published = True

    try:
        yield stage, publish
    finally:
        if not published and stage.exists():
            shutil.rmtree(stage)


# ---------------------------------------------------------------------------
# data assembly
# ---------------------------------------------------------------------------


def synth_splits(cfg, setting):
    s = cfg.synth
    return D.generate_synthetic_dataset(s.seed, s.n_mwes, s.examples_per_mwe, setting)


def load_splits(cfg, setting=None):
    setting = setting or cfg.setting
    if cfg.data.source == "synthetic":
        return synth_splits(cfg, setting)
    d = cfg.data
    splits = []
    if d.dir:
        splits += D.load_dataset(d.dir, setting)
    for name, path in (("train", d.train_path), ("dev", d.dev_path), ("test", d.test_path)):
        if path:
            records, issues = D.read_records(path)
            splits = [s for s in splits if s.name != name]
            splits.append(D.DatasetSplit(name, setting, records, issues))
    if d.zero_shot_train_path:
        records, issues = D.read_records(d.zero_shot_train_path)
        splits.append(D.DatasetSplit("train", "zero_shot", records, issues))
    if not splits:
        raise ConfigError("no data configured: set data.dir, data.train_path or data.source=synthetic")
    return splits


def validate_splits(splits, setting):
    """Raise :class:`ValidationError` when the split semantics are violated."""
    pool = D.training_pool(splits, setting)
    if not pool:
        raise ValidationError("training split is empty")
    train = D.DatasetSplit("train", setting, pool)
    others = [s for s in splits if s.name != "train"]
    problems = []
    if setting == "zero_shot":
        rep = D.validate_zero_shot_disjointness(train, others)
        if not rep.passed:
            problems.append(f"zero-shot MWE overlap between train and evaluation: {sorted(rep.overlap)}")
    else:
        for other in others:
            rep = D.validate_one_shot_coverage(train, other)
            if rep.missing:
                problems.append(f"{other.name}: MWEs lacking a train example per label: "
                                f"{sorted(rep.missing)}")
            if rep.shared_sentences:
                problems.append(f"{other.name}: {len(rep.shared_sentences)} sentence(s) also in train")
    if problems:
        raise ValidationError("; ".join(problems))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args, overrides):
    cfg = load_config(args.config, overrides)
    if args.seed is not None:
        cfg.synth.seed = args.seed
    if args.n_mwes is not None:
        cfg.synth.n_mwes = args.n_mwes
    if args.examples_per_mwe is not None:
        cfg.synth.examples_per_mwe = args.examples_per_mwe
    setting = args.setting or cfg.setting
    splits = synth_splits(cfg, setting)
    validate_splits(splits, setting)
    params = {"seed": cfg.synth.seed, "n_mwes": cfg.synth.n_mwes,
              "examples_per_mwe": cfg.synth.examples_per_mwe, "setting": setting,
              "generator": "idiomadv.data.generate_synthetic_dataset"}
    with _staged_dir(args.out) as (stage, publish):
        D.write_synthetic_dataset(splits, stage, params)
        publish()
    print(f"wrote {', '.join(f'{s.name}={len(s)}' for s in splits)} to {args.out}")
    return EXIT_OK


def cmd_train(args, overrides):
    cfg = load_config(args.config, overrides)
    splits = load_splits(cfg)
    validate_splits(splits, cfg.setting)
    with _staged_dir(args.out) as (stage, publish):
        (stage / _RUN_MARKER).write_text(cfg.dump(), encoding="utf-8")
        log = _log(stage / "run.log")
        try:
            vocab = D.build_vocab(D.training_pool(splits, cfg.setting), cfg.data.max_vocab)
            cfg.model.vocab_size = len(vocab)
            (stage / _RUN_MARKER).write_text(cfg.dump(), encoding="utf-8")
            model = init_model(cfg.model, vocab)
            log(f"training method={cfg.train.method} setting={cfg.setting}")
            try:
                model, history = train_run(model, splits, cfg.train, cfg.adv, vocab, cfg.setting,
                                           log=log)
            except TrainingAborted as exc:
                if exc.history is not None:
                    exc.history.write(stage / "history.jsonl")
                log(f"aborted: {exc}")
                publish()
                raise
            history.write(stage / "history.jsonl")
            save_checkpoint(model, cfg.model, stage / "checkpoint.bin")
            dev = D.get_split(splits, "dev")
            if dev is not None and len(dev):
                report = evaluate_split(model, dev, vocab, cfg.train.eval_batch_size)
                (stage / "dev_metrics.json").write_text(report.to_json(), encoding="utf-8")
                log(f"best epoch {history.best_epoch}: dev macro F1 {report.macro_f1:.4f}")
        finally:
            log.close()
        publish()
    print(f"run written to {args.out}")
    return EXIT_OK


def cmd_eval(args, overrides):
    if overrides:
        raise ConfigError(f"eval takes no overrides: {' '.join(overrides)}")
    try:
        model, config = load_checkpoint(args.checkpoint)
    except FileNotFoundError:
        raise ConfigError(f"checkpoint not found: {args.checkpoint}") from None
    if model.vocab is None:
        raise CheckpointError("checkpoint carries no vocabulary; cannot encode text")
    records, _ = D.read_records(args.data)
    if not records:
        raise DataValueError(f"{args.data}: no records to evaluate")
    split = D.DatasetSplit(Path(args.data).stem, "zero_shot", records)
    report = evaluate_split(model, split, model.vocab, args.batch_size, config.max_len)
    text = report.to_json()
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name(
        f"eval_{Path(args.data).stem}.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args, overrides):
    from .gradcheck import run_suite

    results = run_suite(fault=args.inject_fault)
    width = max(len(r.name) for r in results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name:<{width}}  max_rel_err={r.max_rel_err:.3e}  tol={r.tol:.0e}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed"
          + (f"; failing: {', '.join(failed)}" if failed else ""))
    return EXIT_INVALID if failed else EXIT_OK


def cmd_compare(args, overrides):
    cfg = load_config(args.config, overrides)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    settings = args.settings.split(",") if args.settings else [cfg.setting]
    datasets = {}
    for setting in settings:
        splits = load_splits(cfg, setting)
        validate_splits(splits, setting)
        datasets[setting] = splits
    # fail on bad method names before any training
    from .training import METHODS

    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ConfigError(f"unknown method(s): {', '.join(bad)}")
    table = compare_methods(datasets, methods, seeds, cfg.model, cfg.train, cfg.adv,
                            cfg.data.max_vocab, workers=args.workers)
    with _staged_dir(args.out) as (stage, publish):
        (stage / _RUN_MARKER).write_text(cfg.dump(), encoding="utf-8")
        (stage / "comparison.csv").write_text(table.to_csv(), encoding="utf-8")
        (stage / "comparison.txt").write_text(table.to_text(), encoding="utf-8")
        (stage / "cells.jsonl").write_text(
            "".join(json.dumps(c, sort_keys=True) + "\n" for c in table.cells), encoding="utf-8")
        publish()
    sys.stdout.write(table.to_text())
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="idiomadv", description=__doc__.splitlines()[0],
                                     allow_abbrev=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", allow_abbrev=False, help="write a synthetic dataset")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-mwes", type=int)
    p.add_argument("--examples-per-mwe", type=int)
    p.add_argument("--setting", choices=D.SETTINGS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", allow_abbrev=False, help="fine-tune one model")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", allow_abbrev=False, help="score a checkpoint on a dataset CSV")
    p.add_argument("checkpoint")
    p.add_argument("data")
    p.add_argument("--out")
    p.add_argument("--batch-size", type=int, default=64)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", allow_abbrev=False, help="run the finite-difference gradient suite")
    p.add_argument("--inject-fault", metavar="OP",
                   help="corrupt one primitive's gradient rule (negative control)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("compare", allow_abbrev=False, help="standard vs adversarial fine-tuning over seeds")
    p.add_argument("--config")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--methods", default="standard,smart")
    p.add_argument("--settings", help="comma-separated; defaults to the config's setting")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None):
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    try:
        return args.func(args, rest)
    except (ConfigError, ValidationError, SchemaError, DataValueError, EncodingError,
            CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (TrainingAborted, NumericError) as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
