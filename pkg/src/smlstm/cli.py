"""Command-line entry point: gen-synthetic, train, eval, gradcheck.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure (divergence or failed gradient check).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, build_run_config, read_config_file, tomllib
from .data import DataError, Dataset, load_dataset, read_manifest
from .encoders import EmptySentenceError, FormatError, Vocabulary
from .evaluation import (
    GroundTruth,
    average_traces,
    ensemble,
    evaluate,
    export_saliency,
    metrics_report,
    score_all,
)
from .synthetic import SyntheticSpec, generate
from .trainer import (
    DivergenceError,
    GradientCheckError,
    fit,
    gradient_check,
    jsonl_logger,
    model_from_checkpoint,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

SWEEP_ALIASES = {"T": "timesteps", "t": "timesteps", "lambda": "lam", "λ": "lam"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- helpers


def parse_assignment(text: str):
    """``key=value`` with the value read as a TOML scalar (bare words stay strings)."""
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"expected key=value, got {text!r}")
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key.strip(), value


def parse_sweep(text: str):
    """``T=1..5`` (inclusive integer range) or ``lam=0,10,100`` (explicit list)."""
    key, _, raw = text.partition("=")
    key = SWEEP_ALIASES.get(key.strip(), key.strip())
    if not raw:
        raise ConfigError(f"--sweep expects key=values, got {text!r}")
    try:
        if ".." in raw:
            lo, hi = raw.split("..")
            values = list(range(int(lo), int(hi) + 1))
        else:
            values = [parse_assignment(f"v={v}")[1] for v in raw.split(",")]
    except ValueError:
        raise ConfigError(f"cannot parse sweep values {raw!r}") from None
    if not values:
        raise ConfigError(f"empty sweep {text!r}")
    return key, values


def resolve_run(args, cli_values: Dict) -> RunConfig:
    file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
    overrides = dict(cli_values)
    for item in getattr(args, "set", None) or []:
        key, value = parse_assignment(item)
        overrides[key] = value
    return build_run_config(file_values, overrides)


def load_vocab(run: RunConfig, records) -> Vocabulary:
    if run.vocab:
        path = Path(run.vocab)
        if not path.exists():
            raise DataError(f"vocabulary not found: {path}")
        return Vocabulary.load(path)
    near = Path(run.manifest).parent / "vocab.txt"
    if near.exists():
        return Vocabulary.load(near)
    return Vocabulary.build(s for r in records if r.split == "train" for s in r.sentences)


def load_splits(run: RunConfig, vocab: Vocabulary, splits: Sequence[str]) -> Dict[str, Dataset]:
    if not run.manifest:
        raise ConfigError("no manifest given (--manifest or `manifest` in the config file)")
    records = read_manifest(run.manifest)
    cfg = run.training
    expect = {"num_regions": cfg.num_regions, "region_dim": cfg.region_dim,
              "image_context_dim": cfg.image_context_dim}
    out = {s: load_dataset(records, vocab, cfg.max_words, expect, s) for s in splits}
    for ds in out.values():
        for i in range(len(ds)):
            ds.grid(i)  # surface missing or malformed files before compute
    return out


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- commands


def cmd_gen_synthetic(args) -> int:
    fields = {f.name for f in dataclasses.fields(SyntheticSpec)}
    values = {k: v for k, v in vars(args).items() if k in fields and v is not None}
    try:
        spec = SyntheticSpec(**values).validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    meta = generate(spec, args.out)
    print(f"wrote {len(meta['pairs'])} pairs to {args.out}")
    return EXIT_OK


def _train_one(run: RunConfig, splits: Dict[str, Dataset], out: Path, vocab: Vocabulary,
               resume: Optional[Checkpoint]) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    if resume is None and log_path.exists():
        log_path.unlink()
    log = jsonl_logger(log_path)
    try:
        result = fit(splits["train"], run.training, splits["val"] if len(splits["val"]) else None,
                     resume=resume, log_fn=log)
    finally:
        log.close()
    for ckpt in (result.best, result.last):
        ckpt.extra["vocab"] = list(vocab.tokens)
    save_checkpoint(out / "checkpoint.smck", result.best)
    save_checkpoint(out / "last.smck", result.last)
    summary = {"steps": result.last.step, "epochs": result.last.epoch}
    model = model_from_checkpoint(result.best)
    for split in ("val", "test"):
        if len(splits[split]):
            _, _, report = evaluate(model, splits[split])
            summary[split] = report.to_dict()
    write_json(out / "metrics.json", summary)
    return summary


def cmd_train(args) -> int:
    cli = {"manifest": args.manifest, "vocab": args.vocab, "output": args.output, "profile": args.profile,
           "variant": args.variant, "timesteps": args.timesteps, "lam": args.lam, "seed": args.seed,
           "max_steps": args.max_steps, "max_epochs": args.max_epochs}
    run = resolve_run(args, cli)
    out = Path(run.output or "run")
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is not None:
        vocab = Vocabulary(resume.extra.get("vocab", []))
        budget = {k: v for k, v in (("max_epochs", args.max_epochs), ("max_steps", args.max_steps)) if v is not None}
        run.training = model_from_checkpoint(resume).config.replace(**budget)
    else:
        vocab = load_vocab(run, read_manifest(run.manifest) if run.manifest else [])
        run.training = run.training.replace(vocab_size=len(vocab))
    splits = load_splits(run, vocab, ("train", "val", "test"))
    if not len(splits["train"]):
        raise DataError("manifest has no train records")
    if not args.sweep:
        summary = _train_one(run, splits, out, vocab, resume)
        print(json.dumps(summary, sort_keys=True))
        return EXIT_OK
    key, values = parse_sweep(args.sweep)
    table = []
    for value in values:
        sub = dataclasses.replace(run, training=run.training.replace(**{key: value}))
        summary = _train_one(sub, splits, out / f"{key}={value}", vocab, None)
        split = "test" if "test" in summary else "val"
        row = {key: value, "split": split, **({"Sum": summary[split]["Sum"]} if split in summary else {})}
        table.append(row)
        print(json.dumps(row, sort_keys=True), flush=True)
    best = max(table, key=lambda r: r.get("Sum", -np.inf))
    write_json(out / "sweep.json", {"key": key, "runs": table, "best": best[key]})
    return EXIT_OK


def _eval_scores(ckpt: Checkpoint, records, split: str, timesteps: Optional[int]):
    model = model_from_checkpoint(ckpt)
    vocab = Vocabulary(ckpt.extra.get("vocab", []))
    cfg = model.config
    ds = load_dataset(records, vocab, cfg.max_words, None, split)
    if not len(ds):
        raise DataError(f"manifest has no {split} records")
    model.check_compatible(ds.grid(0))
    cand, ctx = ds.all_images()
    ids, mask, owner = ds.all_sentences()
    return model, ds, score_all(model, cand, ctx, ids, mask, timesteps), owner


def dump_saliency(model, ds: Dataset, vocab: Vocabulary, out_dir: Path, limit: int,
                  timesteps: Optional[int]) -> int:
    cfg = model.config
    cand, ctx = ds.all_images()
    count = len(ds) if limit <= 0 else min(limit, len(ds))
    img_traces = []
    for i in range(count):
        tok = ds.tokens[i][0]
        res = model.forward(cand[i:i + 1], ctx[i:i + 1], tok.ids[None], tok.mask[None], timesteps)
        p = np.stack([t.data[0, 0] for t in res.image_trace])
        q = np.stack([t.data[0, 0] for t in res.sentence_trace])
        words = [vocab.token(int(w)) for w in tok.ids[: tok.length]]
        export_saliency(p, q, cfg.grid_rows, cfg.grid_cols, words, out_dir, ds.records[i].id, size=(64, 64))
        img_traces.append(p)
    if img_traces:
        avg = average_traces(img_traces)
        export_saliency(avg, np.zeros((avg.shape[0], 0)), cfg.grid_rows, cfg.grid_cols, [], out_dir,
                        "average", size=(64, 64))
    return count


def cmd_eval(args) -> int:
    if not args.checkpoint and not args.ensemble:
        raise ConfigError("eval needs --checkpoint or --ensemble")
    paths = args.ensemble.split(",") if args.ensemble else [args.checkpoint]
    records = read_manifest(args.manifest)
    timesteps_list = parse_sweep(args.sweep)[1] if args.sweep else [args.timesteps]
    if args.sweep and parse_sweep(args.sweep)[0] != "timesteps":
        raise ConfigError("eval can only sweep T (other settings need retraining)")
    ckpts = [load_checkpoint(p) for p in paths]
    reports = []
    for T in timesteps_list:
        matrices, owner, first = [], None, None
        for ckpt in ckpts:
            model, ds, scores, own = _eval_scores(ckpt, records, args.split, T)
            if owner is not None and not np.array_equal(owner, own):
                raise ConfigError("ensemble members disagree on the sentence layout")
            owner = own
            matrices.append(scores)
            first = first or (model, ds, Vocabulary(ckpt.extra.get("vocab", [])))
        report = metrics_report(ensemble(matrices), GroundTruth.from_owners(owner, len(first[1])))
        entry = {"split": args.split, "checkpoints": paths, **report.to_dict()}
        if T is not None:
            entry["timesteps"] = T
        reports.append(entry)
        print(json.dumps(entry, sort_keys=True))
    if args.dump_saliency:
        model, ds, vocab = first
        n = dump_saliency(model, ds, vocab, Path(args.dump_saliency), args.saliency_limit, args.timesteps)
        print(f"saliency maps for {n} pairs written to {args.dump_saliency}", file=sys.stderr)
    if args.report:
        write_json(Path(args.report), reports if args.sweep else reports[0])
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cli = {"profile": args.profile, "variant": args.variant, "regularizer": args.regularizer}
    run = resolve_run(args, cli)
    try:
        report = gradient_check(run.training, tolerance=args.tolerance, seed=args.seed,
                                corrupt_gate=args.corrupt_gate, raise_on_failure=False)
    except GradientCheckError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_NUMERIC
    print("\n".join(report.lines()))
    return EXIT_OK if report.passed else EXIT_NUMERIC


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="smlstm", description="sm-LSTM image-sentence matching.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    gen = sub.add_parser("gen-synthetic", help="write a synthetic dataset with planted instances")
    gen.add_argument("--out", required=True)
    for f in dataclasses.fields(SyntheticSpec):
        gen.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=type(f.default), default=None)
    gen.set_defaults(func=cmd_gen_synthetic)

    def common(p, profile_default):
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--profile", default=None, help=f"reference | desk | tiny (default {profile_default})")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
        p.add_argument("--variant", choices=("full", "att", "ctx", "mean"))
        p.set_defaults(profile_default=profile_default)

    train = sub.add_parser("train", help="fit a model")
    common(train, "desk")
    train.add_argument("--manifest")
    train.add_argument("--vocab")
    train.add_argument("--output")
    train.add_argument("--timesteps", type=int)
    train.add_argument("--lam", type=float)
    train.add_argument("--seed", type=int)
    train.add_argument("--max-steps", type=int)
    train.add_argument("--max-epochs", type=int)
    train.add_argument("--resume", help="continue from a checkpoint")
    train.add_argument("--sweep", help="train once per value, e.g. T=1..5 or lam=0,100")
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="score a split and report R@K / Med r / Sum")
    ev.add_argument("--checkpoint")
    ev.add_argument("--ensemble", help="comma-separated checkpoints whose score matrices are summed")
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--split", default="test", choices=("train", "val", "test"))
    ev.add_argument("--timesteps", type=int)
    ev.add_argument("--sweep", help="re-unroll the checkpoint at each T, e.g. T=1..5")
    ev.add_argument("--dump-saliency", metavar="DIR")
    ev.add_argument("--saliency-limit", type=int, default=0, help="pairs to export (0 = all)")
    ev.add_argument("--report", help="also write the report JSON here")
    ev.set_defaults(func=cmd_eval)

    gc = sub.add_parser("gradcheck", help="compare analytic and finite-difference gradients")
    common(gc, "tiny")
    gc.add_argument("--regularizer", choices=("signed", "squared"))
    gc.add_argument("--tolerance", type=float, default=1e-4)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--corrupt-gate", choices=("i", "f", "c", "o"),
                    help="debug: break one aggregation gate's backward rule")
    gc.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "profile", None) is None and hasattr(args, "profile_default"):
        args.profile = args.profile_default
    try:
        return args.func(args)
    except (ConfigError, ad.ContractError, ad.DimensionError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError, EmptySentenceError, FileNotFoundError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, ad.DegenerateInputError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
