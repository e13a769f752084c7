"""Command-line entry points: analyze, train, tune, eval."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .analyzer import METRICS, build_index, build_unigram_table, load_index, write_index
from .corpus_io import CORPUS_MAGIC, DENSE, PACK_MODES, PADDED, FormatError, PackedCorpus, load_corpus, save_corpus, tokenize_corpus
from .model import load_checkpoint
from .trainer import RunConfig, TrainingDiverged, evaluate, run_config_from_dict, train
from .tuner import NoFeasibleValue, TARGETS, TuneSpec, binary_search, write_history

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2
EXIT_DIVERGED = 3
EXIT_IO = 4

MANIFEST_VERSION = 1
MANIFEST_KEYS = {"schema_version", "corpus", "val_corpus", "indexes", "output_dir", "run", "tune", "resume_from"}

log = logging.getLogger("dataeff")


class UsageError(ValueError):
    pass


@dataclass
class Manifest:
    corpus: Path
    val_corpus: Path
    output_dir: Path
    run: RunConfig
    indexes: dict[str, Path] = field(default_factory=dict)
    tune: dict | None = None
    resume_from: Path | None = None


def _path(base: Path, value, key: str, must_exist: bool = True) -> Path:
    if not isinstance(value, str) or not value:
        raise UsageError(f"{key} must be a non-empty path string")
    p = Path(value)
    if not p.is_absolute():
        p = base / p
    if must_exist and not p.exists():
        raise UsageError(f"{key}: {p} does not exist")
    return p


def parse_manifest(doc: dict, base_dir: Path) -> Manifest:
    """Validate a manifest document; relative paths resolve against ``base_dir``."""
    if not isinstance(doc, dict):
        raise UsageError("manifest must be a JSON object")
    unknown = set(doc) - MANIFEST_KEYS
    if unknown:
        raise UsageError(f"unknown manifest keys: {sorted(unknown)}")
    if doc.get("schema_version") != MANIFEST_VERSION:
        raise UsageError(f"schema_version must be {MANIFEST_VERSION}")
    for key in ("corpus", "val_corpus", "output_dir", "run"):
        if key not in doc:
            raise UsageError(f"manifest is missing {key!r}")
    try:
        run = run_config_from_dict(doc["run"])
    except (TypeError, ValueError) as e:
        raise UsageError(f"run: {e}") from None
    indexes = doc.get("indexes", {}) or {}
    if not isinstance(indexes, dict):
        raise UsageError("indexes must map metric names to paths")
    for name in indexes:
        if name not in METRICS:
            raise UsageError(f"unknown index metric {name!r}; valid: {', '.join(sorted(METRICS))}")
    tune = doc.get("tune")
    if tune is not None and not isinstance(tune, dict):
        raise UsageError("tune must be an object")
    m = Manifest(
        corpus=_path(base_dir, doc["corpus"], "corpus"),
        val_corpus=_path(base_dir, doc["val_corpus"], "val_corpus"),
        output_dir=_path(base_dir, doc["output_dir"], "output_dir", must_exist=False),
        run=run,
        indexes={k: _path(base_dir, v, f"indexes.{k}") for k, v in indexes.items()},
        tune=tune,
        resume_from=_path(base_dir, doc["resume_from"], "resume_from") if doc.get("resume_from") else None,
    )
    want = run.curriculum.index_metric
    if want is not None and want not in m.indexes:
        raise UsageError(f"curriculum metric {run.curriculum.metric} needs a {want!r} index")
    return m


def read_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise UsageError(f"manifest is not valid JSON: {e}") from None
    return parse_manifest(doc, path.parent)


def _load_inputs(m: Manifest) -> tuple[PackedCorpus, PackedCorpus, dict]:
    corpus = load_corpus(m.corpus, mmap=True)
    val = load_corpus(m.val_corpus, mmap=True)
    if m.run.curriculum.length_mode == "seqres" and corpus.mode == PADDED:
        raise UsageError("seqres cannot be applied to a padded corpus")
    if val.vocab_size != corpus.vocab_size:
        raise UsageError("training and validation corpora use different vocabularies")
    try:
        m.run.validate_against(corpus)
    except ValueError as e:
        raise UsageError(str(e)) from None
    indexes = {k: load_index(p) for k, p in m.indexes.items()}
    for k, idx in indexes.items():
        if len(idx) != len(corpus):
            raise UsageError(f"index {k} covers {len(idx)} samples, corpus has {len(corpus)}")
    return corpus, val, indexes


# -- commands -----------------------------------------------------------------


def _is_packed(path: Path) -> bool:
    with open(path, "rb") as f:
        return f.read(len(CORPUS_MAGIC)) == CORPUS_MAGIC


def cmd_analyze(args) -> int:
    names = [s.strip() for s in args.metrics.split(",") if s.strip()]
    bad = [n for n in names if n not in METRICS]
    if bad or not names:
        raise UsageError(f"unknown metric(s) {bad}; valid metrics: {', '.join(sorted(METRICS))}")
    if args.workers < 1:
        raise UsageError("--workers must be >= 1")
    src = Path(args.corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if _is_packed(src):
        corpus = load_corpus(src)
        train_path = src
    else:
        t0 = time.perf_counter()
        full = tokenize_corpus(src.read_bytes(), pack_length=args.pack_length, mode=args.mode)
        corpus, val = full.split(args.val_fraction) if args.val_fraction > 0 else (full, None)
        train_path = out / "train.dfc"
        save_corpus(corpus, train_path)
        if val is not None:
            save_corpus(val, out / "val.dfc")
        print(f"packed {len(full)} samples of {full.pack_length} tokens "
              f"({len(corpus)} train, {0 if val is None else len(val)} val) "
              f"in {time.perf_counter() - t0:.2f}s -> {train_path}")

    table = build_unigram_table(corpus)
    for name in names:
        t0 = time.perf_counter()
        index = build_index(corpus, name, table, workers=args.workers)
        path = out / f"{name}.dfi"
        write_index(index, path)
        load_index(path).validate()
        sizes = np.asarray(index.sizes)
        print(f"{name}: {len(index)} samples, {index.num_buckets} buckets "
              f"(largest {int(sizes.max())}, median {float(np.median(sizes)):g}), "
              f"range [{float(index.keys[0]):.6g}, {float(index.keys[-1]):.6g}], "
              f"{time.perf_counter() - t0:.2f}s -> {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    m = read_manifest(args.manifest)
    corpus, val, indexes = _load_inputs(m)
    m.output_dir.mkdir(parents=True, exist_ok=True)
    ckpt = m.output_dir / "checkpoint.bin"
    metrics = m.output_dir / "metrics.tsv"
    try:
        result = train(m.run, corpus, val, indexes, log_path=metrics, checkpoint_path=ckpt, resume_from=m.resume_from)
    except TrainingDiverged as e:
        print(f"diverged at step {e.step}: {e}; checkpoint at {e.checkpoint}", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"steps={result.steps} consumed_tokens={result.ledger.consumed_tokens:.0f} "
          f"final_val_ppl={result.final_val_ppl!r}")
    print(f"checkpoint: {ckpt}\nmetrics: {metrics}")
    return EXIT_OK


def cmd_tune(args) -> int:
    m = read_manifest(args.manifest)
    if args.param not in TARGETS:
        raise UsageError(f"unknown tuning target {args.param!r}; valid: {', '.join(TARGETS)}")
    if m.tune is None:
        raise UsageError("manifest has no 'tune' section")
    try:
        spec = TuneSpec(target=args.param, **{k: v for k, v in m.tune.items() if k != "target"})
    except (TypeError, ValueError) as e:
        raise UsageError(f"tune: {e}") from None
    corpus, val, indexes = _load_inputs(m)
    m.output_dir.mkdir(parents=True, exist_ok=True)
    try:
        result = binary_search(spec, m.run, corpus, val, indexes)
    except NoFeasibleValue as e:
        print(str(e), file=sys.stderr)
        return EXIT_FAILED
    hist = m.output_dir / f"tune_{args.param}.tsv"
    write_history(hist, spec, result)
    for p in result.history:
        print(f"probe {args.param}={p.value}: {'pass' if p.passed else 'fail'} best_ppl={p.best_ppl:.4f}")
    print(f"selected {args.param}={result.value} after {result.n_probes} probes; history: {hist}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, model, state, _ = load_checkpoint(args.ckpt)
    corpus = load_corpus(args.corpus, mmap=True)
    if corpus.vocab_size != cfg.vocab_size:
        raise UsageError(f"checkpoint vocab {cfg.vocab_size} != corpus vocab {corpus.vocab_size}")
    if corpus.pack_length > cfg.max_seq_len:
        raise UsageError(f"corpus rows ({corpus.pack_length}) exceed the model context ({cfg.max_seq_len})")
    ppl = evaluate(model, corpus)
    targets = int(np.maximum(np.asarray(corpus.lengths, dtype=np.int64) - 1, 0).sum())
    consumed = state.get("ledger", {}).get("consumed_tokens", 0.0)
    print(f"val_ppl={ppl!r}")
    print(f"samples={len(corpus)} target_tokens={targets} trained_tokens={consumed:.0f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dataeff", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="pack a corpus and build difficulty indexes")
    a.add_argument("--corpus", required=True, help="raw text file or packed corpus")
    a.add_argument("--out", required=True, help="output directory")
    a.add_argument("--metrics", default="voc,seqreo", help=f"comma list from: {', '.join(sorted(METRICS))}")
    a.add_argument("--workers", type=int, default=1)
    a.add_argument("--pack-length", type=int, default=256)
    a.add_argument("--mode", choices=PACK_MODES, default=DENSE)
    a.add_argument("--val-fraction", type=float, default=0.0, help="hold out this trailing fraction as val.dfc")
    a.set_defaults(func=cmd_analyze)

    t = sub.add_parser("train", help="train from a manifest")
    t.add_argument("--manifest", required=True)
    t.set_defaults(func=cmd_train)

    u = sub.add_parser("tune", help="bisection search for one schedule parameter")
    u.add_argument("--manifest", required=True)
    u.add_argument("--param", required=True, help=f"one of: {', '.join(TARGETS)}")
    u.set_defaults(func=cmd_tune)

    e = sub.add_parser("eval", help="validation perplexity of a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--corpus", required=True)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, FormatError) as e:
        # corrupt or incompatible files are input errors, not I/O failures
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
