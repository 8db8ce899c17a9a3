"""Command-line entry point: ``mannflow gen|train|calibrate|sweep|verify``.

Exit status: 0 success, 1 usage error, 2 data error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import Dataset, load_babi, parse_babi, synthesize_planted, train_test_split
from .engine import PipelineConfig
from .errors import MannError
from .experiment import DEFAULT_RHOS, sweep, verify
from .model import Dimensions, ModelWeights
from .thresholding import calibrate
from .trainer import TrainConfig, train, write_curve

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3

log = logging.getLogger("mannflow")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _rho(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 < value <= 1.0:
        raise argparse.ArgumentTypeError(f"rho must lie in (0, 1], got {value}")
    return value


def _pipeline_cfg(args) -> PipelineConfig:
    return PipelineConfig(queue_capacity=args.queue_capacity, hops=args.hops, scheduler=args.scheduler)


def cmd_gen(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data_path = out / "dataset.mnds"
    if args.babi:
        ds = parse_babi(sys.stdin) if args.babi == "-" else load_babi(args.babi)
        ds.save(data_path)
        print(f"parsed {len(ds)} samples ({ds.skipped} skipped), vocabulary {len(ds.vocab)}, "
              f"{ds.vocab.num_answers} answers -> {data_path}")
        return EXIT_OK
    ds, model = synthesize_planted(args.entities, args.locations, args.facts, args.samples, seed=args.seed)
    model_path = out / "model.mann"
    ds.save(data_path)
    model.save(model_path)
    d = model.dims
    print(f"planted task: {len(ds)} samples, V={d.vocab_size} E={d.embed_dim} I={d.output_dim} "
          f"L={d.memory_slots} T={d.hops} -> {data_path}, {model_path}")
    return EXIT_OK


def cmd_train(args) -> int:
    ds = Dataset.load(args.data)
    train_idx, _ = train_test_split(len(ds), args.split_seed)
    dims = Dimensions(
        vocab_size=len(ds.vocab),
        embed_dim=args.embed_dim,
        output_dim=ds.vocab.num_answers,
        memory_slots=args.memory_slots or ds.max_story_length,
        hops=args.hops or 3,
    )
    cfg = TrainConfig(
        learning_rate=args.lr, epochs=args.epochs, hops=dims.hops, seed=args.seed,
        init_scale=args.init_scale, anneal=tuple(args.anneal) if args.anneal else None,
    )
    history = []
    model = train(ds.triples(train_idx), dims, cfg, history)
    model.save(args.out)
    curve = args.curve or str(Path(args.out).with_suffix(".curve.csv"))
    write_curve(history, curve)
    last = history[-1] if history else None
    print(f"trained {cfg.epochs} epochs on {len(train_idx)} samples"
          + (f", final loss {last.loss:.4f}, train accuracy {last.train_accuracy:.3f}" if last else "")
          + f" -> {args.out}, {curve}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    if len(args.rho) != 1:
        raise UsageError("calibrate takes exactly one --rho")
    model = ModelWeights.load(args.model)
    ds = Dataset.load(args.data)
    train_idx, _ = train_test_split(len(ds), args.split_seed)
    table = calibrate(model, ds.triples(train_idx), args.rho[0], ordering=not args.no_ordering)
    table.save(args.out)
    finite = int(np.isfinite(table.theta).sum())
    top = ", ".join(f"{i}:{table.silhouette[i]:.3f}" for i in table.order[:5])
    print(f"rho={table.rho}: {finite}/{table.num_classes} finite thresholds; top silhouette {top} -> {args.out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    model = ModelWeights.load(args.model)
    ds = Dataset.load(args.data)
    result = sweep(model, ds, args.rho or DEFAULT_RHOS, split_seed=args.split_seed,
                   ordering=not args.no_ordering, cfg=_pipeline_cfg(args))
    text = result.to_csv()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        split = {"split_seed": args.split_seed, "train": result.train_indices.tolist(),
                 "test": result.test_indices.tolist()}
        Path(str(args.out) + ".split.json").write_text(json.dumps(split) + "\n", encoding="utf-8")
        print(f"{len(result.rows)} rows -> {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_verify(args) -> int:
    model = ModelWeights.load(args.model)
    ds = Dataset.load(args.data)
    report = verify(model, ds, cfg=_pipeline_cfg(args))
    c = report.counters
    print(f"samples={report.n_samples} accuracy={report.accuracy:.6f}")
    print("counters " + " ".join(f"{k}={v}" for k, v in c.as_dict().items()))
    print(f"embedding column reads={report.by_unit['input'].weight_column_reads} "
          f"word occurrences={report.total_words}")
    if not report.ok:
        i, z_oracle, z_engine = report.mismatch
        print(f"MISMATCH at sample {i}", file=sys.stderr)
        print(f"  oracle logits: {z_oracle.tolist()}", file=sys.stderr)
        print(f"  engine logits: {z_engine.tolist()}", file=sys.stderr)
        return EXIT_VERIFY
    if report.by_unit["input"].weight_column_reads != report.total_words:
        print("embedding column reads do not match word occurrences", file=sys.stderr)
        return EXIT_VERIFY
    print("0 mismatches")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mannflow", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, model=True, data=True):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--split-seed", type=int, default=0, help="seed of the 90/10 train/test split")
        if model:
            p.add_argument("--model", required=True)
        if data:
            p.add_argument("--data", required=True)

    def engine_flags(p):
        p.add_argument("--hops", type=int, default=None)
        p.add_argument("--queue-capacity", type=int, default=4)
        p.add_argument("--scheduler", choices=["threads", "sequential"], default="sequential")

    p = sub.add_parser("gen", help="generate a planted task, or cache a parsed bAbI file")
    common(p, model=False, data=False)
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--entities", type=int, default=5)
    p.add_argument("--locations", type=int, default=6)
    p.add_argument("--facts", type=int, default=4)
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--babi", help="bAbI text file to parse instead ('-' for stdin)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model with SGD")
    common(p, model=False)
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--curve", help="training-curve CSV (default: <out>.curve.csv)")
    p.add_argument("--hops", type=int, default=3)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--embed-dim", type=int, default=20)
    p.add_argument("--memory-slots", type=int, default=None)
    p.add_argument("--init-scale", type=float, default=0.1)
    p.add_argument("--anneal", type=float, nargs=2, metavar=("FACTOR", "EVERY"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", help="build a threshold table from the train split")
    common(p)
    p.add_argument("--rho", type=_rho, action="append", required=True)
    p.add_argument("--out", required=True, help="threshold table JSON to write")
    p.add_argument("--no-ordering", action="store_true", help="keep identity scan order")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("sweep", help="accuracy vs dot products over a rho sweep")
    common(p)
    engine_flags(p)
    p.add_argument("--rho", type=_rho, action="append")
    p.add_argument("--out", help="CSV file (default: stdout)")
    p.add_argument("--no-ordering", action="store_true", help="skip the silhouette-ordered family")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="check the engine against the reference model")
    common(p)
    engine_flags(p)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"mannflow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MannError, OSError) as exc:
        print(f"mannflow: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
