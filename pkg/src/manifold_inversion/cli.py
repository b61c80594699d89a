"""Command-line entry point: ``manifold-inversion <subcommand> [options]``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 missing
artifact.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from . import experiments as ex
from .errors import (
    ConfigError,
    DatasetFormatError,
    DegenerateDecoderError,
    DegenerateTangentError,
    MissingArtifactError,
    NumericError,
    TrainingDivergedError,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_MISSING = 0, 2, 3, 4

log = logging.getLogger("manifold_inversion")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config; unspecified keys take built-in defaults")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key by dotted path, e.g. inversion.K=20 (repeatable)")
    p.add_argument("--seed", type=int, help="global seed (same as --set seed=N)")
    p.add_argument("--out", type=Path, help=f"output directory (default: ${ex.OUTPUT_ENV} or ./runs)")
    p.add_argument("--jobs", type=int, default=1, help="parallel attack workers")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="manifold-inversion", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate and save the private/auxiliary datasets")
    _common(p)

    p = sub.add_parser("train-target", help="train the vanilla target classifier")
    _common(p)
    p.add_argument("--data", type=Path, help="dataset directory written by gen-data")

    p = sub.add_parser("train-decoder", help="train the autoencoder on auxiliary data")
    _common(p)
    p.add_argument("--data", type=Path)

    p = sub.add_parser("train-aligned", help="fine-tune a target with the alignment objective")
    _common(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--target", type=Path, help="pretrained target checkpoint to fine-tune")
    p.add_argument("--beta", type=float, help="alignment weight (default: config beta)")

    for name, text in (
        ("measure-alignment", "inversion-time alignment of a vanilla target"),
        ("hypothesis", "vanilla vs alignment-aware targets under attack"),
        ("alignmi-eval", "baseline vs PAA vs TAA attacks"),
    ):
        p = sub.add_parser(name, help=text)
        _common(p)
        if name != "hypothesis":
            p.add_argument("--target", type=Path, help="target checkpoint (otherwise trained from scratch)")

    p = sub.add_parser("report", help="print a digest of an experiment output directory")
    p.add_argument("path", type=Path)
    return parser


def _config(args, kind: str | None = None) -> dict:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    doc = ex.load_config(args.config, overrides)
    if kind is not None:
        doc["kind"] = kind
    if getattr(args, "target", None) is not None:
        doc["target_path"] = str(args.target)
    return doc


def _out(args, doc: dict, name: str) -> Path:
    if args.out is not None:
        return args.out
    if doc.get("output_dir"):
        return Path(doc["output_dir"])
    root = Path(os.environ.get(ex.OUTPUT_ENV, "runs"))
    return root / f"{name}-{ex.config_hash(doc)}"


def cmd_gen_data(args) -> int:
    doc = _config(args)
    out = _out(args, doc, "data")
    counts = ex.save_benchmark_data(doc, out)
    print(f"wrote {counts['private']} private and {counts['auxiliary']} auxiliary samples to {out}")
    return EXIT_OK


def cmd_train_target(args) -> int:
    doc = _config(args)
    out = _out(args, doc, "target")
    bench = ex.load_benchmark(doc, args.data)
    pre, model, hist = ex.train_target(doc, bench)
    ex.save_classifier(model, out / "target.json", doc, "target")
    ex.save_classifier(pre, out / "pretrained.json", doc, "pretrained")
    ex.write_epoch_metrics(doc, out / "target_metrics.csv", hist)
    print(f"target test accuracy {hist[-1]['test_acc']:.4f}; saved to {out / 'target.json'}")
    return EXIT_OK


def cmd_train_decoder(args) -> int:
    doc = _config(args)
    out = _out(args, doc, "decoder")
    bench = ex.load_benchmark(doc, args.data)
    ex.ensure_decoder(doc, bench)
    out.mkdir(parents=True, exist_ok=True)
    bench.decoder.net.save(out / "decoder.json")
    bench.encoder.save(out / "encoder.json")
    ex.Reporter(out, doc).json("decoder_metrics.json", bench.decoder_metrics)
    print(json.dumps(bench.decoder_metrics, sort_keys=True))
    return EXIT_OK


def cmd_train_aligned(args) -> int:
    doc = _config(args)
    out = _out(args, doc, "aligned")
    bench = ex.load_benchmark(doc, args.data)
    if args.target is not None:
        pre = ex.load_classifier(args.target, bench.train.ambient_dim)
    elif doc["train_from_scratch"]:
        pre = ex.pretrain_target(doc, bench)
    else:
        raise MissingArtifactError("no --target given and train_from_scratch is off")
    beta = doc["beta"] if args.beta is None else args.beta
    model, hist = ex.finetune_aligned(doc, bench, pre, beta, checkpoint_dir=out / "checkpoints")
    ex.save_classifier(model, out / "aligned.json", doc, "aligned")
    ex.write_epoch_metrics(doc, out / "aligned_metrics.csv", hist)
    print(f"beta={beta:g}: test accuracy {hist[-1]['test_acc']:.4f}, AS_tr {hist[-1]['as_tr']:.4f}")
    return EXIT_OK


def _experiment(kind: str):
    def run(args) -> int:
        doc = _config(args, kind)
        out = args.out if args.out is not None else ex.output_dir(doc)
        ex.run_experiment(doc, out, jobs=args.jobs)
        print(ex.summary_text(out), end="")
        return EXIT_OK

    return run


def cmd_report(args) -> int:
    print(ex.summary_text(args.path), end="")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-target": cmd_train_target,
    "train-decoder": cmd_train_decoder,
    "train-aligned": cmd_train_aligned,
    "measure-alignment": _experiment("measure-alignment"),
    "hypothesis": _experiment("hypothesis"),
    "alignmi-eval": _experiment("alignmi-eval"),
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, TrainingDivergedError, DegenerateTangentError, DegenerateDecoderError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (MissingArtifactError, DatasetFormatError) as exc:
        print(f"missing or unreadable artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
