"""Command-line front end: `mdbridge extract` and `mdbridge models`."""

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .errors import BridgeError, CorpusLayoutError, ModelTagError
from .extract import ExtractionJob, extract, report_as_dict
from .models import MODEL_TAGS

EXIT_CONFIG = 2
EXIT_DATA = 3


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="mdbridge",
        description="dump upstream speech features and aligner spans "
        "as MPKF + manifest datasets",
    )
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("models", help="list known model tags")

    p = sub.add_parser("extract", help="extract one corpus with one model")
    p.add_argument("--corpus", required=True, help="corpus root directory")
    p.add_argument("--model-tag", required=True, choices=sorted(MODEL_TAGS))
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--backend", default="auto", choices=("auto", "mock", "torch"))
    p.add_argument("--name", default="", help="dataset name (default: corpus dirname)")
    p.add_argument("--report", help="also write the extraction report as JSON")
    return ap


def cmd_models(args: argparse.Namespace) -> int:
    for tag in MODEL_TAGS.values():
        print(
            f"{tag.name:20s} L={tag.n_layers:<3d} d={tag.dim:<5d} "
            f"rate={tag.frame_rate:g}Hz  {tag.hf_id}"
        )
    return 0


def cmd_extract(args: argparse.Namespace) -> int:
    job = ExtractionJob(
        corpus_root=Path(args.corpus),
        model_tag=args.model_tag,
        out_dir=Path(args.out),
        backend=args.backend,
        name=args.name,
    )
    report = extract(job)
    for utt, reason in report.failures:
        print(f"skipped {utt}: {reason}", file=sys.stderr)
    if args.report:
        Path(args.report).write_text(
            json.dumps(report_as_dict(report), indent=2) + "\n", encoding="utf-8"
        )
    print(
        f"extracted {report.n_utterances} utterances "
        f"({report.n_speakers} speakers, {report.n_spans} spans, "
        f"{report.n_skipped} skipped) with {report.model_tag}/{report.backend} "
        f"-> {Path(args.out) / 'manifest.json'}"
    )
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.verb == "models":
            return cmd_models(args)
        return cmd_extract(args)
    except ModelTagError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (BridgeError, CorpusLayoutError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
