"""Command-line entry point for the extract tool."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .extract import ExtractError, ExtractionJob, run

EXIT_OK = 0
EXIT_ERROR = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="extract",
        description="Embed collection sentences, or the 18 genre label "
                    "strings, into the udgenre binary embedding format.")
    parser.add_argument("--manifest",
                        help="collection manifest JSON (required unless --labels)")
    parser.add_argument("--out-data", required=True)
    parser.add_argument("--out-index", required=True)
    parser.add_argument("--labels", action="store_true",
                        help="embed the 18 genre label strings instead of sentences")
    parser.add_argument("--encoder", default="bert-base-multilingual-cased")
    parser.add_argument("--batch-size", type=int, default=32)
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--log", help="provenance log path (default: <out-data>.log)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    if not args.labels and not args.manifest:
        print("error: --manifest is required unless --labels is given",
              file=sys.stderr)
        return EXIT_ERROR
    job = ExtractionJob(out_data=Path(args.out_data),
                        out_index=Path(args.out_index),
                        manifest=Path(args.manifest) if args.manifest else None,
                        encoder=args.encoder,
                        batch_size=args.batch_size,
                        device=args.device,
                        labels=args.labels,
                        log_path=Path(args.log) if args.log else None)
    try:
        summary = run(job)
    except ExtractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    print(f"wrote {summary['rows']} rows of dim {summary['dim']} "
          f"to {args.out_data} ({summary['truncated']} truncated)")
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
