"""Command-line entry point; flags mirror the ExportJob fields."""

from __future__ import annotations

import argparse
import logging
import sys

from .exporter import ExportError, ExportJob, export


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="teb-export",
        description="export last-layer transformer token matrices to a TEB1 file")
    parser.add_argument("--corpus", required=True, help="line-delimited JSON corpus")
    parser.add_argument("--model", default="random-bert:tiny",
                        help="HF model name/path, or random-bert:<preset|LAYERS-HIDDEN>")
    parser.add_argument("--output", required=True, help="TEB1 output path")
    parser.add_argument("--max-seq-len", type=int, default=230)
    parser.add_argument("--batch-size", type=int, default=8)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--no-deterministic", action="store_true",
                        help="allow multi-threaded non-reproducible inference")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    job = ExportJob(
        corpus_path=args.corpus, model=args.model, output_path=args.output,
        max_seq_len=args.max_seq_len, batch_size=args.batch_size, seed=args.seed,
        deterministic=not args.no_deterministic)
    try:
        count, hidden = export(job)
    except (ExportError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"exported {count} documents (d_model={hidden}) -> {job.output_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
