"""Command-line entry point for the embedding bridge.

Exactly one input kind per run: an image folder (per-class subfolders) or a
prompt-bank JSON export. Output is always a PEMB v1 file whose header dim
matches the encoder's embedding width.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .encoders import EncoderError, make_encoder
from .extract import ExtractionError, ExtractionJob, extract_images, extract_prompts
from .pemb import PembWriteError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pemb-bridge",
        description="Run a frozen encoder over images or prompts and write PEMB v1 files.",
    )
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--images", type=Path, help="folder with one subfolder per class")
    source.add_argument("--prompts", type=Path, help="prompt bank JSON export")
    parser.add_argument(
        "--encoder", default="hash:512",
        help="encoder spec: hash:<dim>[:<grid>] or clip:<model-id> (default hash:512)",
    )
    parser.add_argument("--out", type=Path, required=True, help="output PEMB path")
    patches = parser.add_mutually_exclusive_group()
    patches.add_argument("--patches", dest="patches", action="store_true", default=True,
                         help="emit per-patch token embeddings (default)")
    patches.add_argument("--no-patches", dest="patches", action="store_false",
                         help="emit only the global embedding per image")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        encoder = make_encoder(args.encoder)
        if args.images is not None:
            job = ExtractionJob(source=args.images, encoder=encoder,
                                out_path=args.out, patches=args.patches)
            stats = extract_images(job)
        else:
            job = ExtractionJob(source=args.prompts, encoder=encoder,
                                out_path=args.out, patches=args.patches)
            stats = extract_prompts(job)
    except (EncoderError, ExtractionError, PembWriteError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2
    print(
        f"wrote {stats['records']} records (dim {stats['dim']}) to {args.out}",
        file=sys.stderr,
    )
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
