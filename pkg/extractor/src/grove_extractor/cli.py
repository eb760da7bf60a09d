"""Command line front: grove-extract extract|validate."""
import argparse
import json
import sys

from .encoders import MODEL_NAMES
from .extract import (ExtractJob, MissingImage, ModelLoadFailure, extract,
                      validate)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="grove-extract")
    sub = ap.add_subparsers(dest="command", required=True)

    ex = sub.add_parser("extract", help="encode an image folder + caption table")
    ex.add_argument("--model", choices=MODEL_NAMES, default="clip-vitb32")
    ex.add_argument("--images", required=True, help="image directory")
    ex.add_argument("--captions", required=True,
                    help="TSV: filename<TAB>caption, one caption per line")
    ex.add_argument("--out-prefix", required=True)
    ex.add_argument("--device", default="cpu")
    ex.add_argument("--batch-size", type=int, default=8)
    ex.add_argument("--normalize", action="store_true",
                    help="L2-normalize rows before writing (default: raw)")
    ex.add_argument("--random-init", action="store_true",
                    help="architecture-only seeded weights; no downloads")
    ex.add_argument("--seed", type=int, default=0)

    va = sub.add_parser("validate", help="check files written under a prefix")
    va.add_argument("--prefix", required=True)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "extract":
            job = ExtractJob(model=args.model, image_dir=args.images,
                             caption_file=args.captions,
                             out_prefix=args.out_prefix, device=args.device,
                             batch_size=args.batch_size,
                             normalize=args.normalize,
                             random_init=args.random_init, seed=args.seed)
            summary = extract(job)
        else:
            summary = validate(args.prefix)
    except (MissingImage, ModelLoadFailure, ValueError, OSError) as exc:
        print(f"[grove-extract] error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(summary))
    return 0


if __name__ == "__main__":
    sys.exit(main())
