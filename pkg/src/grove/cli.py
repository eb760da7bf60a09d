"""Command-line operator surface.

Subcommands: train, embed, retrieve, calibrate, select.  Every command
prints exactly one JSON object to stdout; all human-readable logging goes
to stderr.  Exit codes: 0 success, 1 usage/config error, 2 data/format
error, 3 numerical failure.

Inference-heavy commands accept --restarts/--steps/--seed so operators can
trade fidelity for speed; per-row seeds are derived deterministically, so
results do not depend on batching or worker count (GROVE_THREADS caps the
worker pool).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys

import numpy as np

from . import dataio, metrics
from .errors import (GroveError, NonFiniteLoss, NonFiniteValue,
                     NotPositiveDefinite)
from .gplvm import PairedEmbeddings, TrainConfig, train, trace_to_csv
from .inference import LatentFitConfig, batch_embed
from .metrics import (DiagGaussian, calibration_report, first_correct_ranks,
                      select_uncertain)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):    # argparse defaults to exit code 2
        raise _UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _log(message: str) -> None:
    print(f"[grove] {message}", file=sys.stderr)


def _clean(value):
    """NaN is not valid JSON; report it as null."""
    if isinstance(value, float) and math.isnan(value):
        return None
    return value


def _fit_config(args) -> LatentFitConfig:
    return LatentFitConfig(restarts=args.restarts, steps=args.steps,
                           lr=args.lr, seed=args.seed).validate()


def _add_fit_flags(sub) -> None:
    sub.add_argument("--restarts", type=int, default=4)
    sub.add_argument("--steps", type=int, default=200)
    sub.add_argument("--lr", type=float, default=1e-2)
    sub.add_argument("--seed", type=int, default=0)


def build_parser() -> _Parser:
    parser = _Parser(prog="grove")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("train", help="fit a model on paired embeddings")
    p.add_argument("--images", required=True)
    p.add_argument("--texts", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--seed", type=int, default=None)

    p = commands.add_parser("embed", help="probabilistic embeddings for new inputs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--modality", required=True, choices=("image", "text"))
    p.add_argument("--out", required=True)
    _add_fit_flags(p)

    p = commands.add_parser("retrieve", help="cross-modal retrieval evaluation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--direction", required=True, choices=("i2t", "t2i"))
    p.add_argument("--manifest", required=True)
    p.add_argument("--distance", default="w2", choices=metrics.DISTANCES)
    p.add_argument("--out", required=True, help="JSON report path")
    _add_fit_flags(p)

    p = commands.add_parser("calibrate", help="uncertainty-vs-recall calibration")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--direction", required=True, choices=("i2t", "t2i"))
    p.add_argument("--manifest", required=True)
    p.add_argument("--distance", default="w2", choices=metrics.DISTANCES)
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--out", required=True, help="CSV report path")
    _add_fit_flags(p)

    p = commands.add_parser("select", help="pick the most uncertain pool rows")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pool", required=True)
    p.add_argument("--modality", required=True, choices=("image", "text"))
    p.add_argument("--k", type=int, default=500)
    p.add_argument("--out", required=True, help="CSV path")
    _add_fit_flags(p)

    return parser


# ------------------------------------------------------------------- commands

def cmd_train(args) -> dict:
    with open(args.config, "r", encoding="utf-8") as fh:
        config = TrainConfig.from_text(fh.read())
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    ds = dataio.read_manifest(args.manifest, args.images, args.texts)
    rows = ds.split_indices("train")
    if not rows:
        raise GroveError("manifest has no train records")
    image = ds.image[[ds.records[i].image_row for i in rows]]
    text = ds.text[[ds.records[i].text_row for i in rows]]
    _log(f"training on {len(rows)} pairs "
         f"(D_image={image.shape[1]}, D_text={text.shape[1]})")
    model, trace = train(PairedEmbeddings(image, text), config)
    for row in trace:
        _log(f"epoch {row.epoch}: loss_total={row.loss_total:.6g} "
             f"loss_emb={row.loss_emb:.6g} loss_kl={row.loss_kl:.6g}")
    dataio.save_checkpoint(model, args.out)
    trace_path = args.out + ".trace.csv"
    with open(trace_path, "w", encoding="utf-8") as fh:
        fh.write(trace_to_csv(trace))
    final = trace[-1] if trace else None
    return {
        "checkpoint": args.out,
        "trace": trace_path,
        "epochs": len(trace),
        "n_pairs": len(rows),
        "final_loss": None if final is None else {
            "loss_total": _clean(final.loss_total),
            "loss_emb": _clean(final.loss_emb),
            "loss_kl": _clean(final.loss_kl),
        },
    }


def cmd_embed(args) -> dict:
    model = dataio.load_checkpoint(args.ckpt)
    z, _meta = dataio.read_embeddings(args.input)
    embeddings = batch_embed(model, z, args.modality, _fit_config(args))
    means = np.stack([e.mean for e in embeddings])
    variances = np.stack([e.variance for e in embeddings])
    dataio.write_embeddings(means, args.out)
    var_path = args.out + ".var"
    dataio.write_embeddings(variances, var_path)
    unc_path = args.out + ".unc.csv"
    with open(unc_path, "w", encoding="utf-8") as fh:
        fh.write("row,uncertainty\n")
        for i, e in enumerate(embeddings):
            fh.write(f"{i},{e.uncertainty!r}\n")
    _log(f"embedded {len(embeddings)} {args.modality} rows")
    return {
        "means": args.out,
        "variances": var_path,
        "uncertainties": unc_path,
        "n": int(means.shape[0]),
        "d": int(means.shape[1]),
        "modality": args.modality,
    }


def _retrieval_setup(args):
    """Shared embed-and-rank stage for retrieve/calibrate.

    For i2t each distinct manifest image row queries a gallery of all text
    file rows; t2i is the mirror image.  Ground truth comes from the
    manifest's pairing records.
    """
    model = dataio.load_checkpoint(args.ckpt)
    if args.direction == "i2t":
        ds = dataio.read_manifest(args.manifest, args.queries, args.gallery)
        truth_map: dict = {}
        for rec in ds.records:
            truth_map.setdefault(rec.image_row, set()).add(rec.text_row)
        query_matrix, gallery_matrix = ds.image, ds.text
        q_modality, g_modality = "image", "text"
    else:
        ds = dataio.read_manifest(args.manifest, args.gallery, args.queries)
        truth_map = {}
        for rec in ds.records:
            truth_map.setdefault(rec.text_row, set()).add(rec.image_row)
        query_matrix, gallery_matrix = ds.text, ds.image
        q_modality, g_modality = "text", "image"
    query_rows = sorted(truth_map)
    truth = [truth_map[r] for r in query_rows]
    cfg = _fit_config(args)
    _log(f"embedding {len(query_rows)} queries and "
         f"{gallery_matrix.shape[0]} gallery rows ({args.direction})")
    q_emb = batch_embed(model, query_matrix[query_rows], q_modality, cfg)
    g_emb = batch_embed(model, gallery_matrix, g_modality, cfg)
    queries = [DiagGaussian(e.mean, e.variance) for e in q_emb]
    gallery = [DiagGaussian(e.mean, e.variance) for e in g_emb]
    ranks = first_correct_ranks(queries, gallery, truth, args.distance)
    return query_rows, q_emb, ranks


def cmd_retrieve(args) -> dict:
    query_rows, _q_emb, ranks = _retrieval_setup(args)
    report = {
        "direction": args.direction,
        "distance": args.distance,
        "n_queries": len(query_rows),
        "recall_at_1": float((ranks == 1).mean()) if len(ranks) else 0.0,
        "query_rows": [int(r) for r in query_rows],
        "first_correct_rank": [int(r) for r in ranks],
    }
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(report) + "\n")
    return report


def cmd_calibrate(args) -> dict:
    query_rows, q_emb, ranks = _retrieval_setup(args)
    uncertainties = [e.uncertainty for e in q_emb]
    hits = (ranks == 1).astype(np.float64)
    report = calibration_report(uncertainties, hits, args.bins)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(report.to_csv())
    return {
        "direction": args.direction,
        "distance": args.distance,
        "n_queries": len(query_rows),
        "bins": [{"mean_uncertainty": u, "recall_at_1": r, "count": c}
                 for u, r, c in report.bins],
        "spearman": report.spearman,
        "r_squared": report.r_squared,
        "neg_sr2": report.neg_sr2,
        "csv": args.out,
    }


def cmd_select(args) -> dict:
    if args.k < 1:
        raise _UsageError("--k must be >= 1")
    model = dataio.load_checkpoint(args.ckpt)
    pool, _meta = dataio.read_embeddings(args.pool)
    embeddings = batch_embed(model, pool, args.modality, _fit_config(args))
    uncertainties = [e.uncertainty for e in embeddings]
    chosen = select_uncertain(uncertainties, args.k)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("row,uncertainty\n")
        for i in chosen:
            fh.write(f"{i},{uncertainties[i]!r}\n")
    _log(f"selected {len(chosen)} of {len(uncertainties)} pool rows")
    return {"selected": chosen, "k": args.k, "out": args.out,
            "pool_size": len(uncertainties)}


_COMMANDS = {
    "train": cmd_train,
    "embed": cmd_embed,
    "retrieve": cmd_retrieve,
    "calibrate": cmd_calibrate,
    "select": cmd_select,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        summary = _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"[grove] invalid configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteLoss, NonFiniteValue, NotPositiveDefinite) as exc:
        print(f"[grove] numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except GroveError as exc:
        print(f"[grove] data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"[grove] io error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(json.dumps(summary))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
