"""Command-line entry point tying the stages into reproducible runs.

Every command resolves one configuration (defaults < config file < --set
overrides), echoes it as resolved.json into its output directory, and writes
a JSON-lines metrics log there. Exit status 0 on success, 1 on failure (one
diagnostic line on stderr), 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from .config import parse_config, resolve_out_dir, write_resolved
from .errors import ConfigError

GRADCHECK_TOL = 1e-4


def _common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="dot-path config override, e.g. --set pretrain.mask_ratio=0.3",
    )
    p.add_argument("--out", default=None, help="output directory (default: $PERSONVIT_OUT or ./runs/<cmd>)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pvit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render the synthetic dataset + manifest")
    _common_flags(p)

    p = sub.add_parser("pretrain", help="self-distillation + masked-patch pre-training")
    _common_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")

    p = sub.add_parser("finetune", help="supervised ReID fine-tuning")
    _common_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--backbone", default=None, help="pre-training checkpoint (omit for random init)")

    p = sub.add_parser("eval", help="query/gallery retrieval evaluation")
    _common_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--save-embeddings", action="store_true")

    p = sub.add_parser("knn-probe", help="cosine kNN identity probe of cls embeddings")
    _common_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--k", type=int, default=None)

    p = sub.add_parser("viz-attn", help="export cls self-attention heatmap PGMs")
    _common_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)

    p = sub.add_parser("viz-clusters", help="k-means layout of patch features (CSV)")
    _common_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", nargs="+", required=True)

    p = sub.add_parser("viz-corr", help="mutual-NN patch correspondence between two images (CSV)")
    _common_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image-a", required=True)
    p.add_argument("--image-b", required=True)

    p = sub.add_parser("gradcheck", help="verify tape gradients against central differences")
    _common_flags(p)
    return parser


def _log_line(out_dir: Path, payload: dict) -> None:
    with open(out_dir / "metrics.jsonl", "a", encoding="utf-8") as f:
        f.write(json.dumps(payload) + "\n")


def _run(args) -> int:
    run = parse_config(args.config, args.overrides)
    out_dir = resolve_out_dir(run, args.out, args.command)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_resolved(run, out_dir)

    if args.command == "gen-data":
        from .synth import generate_synth_dataset

        entries = generate_synth_dataset(run.synth, out_dir)
        _log_line(out_dir, {"command": "gen-data", "images": len(entries)})
        print(f"wrote {len(entries)} images + manifest to {out_dir}")
        return 0

    if args.command == "pretrain":
        from .pretrain import run_pretrain

        ckpt = run_pretrain(
            run.pretrain,
            args.manifest,
            out_dir,
            seed=run.seed,
            workers=run.workers,
            resume_from=args.resume,
        )
        print(f"final checkpoint: {ckpt}")
        return 0

    if args.command == "finetune":
        from .finetune import run_finetune

        backbone = None if args.backbone in (None, "", "none") else args.backbone
        ckpt = run_finetune(run.finetune, args.manifest, out_dir, backbone_ckpt=backbone, seed=run.seed)
        print(f"fine-tuned checkpoint: {ckpt}")
        return 0

    if args.command == "eval":
        from .evalreid import evaluate_reid, extract_embeddings, save_embeddings

        _require_file(args.checkpoint)
        query = extract_embeddings(args.checkpoint, args.manifest, "query", run.eval.mode, run.eval.batch_size)
        gallery = extract_embeddings(args.checkpoint, args.manifest, "gallery", run.eval.mode, run.eval.batch_size)
        if args.save_embeddings:
            save_embeddings(out_dir / "query_embeddings.pvit", query)
            save_embeddings(out_dir / "gallery_embeddings.pvit", gallery)
        result = evaluate_reid(query, gallery)
        report = result.report()
        (out_dir / "report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
        _log_line(out_dir, {"command": "eval", **report})
        print(json.dumps(report))
        return 0

    if args.command == "knn-probe":
        from .evalreid import knn_probe

        _require_file(args.checkpoint)
        k = args.k if args.k is not None else run.eval.knn_k
        rep = knn_probe(
            args.checkpoint,
            args.manifest,
            k,
            db_split=run.eval.knn_db_split,
            test_split=run.eval.knn_test_split,
        )
        report = rep.report()
        (out_dir / "report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
        _log_line(out_dir, {"command": "knn-probe", **report})
        print(json.dumps(report))
        return 0

    if args.command == "viz-attn":
        from .viz import export_attention_pgm

        _require_file(args.checkpoint)
        files = export_attention_pgm(
            args.checkpoint,
            args.image,
            out_dir / "attention.pgm",
            layer=run.viz.layer,
            head_reduce=run.viz.head_reduce,
        )
        _log_line(out_dir, {"command": "viz-attn", "files": [str(f) for f in files]})
        print("\n".join(str(f) for f in files))
        return 0

    if args.command == "viz-clusters":
        from .viz import cluster_patch_tokens

        _require_file(args.checkpoint)
        assign = cluster_patch_tokens(
            args.checkpoint,
            args.images,
            k=run.viz.clusters,
            seed=run.seed,
            out_csv=out_dir / "clusters.csv",
            use_head=run.viz.use_head,
        )
        _log_line(out_dir, {"command": "viz-clusters", "inertia": assign.inertia, "k": run.viz.clusters})
        print(f"clusters.csv written, inertia {assign.inertia:.6g}")
        return 0

    if args.command == "viz-corr":
        from .viz import correspondence_pairs

        _require_file(args.checkpoint)
        pairs = correspondence_pairs(
            args.checkpoint,
            args.image_a,
            args.image_b,
            top_n=run.viz.top_n,
            out_csv=out_dir / "correspondence.csv",
            use_head=run.viz.use_head,
        )
        _log_line(out_dir, {"command": "viz-corr", "pairs": len(pairs)})
        print(f"correspondence.csv written, {len(pairs)} mutual pairs")
        return 0

    if args.command == "gradcheck":
        from .diagnostics import run_gradient_suite

        t0 = time.perf_counter()
        result = run_gradient_suite()
        elapsed = time.perf_counter() - t0
        print(result.summary())
        print(f"elapsed: {elapsed:.1f}s")
        _log_line(out_dir, {"command": "gradcheck", "max_rel_err": result.max_rel_err, "seconds": elapsed})
        return 0 if result.max_rel_err < GRADCHECK_TOL else 1

    raise ConfigError(f"unknown subcommand {args.command!r}")


def _require_file(path) -> None:
    if not Path(path).is_file():
        raise FileNotFoundError(f"no such file: {path}")


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    try:
        return _run(args)
    except Exception as e:  # one-line diagnostic, non-zero exit
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
