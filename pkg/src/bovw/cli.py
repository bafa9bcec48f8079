"""Command-line pipeline driver.

Stages (scan, extract, codebook, encode, train, query) operate on a
persistent workspace; evaluate/sweep run the repeated-split protocol and
write report artifacts. Every command is idempotent for identical inputs
and seeds, and accepts --seed wherever randomness exists.
"""

from __future__ import annotations

import argparse
import html
import logging
import os
import sys
from pathlib import Path

from .config import PipelineConfig
from .errors import BovwError
from .synth import make_texture_dataset

WORKSPACE_ENV = "BOVW_WORKSPACE"


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--workspace", "-w", default=os.environ.get(WORKSPACE_ENV),
                        help=f"workspace directory (or ${WORKSPACE_ENV})")
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--seed", type=int, help="base random seed")
    parser.add_argument("--threads", type=int, help="worker process cap")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bovw",
        description="Bag-of-visual-words image retrieval with SIFT+FREAK late fusion")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scan", help="index a dataset directory into the workspace")
    p.add_argument("dataset_root")
    _add_common(p)

    p = sub.add_parser("extract", help="extract keypoints and both descriptor channels")
    p.add_argument("--channel", choices=("sift", "freak", "both"), default="both")
    _add_common(p)

    p = sub.add_parser("codebook", help="train per-channel visual vocabularies")
    p.add_argument("--z", type=int, default=200, help="codebook size")
    p.add_argument("--fraction", type=float, default=0.5,
                   help="fraction of features sampled per image")
    _add_common(p)

    p = sub.add_parser("encode", help="encode all images into fused vectors")
    _add_common(p)

    p = sub.add_parser("train", help="train the one-vs-rest classifier")
    p.add_argument("--c-reg", type=float, default=None, help="SVM cost parameter")
    _add_common(p)

    p = sub.add_parser("query", help="rank the corpus against a query image")
    p.add_argument("image")
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--html", help="also write an HTML gallery to this path")
    _add_common(p)

    p = sub.add_parser("evaluate", help="run the protocol for a single sweep cell")
    p.add_argument("--z", type=int, help="codebook size (default: config's first)")
    p.add_argument("--fraction", type=float, help="feature fraction (default: config's first)")
    p.add_argument("--runs", type=int, help="number of repeated runs")
    _add_common(p)

    p = sub.add_parser("sweep", help="run the full codebook-size x fraction grid")
    _add_common(p)

    p = sub.add_parser("make-dataset", help="write the bundled synthetic texture dataset")
    p.add_argument("out_dir")
    p.add_argument("--per-class", type=int, default=30)
    p.add_argument("--size", type=int, default=128)
    _add_common(p)

    p = sub.add_parser("init-config", help="write the default config file")
    p.add_argument("out_file")
    _add_common(p)
    return parser


def _load_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = PipelineConfig.from_file(args.config) if args.config else PipelineConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "threads", None) is not None:
        cfg.threads = args.threads
    return cfg


def _require_workspace(args: argparse.Namespace):
    from .workspace import Workspace
    if not args.workspace:
        raise BovwError(f"no workspace given (use --workspace or ${WORKSPACE_ENV})")
    return Workspace(Path(args.workspace))


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except BovwError as exc:
        sys.stderr.write(f"{exc.category}: {exc}\n")
        return 1
    except Exception as exc:  # keep the one-line stderr contract
        sys.stderr.write(f"internal: {exc}\n")
        return 2


def _dispatch(args: argparse.Namespace) -> int:
    from . import workspace as wsmod

    if args.command == "make-dataset":
        make_texture_dataset(args.out_dir, per_class=args.per_class, size=args.size,
                             seed=args.seed or 0)
        print(args.out_dir)
        return 0

    if args.command == "init-config":
        PipelineConfig().to_file(args.out_file)
        print(args.out_file)
        return 0

    cfg = _load_config(args)
    ws = _require_workspace(args)

    if args.command == "scan":
        manifest = wsmod.stage_scan(ws, args.dataset_root)
        cfg.to_file(ws.config_path)
        print(f"{len(manifest.classes)} classes, {len(manifest.entries)} images")
        return 0

    if args.command == "extract":
        count = wsmod.stage_extract(ws, cfg, args.channel, cfg.threads)
        print(f"{count} descriptors")
        return 0

    if args.command == "codebook":
        wsmod.stage_codebook(ws, cfg, args.z, args.fraction, cfg.seed)
        print(f"codebooks at Z={args.z}")
        return 0

    if args.command == "encode":
        wsmod.stage_encode(ws, cfg)
        print("encoded corpus written")
        return 0

    if args.command == "train":
        c_reg = args.c_reg if args.c_reg is not None else cfg.svm_c_reg
        wsmod.stage_train(ws, cfg, c_reg, cfg.seed)
        print("model written")
        return 0

    if args.command == "query":
        ranked, manifest = wsmod.stage_query(ws, cfg, args.image, args.k)
        for rank, (idx, cls, closeness) in enumerate(
                zip(ranked.ids, ranked.classes, ranked.closeness), 1):
            rel, _ = manifest.entries[idx]
            print(f"{rank}\t{rel}\t{manifest.classes[cls]}\t{closeness:.6g}")
        if args.html:
            _write_query_gallery(args.html, args.image, ranked, manifest)
        return 0

    if args.command in ("evaluate", "sweep"):
        return _run_protocol(args, cfg, ws)

    raise BovwError(f"unknown command {args.command!r}")


def _run_protocol(args: argparse.Namespace, cfg: PipelineConfig, ws) -> int:
    from .evaluation import DescriptorProvider, EvalConfig, emit_reports, run_experiment

    manifest = ws.load_manifest()
    econf = EvalConfig.from_pipeline(cfg)
    if args.command == "evaluate":
        if getattr(args, "z", None):
            econf.codebook_sizes = [args.z]
        else:
            econf.codebook_sizes = econf.codebook_sizes[:1]
        if getattr(args, "fraction", None):
            econf.feature_fractions = [args.fraction]
        else:
            econf.feature_fractions = econf.feature_fractions[:1]
        if getattr(args, "runs", None):
            econf.runs = args.runs
    ws.ensure_dirs()
    provider = DescriptorProvider(manifest, cfg, disk_dir=ws.descriptors_dir)
    report = run_experiment(manifest, econf, cfg, provider,
                            checkpoint_dir=ws.reports_dir / "checkpoints",
                            threads=cfg.threads)
    written = emit_reports(report, ws.reports_dir, manifest)
    for path in written:
        print(path)
    return 0


def _write_query_gallery(out_path: str, query_image: str, ranked, manifest) -> None:
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)

    def rel(target: Path) -> str:
        return html.escape(os.path.relpath(target, out.parent))

    parts = [
        "<!DOCTYPE html>",
        "<html><head><meta charset='utf-8'><title>query results</title>",
        "<style>img{height:120px;margin:4px;border:4px solid #999}"
        "figure{display:inline-block;text-align:center;font-family:sans-serif;"
        "font-size:12px;margin:4px}</style></head><body>",
        f"<h1>Query: {html.escape(str(query_image))}</h1>",
        f"<figure><img src='{rel(Path(query_image).resolve())}'>"
        "<figcaption>query</figcaption></figure>",
        "<h2>Top results</h2>",
    ]
    for rank, (idx, cls, closeness) in enumerate(
            zip(ranked.ids, ranked.classes, ranked.closeness), 1):
        target = manifest.entry_path(idx)
        caption = f"#{rank} {html.escape(manifest.classes[cls])} (closeness {closeness:.4g})"
        parts.append(f"<figure><img src='{rel(target)}'>"
                     f"<figcaption>{caption}</figcaption></figure>")
    parts.append("</body></html>")
    out.write_text("\n".join(parts) + "\n", encoding="utf-8")


if __name__ == "__main__":
    sys.exit(main())
