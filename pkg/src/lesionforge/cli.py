"""Command-line front end for the staged lesion pipeline.

Every verb operates on a manifest CSV plus an optional JSON/TOML config and
shares the content-hashed artifact cache, so running the verbs one at a
time and running the whole pipeline end to end produce identical artifacts.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import cp, masks, pipeline


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--manifest", required=True, help="id,path,label[,mask] CSV")
    p.add_argument("--config", help="JSON or TOML run config")
    p.add_argument("--run-dir", default="run", help="output directory")
    p.add_argument("--cache", help="artifact cache directory (overrides config)")
    p.add_argument("--test-mode", action="store_true",
                   help="shrink images/network/iterations for smoke runs")
    p.add_argument("--content-global", action="store_true",
                   help="build one content image from every lesion instead of "
                        "per training fold (leaks fold information; prints a warning)")


def _load_setup(args) -> tuple[list, pipeline.RunConfig, pipeline.ArtifactCache, Path]:
    config = pipeline.load_config(args.config) if args.config else pipeline.RunConfig()
    overrides = {}
    if args.cache:
        overrides["cache_dir"] = args.cache
    if args.test_mode:
        overrides["test_mode"] = True
    if args.content_global:
        overrides["content_global"] = True
        print("warning: --content-global shares the content image across CV folds",
              file=sys.stderr)
    if overrides:
        config = dataclasses.replace(config, **overrides)
    config = config.shrunk()
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cache = pipeline.ArtifactCache(pipeline.resolve_cache_dir(config, run_dir))
    entries = pipeline.read_manifest(args.manifest)
    return entries, config, cache, run_dir


def _upstream(entries, config, cache, *, need_transfer=False):
    net, net_digest = pipeline.build_net(config)
    pre = pipeline.stage_preprocess(entries, config, cache)
    seg = pipeline.stage_segment(entries, config, cache, pre)
    if not need_transfer:
        return net, net_digest, pre, seg, None
    content = pipeline.stage_content_image(entries, config, cache, pre)
    styled = pipeline.stage_transfer(entries, config, cache, pre, seg,
                                     content, net, net_digest)
    return net, net_digest, pre, seg, styled


# ---------------------------------------------------------------------------
# Verbs
# ---------------------------------------------------------------------------

def cmd_validate(args):
    entries = pipeline.read_manifest(args.manifest)
    if args.config:
        pipeline.load_config(args.config)
    n_pos = sum(e.label for e in entries)
    print(f"manifest ok: {len(entries)} images ({n_pos} positive, "
          f"{len(entries) - n_pos} negative), "
          f"{sum(e.mask is not None for e in entries)} with provided masks")


def cmd_preprocess(args):
    entries, config, cache, _ = _load_setup(args)
    pipeline.stage_preprocess(entries, config, cache)
    print(f"preprocess: {len(cache.misses)} computed, {len(cache.hits)} cached")


def cmd_segment(args):
    entries, config, cache, run_dir = _load_setup(args)
    pre = pipeline.stage_preprocess(entries, config, cache)
    seg = pipeline.stage_segment(entries, config, cache, pre)
    mask_dir = run_dir / "masks"
    mask_dir.mkdir(exist_ok=True)
    for e in entries:
        masks.save_mask(seg[e.id], mask_dir / f"{e.id}.png")
    print(f"segment: wrote {len(seg)} masks to {mask_dir}")


def cmd_content_image(args):
    entries, config, cache, run_dir = _load_setup(args)
    pre = pipeline.stage_preprocess(entries, config, cache)
    content = pipeline.stage_content_image(entries, config, cache, pre)
    from .image import save_image

    out = run_dir / "content.png"
    save_image(content, out)
    print(f"content-image: mean of {len(entries)} images -> {out}")


def cmd_transfer(args):
    entries, config, cache, run_dir = _load_setup(args)
    _, _, _, _, styled = _upstream(entries, config, cache, need_transfer=True)
    from .image import save_image

    out_dir = run_dir / "styled"
    out_dir.mkdir(exist_ok=True)
    for e in entries:
        save_image(styled[e.id], out_dir / f"{e.id}.png")
    print(f"transfer: wrote {len(styled)} images to {out_dir}")


def cmd_features(args):
    entries, config, cache, run_dir = _load_setup(args)
    net, net_digest, pre, seg, _ = _upstream(entries, config, cache)
    feats = pipeline.stage_features(entries, config, cache, pre, seg)
    from .abcd import FEATURE_NAMES

    lines = ["id," + ",".join(FEATURE_NAMES)]
    for e in entries:
        lines.append(e.id + "," + ",".join(f"{v:.10f}" for v in feats[e.id]))
    out = run_dir / "abcd_features.csv"
    out.write_text("\n".join(lines) + "\n")
    print(f"features: wrote {len(feats)} rows to {out}")


def cmd_decompose(args):
    entries, config, cache, run_dir = _load_setup(args)
    need = config.use_style_features
    _, _, pre, _, styled = _upstream(entries, config, cache, need_transfer=need)
    imgs = styled if need else pre
    tensor = cp.stack_images([imgs[e.id] for e in entries])
    model = cp.cp_als(tensor, rank=config.r_cp, seed=config.seed)
    cp.save_model(model, run_dir / "cp_model.npz")
    labels = np.array([e.label for e in entries])
    report = cp.rank_clusters_report(model.a, labels)
    (run_dir / "cp_components.json").write_text(json.dumps(report, indent=2) + "\n")
    print(f"decompose: rank {config.r_cp}, fit {model.fit:.4f} -> cp_model.npz")


def cmd_classify(args):
    entries, config, cache, run_dir = _load_setup(args)
    net, net_digest, pre, seg, _ = _upstream(entries, config, cache)
    feats = pipeline.stage_features(entries, config, cache, pre, seg)
    report = pipeline.run_classification(entries, config, cache, pre, seg,
                                         feats, net, net_digest)
    pipeline.write_metrics_csv(report, run_dir / "metrics.csv")
    pipeline.write_report_text(report, config, run_dir / "report.txt")
    print(f"classify: mean AUC {report.mean_auc:.4f} over {len(report.folds)} folds")


def cmd_report(args):
    run_dir = Path(args.run_dir)
    report_file = run_dir / "report.txt"
    if not report_file.exists():
        raise pipeline.StageError(
            "missing upstream artifact; run the 'classify' stage first"
        )
    print(report_file.read_text(), end="")


def _parse_grid_axes(args):
    style = pipeline.GRID_STYLE_LAYERS
    if args.style_depths:
        depths = {int(d) for d in args.style_depths.split(",")}
        style = tuple(s for s in style if len(s) in depths)
    content = pipeline.GRID_CONTENT_LAYERS
    if args.content_layers:
        content = tuple(args.content_layers.split(","))
    ratios = pipeline.GRID_RATIOS
    if args.ratios:
        ratios = tuple(float(v) for v in args.ratios.split(","))
    tv = pipeline.GRID_TV_WEIGHTS
    if args.tv_weights:
        tv = tuple(float(v) for v in args.tv_weights.split(","))
    return pipeline.grid_cells(style, content, ratios, tv)


def cmd_grid(args):
    cells = _parse_grid_axes(args)
    if args.enumerate_only:
        for i, c in enumerate(cells):
            print(f"{i},{'+'.join(c['style_layers'])},{c['content_layer']},"
                  f"{c['beta']:g},{c['gamma']:g}")
        print(f"total cells: {len(cells)}")
        return
    entries, config, cache, run_dir = _load_setup(args)
    pipeline.run_grid(args.manifest, config, run_dir, cells=cells)
    print(f"grid: {len(cells)} cells -> {run_dir / 'grid_summary.csv'}")


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lesionforge",
        description="Texture re-registration pipeline for lesion classification",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("validate", help="check a manifest (and config) for errors")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config")
    p.set_defaults(fn=cmd_validate)

    for name, fn, hlp in [
        ("preprocess", cmd_preprocess, "resize, de-hair, and color-normalize images"),
        ("segment", cmd_segment, "compute cleaned lesion masks"),
        ("content-image", cmd_content_image, "build the mean content image"),
        ("transfer", cmd_transfer, "synthesize style-registered images"),
        ("features", cmd_features, "compute shape/color descriptor vectors"),
        ("decompose", cmd_decompose, "fit the latent tensor basis"),
        ("classify", cmd_classify, "cross-validated classification"),
    ]:
        p = sub.add_parser(name, help=hlp)
        _add_common(p)
        p.set_defaults(fn=fn)

    p = sub.add_parser("report", help="print the classification report")
    p.add_argument("--run-dir", default="run")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("grid", help="run the synthesis tuning grid")
    _add_common(p)
    p.add_argument("--style-depths", help="comma list of style-layer counts, e.g. 1,5")
    p.add_argument("--content-layers", help="comma list of content layers")
    p.add_argument("--ratios", help="comma list of style/content ratios")
    p.add_argument("--tv-weights", help="comma list of TV weights")
    p.add_argument("--enumerate-only", action="store_true",
                   help="print the cells without running anything")
    p.set_defaults(fn=cmd_grid)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except (pipeline.ManifestError, pipeline.StageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
