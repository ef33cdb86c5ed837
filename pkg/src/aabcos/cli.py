"""Command-line entry point: ``aabcos <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .config import ConfigError, RunConfig, load_config, parse_config
from .data import DataError, generate_synthetic, kfold_split, assign_folds, load_image, load_manifest, save_manifest
from .explain import contribution_maps_all, render_heatmap
from .layers import load_checkpoint, save_checkpoint
from .metrics import EpgConfig
from .training import DivergenceError, evaluate_model, write_log

log = logging.getLogger("aabcos")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


def _run_config(path) -> RunConfig:
    return load_config(path) if path else RunConfig()


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_rows(path, fields, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for row in rows:
            w.writerow([_fmt(row.get(k)) for k in fields])


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    if isinstance(v, float):
        return f"{v:.8g}"
    return str(v)


def cmd_generate_data(args) -> int:
    manifest = generate_synthetic(args.n, args.size, args.classes, seed=args.seed,
                                  prevalence=args.prevalence, multiclass=args.multiclass)
    assign_folds(manifest, kfold_split(manifest, args.folds, seed=args.seed))
    path = save_manifest(manifest, args.out)
    print(f"wrote {len(manifest)} samples to {path}")
    return 0


def cmd_train(args) -> int:
    run = _run_config(args.config)
    if args.fold is not None:
        run = parse_config(f"data.fold={args.fold}", "<cli>", run)
    manifest = load_manifest(args.data)
    out = _outdir(args.out)
    run.write(out / "config.resolved")
    result = pipeline.fit(manifest, run)
    save_checkpoint(result.model, out / "model.bcos", {"fold": run.data.fold})
    write_log(result.log, out / "train_log.csv")
    last = [r for r in result.log if r["split"] == "val"]
    if last:
        print(f"fold {run.data.fold}: val accuracy={last[-1]['accuracy']:.4f} f1={last[-1]['f1']:.4f}")
    return 0


def _eval_manifest(args):
    model, extra = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.data)
    fold = args.fold if args.fold is not None else None
    if fold is not None:
        _, manifest = manifest.split(fold)
    return model, manifest


def cmd_evaluate(args) -> int:
    model, manifest = _eval_manifest(args)
    metrics = evaluate_model(model, manifest)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name(
        f"metrics{'' if args.fold is None else f'_fold{args.fold}'}.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    fields = ("n", "loss", "accuracy", "precision", "recall", "f1", "auc")
    _write_rows(out, fields, [{"n": len(manifest), **metrics}])
    print(f"wrote {out}")
    return 0


def cmd_explain(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    image = load_image(args.image)
    classes = None if args.all else [args.class_id]
    out = _outdir(args.out)
    stem = Path(args.image).stem
    for m in contribution_maps_all(model, image, classes):
        render_heatmap(m, out / f"{stem}_class{m.class_id}.png")
        print(f"class {m.class_id}: logit={m.logit:.6g} map_sum={float(m.values.sum()):.6g}")
    return 0


def cmd_epg(args) -> int:
    model, manifest = _eval_manifest(args)
    thresholds = tuple(float(t) for t in args.thresholds.split(",")) if args.thresholds else EpgConfig().thresholds
    cfg = EpgConfig(thresholds=thresholds)
    out = _outdir(args.out)
    explained = pipeline.explain_manifest(model, manifest, cfg.decision_threshold)
    report = pipeline.epg_report(explained, manifest, cfg)
    report.write_csv(out / "epg_samples.csv")
    report.write_aggregate_csv(out / "epg_aggregate.csv")
    rows = [{"threshold": t, "subset": s, "mean": mean, "n": n}
            for s in ("all", "tp", "fn") for t, mean, n in report.curve("epg_precision", s)]
    _write_rows(out / "precision_curve.csv", ("threshold", "subset", "mean", "n"), rows)
    print(f"{len(report.records)} records ({report.undefined_count()} undefined), "
          f"{len(report.excluded)} excluded pairs; wrote {out}")
    return 0


def cmd_compare_variants(args) -> int:
    run = _run_config(args.config)
    if args.fold is not None:
        run = parse_config(f"data.fold={args.fold}", "<cli>", run)
    manifest = load_manifest(args.data) if args.data else pipeline.synthetic_manifest(run)
    out = _outdir(args.out)
    run.write(out / "config.resolved")
    rows = []
    for variant in pipeline.VARIANTS:
        res = pipeline.run_variant(manifest, run, variant)
        vdir = _outdir(out / variant.value)
        save_checkpoint(res["result"].model, vdir / "model.bcos", {"fold": run.data.fold})
        write_log(res["result"].log, vdir / "train_log.csv")
        res["report"].write_aggregate_csv(vdir / "epg_aggregate.csv")
        rows.append(pipeline.comparison_row(res))
    _write_rows(out / "compare.csv", pipeline.COMPARE_FIELDS, rows)
    for row in rows:
        print("  ".join(f"{k}={_fmt(row.get(k))}" for k in pipeline.COMPARE_FIELDS))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aabcos", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write a synthetic bounding-box dataset")
    g.add_argument("--n", type=int, default=400)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--classes", type=int, default=2)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--prevalence", type=float, default=0.3)
    g.add_argument("--folds", type=int, default=5)
    g.add_argument("--multilabel", dest="multiclass", action="store_false",
                   help="independent findings per class instead of one exclusive class with a normal class 0")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="train one model with one fold held out")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--fold", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="classification metrics of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--fold", type=int)
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    x = sub.add_parser("explain", help="contribution maps of one image")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--image", required=True)
    grp = x.add_mutually_exclusive_group(required=True)
    grp.add_argument("--class", dest="class_id", type=int)
    grp.add_argument("--all", action="store_true")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_explain)

    q = sub.add_parser("epg", help="energy-based pointing game report and threshold sweep")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--data", required=True)
    q.add_argument("--fold", type=int)
    q.add_argument("--thresholds", help="comma-separated, default 0,0.1,...,0.9")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_epg)

    c = sub.add_parser("compare-variants", help="train and compare strided / BlurPool / FLC models")
    c.add_argument("--config")
    c.add_argument("--data", help="manifest; synthetic data from the config when omitted")
    c.add_argument("--fold", type=int)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_compare_variants)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
