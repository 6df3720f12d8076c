"""Command line entry point: ``wmmoe <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

from ..corpus import (
    CurationConfig,
    SplitSpec,
    SynthConfig,
    curate,
    drop_frames_corpus,
    generate_by_counts,
    generate_synthetic,
    make_imbalance_splits,
)
from ..scenes import CorpusError, parse_corpus, write_corpus
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import TrainConfig, load_config
from .evaluate import evaluate, write_rows
from .route_stats import ROUTE_FIELDS, permutation_test, route_stats
from .train import TrainingError, train, write_loss_log

log = logging.getLogger("wmmoe")

METRIC_FIELDS = ("metric", "g", "value", "n_samples")
REPORT_FIELDS = ("class", "count", "high_risk", "avg_speed_kmh", "avg_accel", "avg_yaw_rate")


def _add_dataclass_flags(p: argparse.ArgumentParser, cls) -> None:
    for f in fields(cls):
        if f.type in ("bool", bool):
            p.add_argument(f"--{f.name}", type=lambda s: s.lower() in ("1", "true", "yes", "on"), default=None,
                           metavar="BOOL")
        else:
            typ = {"int": int, "float": float}.get(f.type if isinstance(f.type, str) else f.type.__name__, str)
            p.add_argument(f"--{f.name}", type=typ, default=None)


def _overrides(args, cls) -> dict:
    return {f.name: getattr(args, f.name) for f in fields(cls) if getattr(args, f.name, None) is not None}


def _parse_counts(text: str) -> dict[str, int]:
    out = {}
    for part in text.split(","):
        k, _, v = part.partition("=")
        out[k.strip()] = int(v)
    return out


def _read(path) -> list:
    return parse_corpus(path, rasterize=False)


def cmd_gen(args) -> int:
    cfg = SynthConfig()
    if args.counts:
        scenes = generate_by_counts(cfg, _parse_counts(args.counts), args.seed, args.prefix)
    else:
        scenes = generate_synthetic(cfg, args.n, args.seed, args.prefix)
    n = write_corpus(scenes, args.out)
    print(f"wrote {n} scenes to {args.out}")
    return 0


def cmd_curate(args) -> int:
    cfg = load_config(CurationConfig, args.config, _overrides(args, CurationConfig))
    scenes, rows = curate(_read(args.input), cfg)
    if args.out:
        write_corpus(scenes, args.out)
    report = args.report or str(Path(args.out or args.input).with_suffix(".report.csv"))
    write_rows(rows, REPORT_FIELDS, report)
    for r in rows:
        print(f"{r['class']:<13}{r['count']:>7}  high-risk {r['high_risk']}")
    return 0


def cmd_perturb(args) -> int:
    scenes = drop_frames_corpus(_read(args.input), args.m, args.seed)
    write_corpus(scenes, args.out)
    print(f"dropped {args.m} frame(s) per track in {len(scenes)} scenes -> {args.out}")
    return 0


def cmd_split(args) -> int:
    if args.counts:
        spec = SplitSpec(_parse_counts(args.counts))
    else:
        spec = SplitSpec.named(args.split, args.scale)
    out = make_imbalance_splits(_read(args.input), spec, args.seed)
    write_corpus(out, args.out)
    print(f"split with {dict(spec.counts)} -> {len(out)} scenes in {args.out}")
    return 0


def cmd_train(args) -> int:
    from .plotting import plot_loss_curve

    cfg = load_config(TrainConfig, args.config, _overrides(args, TrainConfig))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scenes = _read(args.corpus)
    val = _read(args.val) if args.val else None
    t0 = time.time()

    def progress(row):
        print(f"epoch {row['epoch']:>3}  loss {row['loss']:.4f}  val minADE {row['val_minade']:.4f}  "
              f"({time.time() - t0:.0f}s)", flush=True)

    res = train(cfg, scenes, val, progress=progress)
    save_checkpoint(Checkpoint.from_model(res.model, cfg.to_dict(), {"seed": cfg.seed, "epochs_done": cfg.epochs}),
                    out / "checkpoint.bin")
    write_loss_log(res.log, out / "loss_log.csv")
    plot_loss_curve(res.log, out / "loss_curve.png")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    print(f"checkpoint, loss_log.csv and loss_curve.png written to {out}")
    return 0


def cmd_eval(args) -> int:
    from .plotting import plot_class_metrics

    model = load_checkpoint(args.checkpoint).build_model()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = evaluate(model, _read(args.corpus), tuple(args.g), args.top_k, tuple(args.horizons))
    write_rows(res.rows(), METRIC_FIELDS, out / "metrics.csv")
    write_rows(res.class_rows(), ("scenario", *METRIC_FIELDS), out / "metrics_by_class.csv")
    plot_class_metrics(res.class_rows(), out / "metrics_by_class.png")
    for r in res.rows():
        print(f"{r['metric']:<8} g={r['g']:<3} {r['value']:.4f}  (n={r['n_samples']})")
    return 0


def cmd_route_stats(args) -> int:
    from .plotting import plot_route_heatmap
    from .data import prepare_scenes

    model = load_checkpoint(args.checkpoint).build_model()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, pred = route_stats(model, prepare_scenes(_read(args.corpus)), top_k=args.top_k)
    write_rows(rows, ROUTE_FIELDS, out / "route_stats.csv")
    plot_route_heatmap(rows, out / "route_stats.png")
    if len(set(pred.labels)) > 1:
        obs, q95, pval = permutation_test(pred.gates, pred.labels, args.permutations, args.seed)
        print(f"gate divergence {obs:.6f}; shuffled-label 95th percentile {q95:.6f}; p={pval:.4f}")
    print(f"route_stats.csv and route_stats.png written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wmmoe", description="Trajectory forecaster and corner-case corpus toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic labelled corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--counts", help="exact per-class counts, e.g. Common=800,Turning=50")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--prefix", default="syn")
    g.set_defaults(fn=cmd_gen)

    c = sub.add_parser("curate", help="classify scenes and write a per-class report")
    c.add_argument("--input", required=True)
    c.add_argument("--out")
    c.add_argument("--report")
    c.add_argument("--config")
    _add_dataclass_flags(c, CurationConfig)
    c.set_defaults(fn=cmd_curate)

    d = sub.add_parser("perturb", help="drop m history frames per track")
    d.add_argument("--input", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--m", type=int, required=True)
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(fn=cmd_perturb)

    s = sub.add_parser("split", help="seeded per-class subsample")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", choices=list("abcde"), default="e")
    s.add_argument("--scale", type=float, default=1.0)
    s.add_argument("--counts")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_split)

    t = sub.add_parser("train", help="train and write a checkpoint, loss log and curve")
    t.add_argument("--corpus", required=True)
    t.add_argument("--val")
    t.add_argument("--out-dir", required=True)
    t.add_argument("--config")
    _add_dataclass_flags(t, TrainConfig)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="metrics CSVs and a per-class figure")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--out-dir", required=True)
    e.add_argument("--g", type=int, nargs="+", default=[1, 5])
    e.add_argument("--top-k", type=int)
    e.add_argument("--horizons", type=int, nargs="*", default=[])
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("route-stats", help="expert gate telemetry CSV and heatmap")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--corpus", required=True)
    r.add_argument("--out-dir", required=True)
    r.add_argument("--top-k", type=int)
    r.add_argument("--permutations", type=int, default=200)
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(fn=cmd_route_stats)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (CorpusError, CheckpointError, TrainingError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
