"""Command line entry point: ``apcotta <subcommand> ...``.

Every subcommand accepts ``--config FILE``; explicit flags win over file values.
Failures exit nonzero after printing exactly one JSON line to stderr, e.g.
``{"error": "input", "message": "missing input: source.ckpt"}``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .cloud import CloudFormatError, EmptySphereError, grid_subsample, load_cloud, save_cloud
from .corrupt import CorruptionError, CorruptionKind, default_manifest, build_benchmark
from .harness import SWEEP_GRIDS, PipelineConfig, run_ablation, run_benchmark, run_stream, run_sweep
from .metrics import ConfusionMatrix, MetricsReport
from .net import CheckpointError, NetSpec, Network, NetworkFault, load_checkpoint, save_checkpoint
from .scenes import synth_scene
from .train import pretrain, predict_cloud

# category -> exit code
EXIT_CODES = {
    "usage": 2,
    "config": 3,
    "input": 4,
    "format": 5,
    "checkpoint": 6,
    "corruption": 7,
    "numeric": 8,
    "value": 9,
    "internal": 70,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _categorize(exc: BaseException) -> str:
    if isinstance(exc, UsageError):
        return "usage"
    if isinstance(exc, config_mod.ConfigError):
        return "config"
    if isinstance(exc, CheckpointError):
        return "checkpoint"
    if isinstance(exc, CloudFormatError):
        return "format"
    if isinstance(exc, (FileNotFoundError, IsADirectoryError, PermissionError)):
        return "input"
    if isinstance(exc, CorruptionError):
        return "corruption"
    if isinstance(exc, (NetworkFault, FloatingPointError, EmptySphereError)):
        return "numeric"
    if isinstance(exc, ValueError):
        return "value"
    return "internal"


def _message(exc: BaseException) -> str:
    if isinstance(exc, FileNotFoundError) and exc.filename:
        return f"missing input: {exc.filename}"
    text = str(exc) or type(exc).__name__
    return " ".join(text.split())


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    sections = config_mod.load(args.spec or args.config)
    spec = config_mod.scene_spec(sections)
    cloud = synth_scene(spec, seed=args.seed)
    if args.grid_cell > 0:
        cloud = grid_subsample(cloud, args.grid_cell)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_cloud(cloud, args.out)
    counts = np.bincount(cloud.labels, minlength=cloud.class_count)
    return {"points": len(cloud), "class_counts": counts.tolist(), "out": str(args.out)}


def cmd_pretrain(args):
    sections = config_mod.load(args.config, {
        "pretrain": {"epochs": args.epochs, "steps_per_epoch": args.steps_per_epoch, "lr": args.lr},
        "geometry": {"b": args.b, "n_points": args.n_points, "radius": args.radius},
    })
    cfg = config_mod.pretrain_config(sections)
    cloud = load_cloud(args.cloud)
    if cloud.labels is None:
        raise ValueError("pretraining needs a labeled cloud")
    spec = NetSpec(in_features=cloud.feature_count, class_count=cloud.class_count)
    net = Network(spec, seed=args.seed, dtype=np.dtype(args.dtype))
    _, history = pretrain(net, cloud, cfg, rng=args.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(net, args.out)
    return {"epochs": cfg.epochs, "final_loss": history[-1] if history else None, "out": str(args.out)}


def cmd_corrupt(args):
    cloud = load_cloud(args.cloud)
    order = tuple(CorruptionKind(k.strip()) for k in args.order.split(",")) if args.order else None
    kwargs = {"order": order} if order else {}
    manifest = default_manifest(str(Path(args.cloud)), args.profile, args.severity,
                                seed=args.seed, **kwargs)
    clouds = build_benchmark(cloud, manifest, args.out_dir)
    return {"manifest": str(Path(args.out_dir) / "manifest.json"),
            "domains": [{"kind": d.kind.value, "points": len(c)}
                        for d, c in zip(manifest.domains, clouds)]}


def _run_overrides(args, method=None):
    adapt = {k: getattr(args, k, None) for k in ("S0", "tau", "alpha", "p", "lr")}
    for toggle in ("dstl", "ebcl", "rpi"):
        if getattr(args, f"no_{toggle}", False):
            adapt[toggle] = False
    return {
        "paths": {"checkpoint": args.ckpt, "manifest": args.manifest, "report_dir": args.report},
        "run": {"method": method, "seed": args.seed, "batches_per_domain": args.batches,
                "dtype": args.dtype},
        "adapt": adapt,
        "geometry": {"b": args.b, "n_points": args.n_points, "radius": args.radius},
    }


def _run_config(args, method=None):
    return config_mod.run_config(config_mod.load(args.config, _run_overrides(args, method)))


def cmd_adapt(args):
    cfg = _run_config(args, args.method)
    report = run_stream(cfg)
    return {"method": report.method, "mean_oa": report.mean_oa, "mean_miou": report.mean_miou,
            "report_dir": cfg.report_dir}


def cmd_ablate(args):
    cfg = _run_config(args)
    rows = run_ablation(cfg)
    return {"rows": rows, "out": str(Path(cfg.report_dir) / "ablation.csv")}


def cmd_sweep(args):
    cfg = _run_config(args)
    grid = [float(v) for v in args.grid.split(",")] if args.grid else None
    rows = run_sweep(cfg, args.param, grid)
    return {"rows": rows, "out": str(Path(cfg.report_dir) / f"sweep_{args.param}.csv")}


def read_predictions(path) -> np.ndarray:
    """One integer label per line; blank lines and ``#`` comments are skipped."""
    labels = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            try:
                labels.append(int(text))
            except ValueError:
                raise CloudFormatError(f"{path}:{lineno}: not an integer label: {text!r}") from None
    return np.asarray(labels, dtype=np.int64)


def write_predictions(labels, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("".join(f"{int(v)}\n" for v in labels), encoding="utf-8")


def cmd_eval(args):
    truth = load_cloud(args.truth)
    if truth.labels is None:
        raise ValueError("truth cloud carries no labels")
    preds = read_predictions(args.pred)
    if len(preds) != len(truth):
        raise ValueError(f"{len(preds)} predictions for {len(truth)} points")
    cm = ConfusionMatrix(truth.class_count).update(truth.labels, preds)
    report = MetricsReport.from_confusion(Path(args.truth).stem, cm)
    out = report.as_dict()
    if args.out:
        Path(args.out).write_text(json.dumps(out, indent=2) + "\n", encoding="utf-8")
    return out


def cmd_predict(args):
    sections = config_mod.load(args.config, {
        "geometry": {"b": args.b, "n_points": args.n_points, "radius": args.radius}})
    geometry = config_mod.run_config(sections).geometry
    net = load_checkpoint(args.ckpt, dtype=np.dtype(args.dtype))
    cloud = load_cloud(args.cloud, class_count=net.spec.class_count)
    labels = predict_cloud(net, cloud, geometry, seed=args.seed)
    write_predictions(labels, args.out)
    return {"points": len(labels), "out": str(args.out)}


def cmd_benchmark(args):
    seeds = tuple(int(v) for v in args.seeds.split(","))
    cfg = PipelineConfig()
    if args.batches:
        cfg.batches_per_domain = args.batches
    _, summary = run_benchmark(seeds, cfg, args.report, ablation=not args.no_ablation,
                               source_seed=args.source_seed)
    return summary


# ---------------------------------------------------------------------------
# parser


def _geometry_flags(p):
    p.add_argument("--b", type=int, help="sub-clouds per batch")
    p.add_argument("--n-points", dest="n_points", type=int, help="points per sub-cloud")
    p.add_argument("--radius", type=float, help="sub-cloud radius in meters")


def _stream_flags(p):
    p.add_argument("--ckpt", help="source checkpoint")
    p.add_argument("--manifest", help="benchmark manifest.json")
    p.add_argument("--report", help="report directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--batches", type=int, help="batches per domain")
    p.add_argument("--dtype", choices=("float32", "float64"))
    for name in ("S0", "tau", "alpha", "p", "lr"):
        p.add_argument(f"--{name}", type=float)
    for toggle in ("dstl", "ebcl", "rpi"):
        p.add_argument(f"--no-{toggle}", action="store_true")
    _geometry_flags(p)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="apcotta", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a labeled synthetic scene")
    p.add_argument("--spec", help="INI file with a [scene] section")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--grid-cell", dest="grid_cell", type=float, default=0.25,
                   help="voxel subsampling cell in meters (0 disables)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", parents=[common], help="train the source model")
    p.add_argument("--cloud", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps-per-epoch", dest="steps_per_epoch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    _geometry_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("corrupt", parents=[common], help="build a corruption benchmark")
    p.add_argument("--cloud", required=True)
    p.add_argument("--profile", choices=("isprs", "h3d"), default="isprs")
    p.add_argument("--severity", type=int, choices=range(1, 6), default=5)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--order", help="comma-separated domain order")
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("adapt", parents=[common], help="run one method over the stream")
    _stream_flags(p)
    p.add_argument("--method",
                   choices=("source", "bnstats", "pseudo", "tent", "tent-online", "apcotta"))
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("ablate", parents=[common], help="four-row module ablation")
    _stream_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", parents=[common], help="hyperparameter sensitivity")
    _stream_flags(p)
    p.add_argument("--param", required=True, choices=sorted(SWEEP_GRIDS))
    p.add_argument("--grid", help="comma-separated values (default: built-in grid)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", parents=[common], help="score predictions against a labeled cloud")
    p.add_argument("--pred", required=True, help="one integer label per line")
    p.add_argument("--truth", required=True)
    p.add_argument("--out", help="also write the JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", parents=[common], help="label every point of a cloud")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--cloud", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    _geometry_flags(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("benchmark", parents=[common],
                       help="synthetic end-to-end run: one source model, several stream seeds")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--source-seed", dest="source_seed", type=int, default=0)
    p.add_argument("--batches", type=int, help="batches per domain")
    p.add_argument("--no-ablation", dest="no_ablation", action="store_true")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        result = args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one error line
        category = _categorize(exc)
        print(json.dumps({"error": category, "message": _message(exc)}), file=sys.stderr)
        if category == "internal" and logging.getLogger().isEnabledFor(logging.DEBUG):
            raise
        return EXIT_CODES[category]
    print(json.dumps(result, default=_plain))
    return 0


def _plain(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    return str(obj)


if __name__ == "__main__":
    sys.exit(main())
