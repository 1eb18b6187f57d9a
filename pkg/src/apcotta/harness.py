"""Stream evaluation, ablations, sweeps and the end-to-end synthetic pipeline."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .adapt import AdaptConfig, AdaptState, canonical_method, step
from .cloud import PointCloud, grid_subsample, load_cloud
from .corrupt import BenchmarkManifest, CorruptionKind, build_benchmark, default_manifest
from .metrics import ConfusionMatrix, MetricsReport, StreamReport
from .net import NetSpec, Network, load_checkpoint
from .scenes import SyntheticSceneSpec, synth_scene
from .train import BatchGeometry, PretrainConfig, evaluate, evaluation_batches, pretrain

log = logging.getLogger(__name__)

ABLATION_ROWS = (
    ("none", dict(dstl=False, ebcl=False, rpi=False)),
    ("dstl", dict(dstl=True, ebcl=False, rpi=False)),
    ("dstl+ebcl", dict(dstl=True, ebcl=True, rpi=False)),
    ("dstl+ebcl+rpi", dict(dstl=True, ebcl=True, rpi=True)),
)

SWEEP_GRIDS = {
    "S0": (0.0, 0.0005, 0.001, 0.0015, 0.002),
    "tau": (0.7, 0.75, 0.8, 0.85, 0.9),
    "alpha": (0.99, 0.995, 0.999, 0.9995, 0.9999),
    "p": (0.001, 0.005, 0.01, 0.05, 0.1),
}


def stream_seed(seed: int, domain_index: int) -> int:
    return int(np.random.SeedSequence([seed, 7919, domain_index]).generate_state(1)[0])


@dataclass
class StreamSpec:
    """Ordered (name, cloud) domains and the number of batches drawn from each."""

    domains: list
    batches_per_domain: int = 50

    def __post_init__(self):
        if self.batches_per_domain < 1:
            raise ValueError("need at least one batch per domain")


def run_stream_on(net: Network, stream: StreamSpec, method: str, cfg: AdaptConfig = AdaptConfig(),
                  geometry: BatchGeometry = BatchGeometry(), seed: int = 0, diagnostics=None):
    """Adapt ``net`` (in place) along ``stream`` and score every prediction.

    Batch sampling depends only on ``seed`` and the domain index, so different
    methods see identical batches. Labels stay in this function: the
    adaptation step only receives ``batch.unlabeled()``.
    """
    method = canonical_method(method)
    state = AdaptState(net, seed=seed)
    report = StreamReport(method)
    for d_index, (name, cloud) in enumerate(stream.domains):
        cm = ConfusionMatrix(cloud.class_count)
        batches = evaluation_batches(cloud, geometry, stream.batches_per_domain,
                                     stream_seed(seed, d_index))
        for b_index, batch in enumerate(batches):
            preds, diag = step(state, batch.unlabeled(), method, cfg,
                               new_domain=(b_index == 0 and d_index > 0))
            cm.update(batch.labels.ravel(), preds)
            if diagnostics is not None:
                diagnostics.append({"domain": name, "method": method, **diag})
        report.domains.append(MetricsReport.from_confusion(name, cm))
        log.info("%s %s oa=%s miou=%s", method, name, report.domains[-1].oa, report.domains[-1].miou)
    return report


def write_report(report: StreamReport, report_dir, diagnostics=None, stem=None):
    report_dir = Path(report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    stem = stem or report.method
    (report_dir / f"{stem}.csv").write_text(report.to_csv(), encoding="utf-8")
    (report_dir / f"{stem}.json").write_text(report.to_json(), encoding="utf-8")
    if diagnostics is not None:
        lines = [json.dumps(_jsonable(d), sort_keys=True) for d in diagnostics]
        (report_dir / f"{stem}.diagnostics.jsonl").write_text(
            "\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def load_stream(manifest_path, batches_per_domain: int, class_count=None) -> StreamSpec:
    manifest_path = Path(manifest_path)
    manifest = BenchmarkManifest.load(manifest_path)
    base = manifest_path.parent
    domains = []
    for d in manifest.domains:
        cloud = load_cloud(base / d.path, class_count=class_count)
        domains.append((CorruptionKind(d.kind).value, cloud))
    return StreamSpec(domains, batches_per_domain)


# ---------------------------------------------------------------------------
# file-based runs (CLI)


@dataclass
class RunConfig:
    checkpoint: str = "source.ckpt"
    manifest: str = "benchmark/manifest.json"
    report_dir: str = "reports"
    method: str = "apcotta"
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    geometry: BatchGeometry = field(default_factory=BatchGeometry)
    batches_per_domain: int = 50
    seed: int = 0
    dtype: str = "float32"

    def validate(self):
        for path in (self.checkpoint, self.manifest):
            if not Path(path).exists():
                raise FileNotFoundError(f"missing input: {path}")
        canonical_method(self.method)


def _load_net(cfg: RunConfig) -> Network:
    return load_checkpoint(cfg.checkpoint, dtype=np.dtype(cfg.dtype))


def run_stream(cfg: RunConfig, stem=None) -> StreamReport:
    cfg.validate()
    net = _load_net(cfg)
    stream = load_stream(cfg.manifest, cfg.batches_per_domain, net.spec.class_count)
    for name, cloud in stream.domains:
        if cloud.feature_count != net.spec.in_features:
            raise ValueError(f"domain {name} has {cloud.feature_count} features, "
                             f"checkpoint expects {net.spec.in_features}")
    diagnostics = []
    report = run_stream_on(net, stream, cfg.method, cfg.adapt, cfg.geometry, cfg.seed, diagnostics)
    write_report(report, cfg.report_dir, diagnostics, stem)
    return report


def ablation_configs(base: AdaptConfig):
    return [(name, base.with_toggles(**toggles)) for name, toggles in ABLATION_ROWS]


def run_ablation_on(net: Network, stream: StreamSpec, base: AdaptConfig = AdaptConfig(),
                    geometry: BatchGeometry = BatchGeometry(), seed: int = 0, reports=None):
    """Table rows in fixed order: none, DSTL, DSTL+EBCL, DSTL+EBCL+RPI.

    Pass a list as ``reports`` to also receive each row's StreamReport.
    """
    rows = []
    for name, cfg in ablation_configs(base):
        report = run_stream_on(net.clone(), stream, "apcotta", cfg, geometry, seed)
        if reports is not None:
            reports.append(report)
        rows.append({"row": name, "dstl": cfg.dstl, "ebcl": cfg.ebcl, "rpi": cfg.rpi,
                     "mean_oa": report.mean_oa, "mean_miou": report.mean_miou})
    return rows


ABLATION_COLUMNS = ["row", "dstl", "ebcl", "rpi", "mean_oa", "mean_miou"]


def run_ablation(cfg: RunConfig):
    cfg.validate()
    net = _load_net(cfg)
    stream = load_stream(cfg.manifest, cfg.batches_per_domain, net.spec.class_count)
    rows = run_ablation_on(net, stream, cfg.adapt, cfg.geometry, cfg.seed)
    _write_rows(rows, Path(cfg.report_dir) / "ablation.csv", ABLATION_COLUMNS)
    return rows


def run_sweep_on(net: Network, stream: StreamSpec, parameter: str, grid=None,
                 base: AdaptConfig = AdaptConfig(), geometry: BatchGeometry = BatchGeometry(),
                 seed: int = 0):
    if parameter not in SWEEP_GRIDS:
        raise ValueError(f"sweep parameter must be one of {sorted(SWEEP_GRIDS)}")
    grid = SWEEP_GRIDS[parameter] if grid is None else tuple(grid)
    rows = []
    for value in grid:
        cfg = replace(base, **{parameter: value})
        report = run_stream_on(net.clone(), stream, "apcotta", cfg, geometry, seed)
        rows.append({"value": value, "mean_miou": report.mean_miou, "mean_oa": report.mean_oa})
    return rows


def run_sweep(cfg: RunConfig, parameter: str, grid=None):
    cfg.validate()
    net = _load_net(cfg)
    stream = load_stream(cfg.manifest, cfg.batches_per_domain, net.spec.class_count)
    rows = run_sweep_on(net, stream, parameter, grid, cfg.adapt, cfg.geometry, cfg.seed)
    _write_rows(rows, Path(cfg.report_dir) / f"sweep_{parameter}.csv",
                ["value", "mean_miou", "mean_oa"])
    return rows


def _write_rows(rows, path, columns):
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(columns)]
    for r in rows:
        lines.append(",".join("" if r[c] is None else (f"{r[c]:.6f}" if isinstance(r[c], float)
                                                        else str(r[c])) for c in columns))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# in-memory end-to-end pipeline


METHODS = ("source", "bn_stats", "pseudo_label", "tent_continual", "tent_online", "apcotta")


def _pipeline_adapt():
    # learning rate and S0 calibrated for the compact network (see README)
    return replace(AdaptConfig(), lr=1e-3, S0=1e-5)


@dataclass
class PipelineConfig:
    """Desk-scale defaults for the synthetic benchmark used in acceptance runs."""

    scene: SyntheticSceneSpec = field(default_factory=SyntheticSceneSpec)
    grid_cell: float = 0.25
    pretrain: PretrainConfig = field(default_factory=lambda: PretrainConfig(
        epochs=40, steps_per_epoch=25, geometry=BatchGeometry(2, 1024, 12.0)))
    geometry: BatchGeometry = field(default_factory=lambda: BatchGeometry(2, 1024, 12.0))
    batches_per_domain: int = 15
    profile: str = "isprs"
    severity: int = 5
    adapt: AdaptConfig = field(default_factory=_pipeline_adapt)
    dtype: str = "float32"
    widths: tuple = (32, 64, 64, 128, 64)
    k: int = 16


@dataclass
class PipelineResult:
    seed: int
    source_net: Network
    clean: StreamReport
    reports: dict
    ablation: list = None


def prepare_source(seed: int, cfg: PipelineConfig = PipelineConfig()):
    """Synthesize train/test scenes and pretrain. Returns ``(net, test_cloud)``."""
    train_cloud = grid_subsample(synth_scene(cfg.scene, seed=2 * seed), cfg.grid_cell)
    test_cloud = grid_subsample(synth_scene(cfg.scene, seed=2 * seed + 1), cfg.grid_cell)
    spec = NetSpec(in_features=train_cloud.feature_count, class_count=train_cloud.class_count,
                   widths=cfg.widths, k=cfg.k)
    net = Network(spec, seed=seed, dtype=np.dtype(cfg.dtype))
    pretrain(net, train_cloud, cfg.pretrain, rng=seed)
    return net, test_cloud


def build_stream(test_cloud: PointCloud, cfg: PipelineConfig, seed: int) -> StreamSpec:
    manifest = default_manifest("synthetic", cfg.profile, cfg.severity, seed=seed)
    corrupted = build_benchmark(test_cloud, manifest)
    domains = [(CorruptionKind(d.kind).value, c) for d, c in zip(manifest.domains, corrupted)]
    return StreamSpec(domains, cfg.batches_per_domain)


def prepare(seed: int, cfg: PipelineConfig = PipelineConfig()):
    """Synthesize, pretrain and corrupt, all keyed by one seed."""
    net, test_cloud = prepare_source(seed, cfg)
    return net, test_cloud, build_stream(test_cloud, cfg, seed)


def clean_stream(test_cloud: PointCloud, stream: StreamSpec) -> StreamSpec:
    """Same domain names and batch counts, every domain the uncorrupted cloud."""
    return StreamSpec([(name, test_cloud) for name, _ in stream.domains], stream.batches_per_domain)


def run_pipeline(seed: int, cfg: PipelineConfig = PipelineConfig(), methods=METHODS,
                 ablation: bool = False, source=None):
    """Clean reference, every method and optionally the ablation on one stream seed.

    ``source`` is an optional ``(net, test_cloud)`` pair to share one
    pretrained model between stream seeds.
    """
    net, test_cloud = source if source is not None else prepare_source(seed, cfg)
    stream = build_stream(test_cloud, cfg, seed)
    clean = run_stream_on(net.clone(), clean_stream(test_cloud, stream), "source", cfg.adapt,
                          cfg.geometry, seed)
    rows, ablation_reports = None, []
    if ablation:
        rows = run_ablation_on(net, stream, cfg.adapt, cfg.geometry, seed, ablation_reports)
    reports = {}
    for m in methods:
        m = canonical_method(m)
        if m == "apcotta" and ablation and cfg.adapt == ablation_configs(cfg.adapt)[-1][1]:
            reports[m] = ablation_reports[-1]  # the full row is the same run
        else:
            reports[m] = run_stream_on(net.clone(), stream, m, cfg.adapt, cfg.geometry, seed)
    return PipelineResult(seed, net, clean, reports, rows)


def write_pipeline(result: PipelineResult, report_dir):
    """One directory per seed: clean + per-method CSV/JSON and ablation.csv."""
    out = Path(report_dir) / f"seed_{result.seed}"
    write_report(result.clean, out, stem="clean_source")
    for method, report in result.reports.items():
        write_report(report, out, stem=method)
    if result.ablation is not None:
        _write_rows(result.ablation, out / "ablation.csv", ABLATION_COLUMNS)
    return out


def run_benchmark(seeds=(0, 1, 2, 3, 4), cfg: PipelineConfig = PipelineConfig(),
                  report_dir=None, methods=METHODS, ablation=True, source_seed=0):
    """Pretrain once (``source_seed``) then evaluate every stream seed.

    Returns ``(results, summary)``; with ``report_dir`` set, per-seed reports
    and ``summary.json`` are written there.
    """
    source = prepare_source(source_seed, cfg)
    results = [run_pipeline(s, cfg, methods, ablation, source) for s in seeds]
    summary = summarize(results)
    if report_dir is not None:
        for r in results:
            write_pipeline(r, report_dir)
        Path(report_dir, "summary.json").write_text(
            json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return results, summary


def summarize(results) -> dict:
    per_seed = []
    for r in results:
        entry = {"seed": r.seed, "clean_source_miou": r.clean.mean_miou,
                 "miou": {m: rep.mean_miou for m, rep in r.reports.items()},
                 "oa": {m: rep.mean_oa for m, rep in r.reports.items()}}
        if r.ablation is not None:
            entry["ablation_miou"] = {row["row"]: row["mean_miou"] for row in r.ablation}
        per_seed.append(entry)
    out = {"seeds": per_seed}
    if results and results[0].ablation is not None:
        names = [row["row"] for row in results[0].ablation]
        out["ablation_mean_miou"] = {
            n: float(np.mean([e["ablation_miou"][n] for e in per_seed])) for n in names}
    return out


def validation_report(net: Network, cloud: PointCloud, geometry: BatchGeometry, count: int,
                      seed: int) -> MetricsReport:
    """Source-model scores on a clean cloud with the stream's batch sampling for domain 0."""
    cm = evaluate(net, evaluation_batches(cloud, geometry, count, stream_seed(seed, 0)),
                  cloud.class_count)
    return MetricsReport.from_confusion("validation", cm)
