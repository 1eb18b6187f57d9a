"""Seven LiDAR corruption generators at five severities, plus benchmark building.

All generators take a clean :class:`PointCloud`, a severity in 1..5 (0 is
accepted as the identity), a profile name and a numpy ``Generator``.
Fractional point counts are floored.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .cloud import IGNORE, PointCloud, save_cloud


class CorruptionKind(str, enum.Enum):
    SUNLIGHT = "sunlight"
    SPACE = "space"
    UNIFORM = "uniform"
    DENSITY = "density"
    CUTOUT = "cutout"
    IMPULSE = "impulse"
    GAUSSIAN = "gaussian"


DEFAULT_ORDER = tuple(CorruptionKind)

# ratios are kept as decimal strings so that count = floor(ratio * N) is exact
SEVERITY_TABLE = {
    "isprs": {
        "sunlight_ratio": ("0.007", "0.014", "0.021", "0.028", "0.035"),
        "sunlight_sigma": 2.0,
        "density_ratio": ("0.0602", "0.1204", "0.1806", "0.2408", "0.301"),
        "cutout_groups": (2, 3, 5, 7, 10),
        "cutout_group_fraction": "0.03",
        "gaussian_sigma": (0.02002, 0.04004, 0.06006, 0.08008, 0.1001),
        "uniform_bound": (0.028, 0.056, 0.084, 0.112, 0.140),
        "impulse_fraction": ("11/300", "11/250", "11/200", "11/150", "11/100"),
        "impulse_magnitude": 0.1,
        "space_per_cell": (5, 10, 15, 20, 25),
        "space_grid": 10,
    },
    "h3d": {
        "sunlight_ratio": ("0.003", "0.006", "0.009", "0.012", "0.015"),
        "sunlight_sigma": 1.0,
        "density_ratio": ("0.182", "0.364", "0.546", "0.728", "0.91"),
        "cutout_groups": (2, 3, 5, 7, 10),
        "cutout_group_fraction": "0.01",
        "gaussian_sigma": (0.012, 0.024, 0.036, 0.048, 0.060),
        "uniform_bound": (0.028, 0.056, 0.084, 0.112, 0.140),
        "impulse_fraction": ("7/300", "7/250", "7/200", "7/150", "7/100"),
        "impulse_magnitude": 0.06,
        "space_per_cell": (100, 200, 300, 400, 500),
        "space_grid": 10,
    },
}

SEVERITY_KEYS = {
    CorruptionKind.SUNLIGHT: "sunlight_ratio",
    CorruptionKind.SPACE: "space_per_cell",
    CorruptionKind.UNIFORM: "uniform_bound",
    CorruptionKind.DENSITY: "density_ratio",
    CorruptionKind.CUTOUT: "cutout_groups",
    CorruptionKind.IMPULSE: "impulse_fraction",
    CorruptionKind.GAUSSIAN: "gaussian_sigma",
}


class CorruptionError(ValueError):
    pass


def _profile(profile):
    if isinstance(profile, dict):
        return profile
    try:
        return SEVERITY_TABLE[profile.lower()]
    except KeyError:
        raise CorruptionError(f"unknown profile {profile!r}") from None


def severity_value(profile, key, severity: int):
    """Parameter for ``severity``; severity 0 yields the zero parameter."""
    if not 0 <= severity <= 5:
        raise CorruptionError(f"severity must be in 0..5, got {severity}")
    if severity == 0:
        return 0
    return _profile(profile)[key][severity - 1]


def floor_count(fraction, n: int) -> int:
    return int(Fraction(fraction) * n) if fraction else 0


def _displaced(cloud: PointCloud, positions) -> PointCloud:
    return PointCloud(positions, cloud.features.copy(),
                      None if cloud.labels is None else cloud.labels.copy(), cloud.class_count)


def sunlight(cloud, severity, profile, rng, sigma=None):
    prof = _profile(profile)
    count = floor_count(severity_value(prof, "sunlight_ratio", severity), len(cloud))
    sigma = prof["sunlight_sigma"] if sigma is None else sigma
    pos = cloud.positions.copy()
    idx = rng.choice(len(cloud), size=count, replace=False)
    pos[idx] += rng.normal(0.0, sigma, size=(count, 3))
    return _displaced(cloud, pos)


def density_decrease(cloud, severity, profile, rng):
    n = len(cloud)
    count = floor_count(severity_value(profile, "density_ratio", severity), n)
    if count >= n:
        raise CorruptionError("density decrease would remove every point")
    drop = rng.choice(n, size=count, replace=False)
    keep = np.ones(n, dtype=bool)
    keep[drop] = False
    return cloud.subset(keep)


def cutout(cloud, severity, profile, rng):
    """Remove G balls of g points each, drawn one after another."""
    prof = _profile(profile)
    n = len(cloud)
    groups = severity_value(prof, "cutout_groups", severity)
    group = max(1, floor_count(prof["cutout_group_fraction"], n))
    alive = np.arange(n)
    for _ in range(groups):
        if group >= len(alive):
            raise CorruptionError("cutout exhausted the cloud")
        pts = cloud.positions[alive]
        center = rng.integers(len(alive))
        _, near = cKDTree(pts).query(pts[center], k=group)
        near = np.atleast_1d(near)
        # the center itself must be part of its group even with duplicates
        if center not in near:
            near = np.concatenate([[center], near[:-1]])
        keep = np.ones(len(alive), dtype=bool)
        keep[near] = False
        alive = alive[keep]
    return cloud.subset(alive)


def gaussian_noise(cloud, severity, profile, rng):
    sigma = severity_value(profile, "gaussian_sigma", severity)
    noise = rng.normal(0.0, 1.0, size=cloud.positions.shape) * sigma
    return _displaced(cloud, cloud.positions + noise)


def uniform_noise(cloud, severity, profile, rng):
    bound = severity_value(profile, "uniform_bound", severity)
    noise = rng.uniform(-1.0, 1.0, size=cloud.positions.shape) * bound
    return _displaced(cloud, cloud.positions + noise)


def impulse_noise(cloud, severity, profile, rng, magnitude=None):
    prof = _profile(profile)
    count = floor_count(severity_value(prof, "impulse_fraction", severity), len(cloud))
    magnitude = prof["impulse_magnitude"] if magnitude is None else magnitude
    pos = cloud.positions.copy()
    idx = rng.choice(len(cloud), size=count, replace=False)
    signs = rng.choice(np.array([-1.0, 1.0]), size=(count, 3))
    pos[idx] += signs * magnitude
    return _displaced(cloud, pos)


def occupied_cells(positions, grid: int = 10):
    """Integer cell coordinates of a ``grid``^3 split of the bounding box."""
    lo = positions.min(axis=0)
    size = (positions.max(axis=0) - lo) / grid
    safe = np.where(size > 0, size, 1.0)
    cells = np.clip(np.floor((positions - lo) / safe), 0, grid - 1).astype(np.int64)
    return np.unique(cells, axis=0), lo, size


def space_noise(cloud, severity, profile, rng):
    """Add k uniform points to every occupied cell; they are unlabeled (IGNORE)."""
    prof = _profile(profile)
    per_cell = severity_value(prof, "space_per_cell", severity)
    if per_cell == 0:
        return _displaced(cloud, cloud.positions.copy())
    cells, lo, size = occupied_cells(cloud.positions, prof["space_grid"])
    corners = lo + np.repeat(cells, per_cell, axis=0) * size
    new_pos = corners + rng.uniform(0.0, 1.0, size=corners.shape) * size
    m = len(new_pos)
    positions = np.vstack([cloud.positions, new_pos])
    features = np.vstack([cloud.features, np.zeros((m, cloud.feature_count))])
    labels = None
    if cloud.labels is not None:
        labels = np.concatenate([cloud.labels, np.full(m, IGNORE, dtype=np.int64)])
    return PointCloud(positions, features, labels, cloud.class_count)


GENERATORS = {
    CorruptionKind.SUNLIGHT: sunlight,
    CorruptionKind.SPACE: space_noise,
    CorruptionKind.UNIFORM: uniform_noise,
    CorruptionKind.DENSITY: density_decrease,
    CorruptionKind.CUTOUT: cutout,
    CorruptionKind.IMPULSE: impulse_noise,
    CorruptionKind.GAUSSIAN: gaussian_noise,
}


def corrupt(cloud, kind, severity, profile="isprs", rng=None):
    kind = CorruptionKind(kind)
    if rng is None:
        rng = np.random.default_rng()
    return GENERATORS[kind](cloud, severity, profile, rng)


# ---------------------------------------------------------------------------
# benchmark manifests


@dataclass
class Domain:
    kind: CorruptionKind
    severity: int
    seed: int
    path: str


@dataclass
class BenchmarkManifest:
    source: str
    profile: str = "isprs"
    seed: int = 0
    domains: list = field(default_factory=list)

    def validate(self):
        _profile(self.profile)
        paths = [d.path for d in self.domains]
        if len(set(paths)) != len(paths):
            raise CorruptionError("manifest has duplicate output paths")
        for d in self.domains:
            CorruptionKind(d.kind)
            if not 1 <= d.severity <= 5:
                raise CorruptionError(f"severity must be in 1..5, got {d.severity}")

    def to_json(self) -> dict:
        return {
            "profile": self.profile,
            "source": self.source,
            "seed": self.seed,
            "domains": [
                {"kind": CorruptionKind(d.kind).value, "severity": d.severity, "seed": d.seed,
                 "path": d.path}
                for d in self.domains
            ],
        }

    @classmethod
    def from_json(cls, data: dict) -> "BenchmarkManifest":
        seed = int(data.get("seed", 0))
        domains = [
            Domain(CorruptionKind(d["kind"]), int(d["severity"]),
                   int(d.get("seed", domain_seed(seed, i))), d["path"])
            for i, d in enumerate(data["domains"])
        ]
        out = cls(data["source"], data.get("profile", "isprs"), seed, domains)
        out.validate()
        return out

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "BenchmarkManifest":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def domain_seed(manifest_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([manifest_seed, index]).generate_state(1)[0])


def default_manifest(source: str, profile="isprs", severity=5, seed=0,
                     order=DEFAULT_ORDER) -> BenchmarkManifest:
    domains = [
        Domain(CorruptionKind(kind), severity, domain_seed(seed, i),
               f"{i:02d}_{CorruptionKind(kind).value}_s{severity}.xyzl")
        for i, kind in enumerate(order)
    ]
    return BenchmarkManifest(source, profile, seed, domains)


def build_benchmark(cloud, manifest: BenchmarkManifest, out_dir=None):
    """Corrupt the clean cloud once per domain; optionally write files + manifest.json."""
    manifest.validate()
    clouds = [
        corrupt(cloud, d.kind, d.severity, manifest.profile, np.random.default_rng(d.seed))
        for d in manifest.domains
    ]
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for d, c in zip(manifest.domains, clouds):
            save_cloud(c, out_dir / d.path)
        manifest.save(out_dir / "manifest.json")
    return clouds
