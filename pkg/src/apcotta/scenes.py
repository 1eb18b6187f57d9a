"""Procedural labeled airborne-LiDAR-like scenes (ground, building, tree, car, pole)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cloud import PointCloud

CLASS_NAMES = ("ground", "building", "tree", "car", "pole")
GROUND, BUILDING, TREE, CAR, POLE = range(5)


@dataclass
class SyntheticSceneSpec:
    extent: float = 100.0
    # points per square metre of sampled surface (poles: per metre of height)
    densities: dict = field(default_factory=lambda: {
        "ground": 12.0, "building": 10.0, "tree": 8.0, "car": 14.0, "pole": 30.0})
    buildings: int = 8
    trees: int = 30
    cars: int = 16
    poles: int = 14
    # mean intensity per class; classes overlap through intensity_noise
    intensity: dict = field(default_factory=lambda: {
        "ground": 0.40, "building": 0.50, "tree": 0.35, "car": 0.55, "pole": 0.45})
    intensity_noise: float = 0.15
    terrain_amplitude: float = 1.0

    def validate(self):
        if not self.extent > 0:
            raise ValueError("extent must be > 0")
        for name in CLASS_NAMES:
            if self.densities.get(name, 0) <= 0:
                raise ValueError(f"density for {name} must be > 0")
        if min(self.buildings, self.trees, self.cars, self.poles) < 0:
            raise ValueError("object counts must be >= 0")


def _terrain(xy, extent, amplitude, phases):
    u = 2 * np.pi * xy / extent
    return amplitude * (
        0.6 * np.sin(u[:, 0] + phases[0]) * np.cos(0.7 * u[:, 1] + phases[1])
        + 0.4 * np.sin(1.9 * u[:, 1] + phases[2]))


def _area_count(area, density, rng):
    # stochastic rounding keeps the expected count exact
    base = area * density
    return int(base) + int(rng.random() < base - int(base))


def _box_surface(rng, lo, hi, density, top=True, sides=True):
    """Sample the roof and four walls of an axis-aligned box."""
    (x0, y0, z0), (x1, y1, z1) = lo, hi
    pts = []
    if top:
        n = _area_count((x1 - x0) * (y1 - y0), density, rng)
        pts.append(np.column_stack([rng.uniform(x0, x1, n), rng.uniform(y0, y1, n), np.full(n, z1)]))
    if sides:
        h = z1 - z0
        for fixed, a0, a1, axis in ((x0, y0, y1, 0), (x1, y0, y1, 0), (y0, x0, x1, 1), (y1, x0, x1, 1)):
            # airborne scans see facades sparsely
            n = _area_count((a1 - a0) * h, 0.35 * density, rng)
            a = rng.uniform(a0, a1, n)
            z = rng.uniform(z0, z1, n)
            f = np.full(n, fixed)
            pts.append(np.column_stack([f, a, z] if axis == 0 else [a, f, z]))
    return np.vstack(pts) if pts else np.empty((0, 3))


def _footprint_free(rng, extent, size, taken, margin=1.5, tries=200):
    for _ in range(tries):
        w, l = size
        x0 = rng.uniform(2, extent - w - 2)
        y0 = rng.uniform(2, extent - l - 2)
        box = (x0 - margin, y0 - margin, x0 + w + margin, y0 + l + margin)
        if all(box[2] < t[0] or box[0] > t[2] or box[3] < t[1] or box[1] > t[3] for t in taken):
            taken.append(box)
            return x0, y0
    return None


def synth_scene(spec: SyntheticSceneSpec = None, seed: int = 0) -> PointCloud:
    """Generate a labeled scene; deterministic for a given (spec, seed)."""
    spec = spec or SyntheticSceneSpec()
    spec.validate()
    rng = np.random.default_rng(seed)
    ext = spec.extent
    dens = spec.densities
    phases = rng.uniform(0, 2 * np.pi, 3)

    def ground_z(xy):
        return _terrain(np.atleast_2d(xy), ext, spec.terrain_amplitude, phases)

    parts, labels = [], []
    taken = []
    roofs = []

    for _ in range(spec.buildings):
        size = rng.uniform(8, 20, 2)
        spot = _footprint_free(rng, ext, size, taken)
        if spot is None:
            continue
        x0, y0 = spot
        base = float(ground_z([[x0 + size[0] / 2, y0 + size[1] / 2]])[0]) - 0.5
        height = rng.uniform(4, 15)
        pts = _box_surface(rng, (x0, y0, base), (x0 + size[0], y0 + size[1], base + height),
                           dens["building"])
        roofs.append((x0, y0, x0 + size[0], y0 + size[1]))
        parts.append(pts)
        labels.append(np.full(len(pts), BUILDING))

    for _ in range(spec.trees):
        r = rng.uniform(1.5, 3.5)
        spot = _footprint_free(rng, ext, (2 * r, 2 * r), taken, margin=0.5)
        if spot is None:
            continue
        cx, cy = spot[0] + r, spot[1] + r
        gz = float(ground_z([[cx, cy]])[0])
        trunk_h = rng.uniform(1.5, 3.0)
        rz = rng.uniform(2.0, 4.0)
        # crown: ellipsoid shell, upper part visible from above
        shell_area = 4 * np.pi * ((r * r * 2 + r * rz) / 3)
        n = _area_count(shell_area, dens["tree"], rng)
        theta = rng.uniform(0, 2 * np.pi, n)
        cosphi = rng.uniform(-0.3, 1.0, n)
        sinphi = np.sqrt(1 - cosphi ** 2)
        shell = np.column_stack([cx + r * sinphi * np.cos(theta), cy + r * sinphi * np.sin(theta),
                                 gz + trunk_h + rz + rz * cosphi])
        shell += rng.normal(0, 0.15, shell.shape)
        nt = _area_count(2 * np.pi * 0.2 * trunk_h, dens["tree"], rng)
        a = rng.uniform(0, 2 * np.pi, nt)
        trunk = np.column_stack([cx + 0.2 * np.cos(a), cy + 0.2 * np.sin(a),
                                 gz + rng.uniform(0, trunk_h, nt)])
        pts = np.vstack([shell, trunk])
        parts.append(pts)
        labels.append(np.full(len(pts), TREE))

    for _ in range(spec.cars):
        spot = _footprint_free(rng, ext, (4.5, 4.5), taken, margin=0.3)
        if spot is None:
            continue
        cx, cy = spot[0] + 2.25, spot[1] + 2.25
        gz = float(ground_z([[cx, cy]])[0])
        local = _box_surface(rng, (-2.25, -0.9, 0.0), (2.25, 0.9, 1.5), dens["car"])
        ang = rng.uniform(0, np.pi)
        c, s = np.cos(ang), np.sin(ang)
        pts = np.column_stack([cx + c * local[:, 0] - s * local[:, 1],
                               cy + s * local[:, 0] + c * local[:, 1], gz + local[:, 2]])
        parts.append(pts)
        labels.append(np.full(len(pts), CAR))

    for _ in range(spec.poles):
        spot = _footprint_free(rng, ext, (0.4, 0.4), taken, margin=1.0)
        if spot is None:
            continue
        cx, cy = spot[0] + 0.2, spot[1] + 0.2
        gz = float(ground_z([[cx, cy]])[0])
        h = rng.uniform(5, 10)
        n = max(1, int(round(h * dens["pole"])))
        a = rng.uniform(0, 2 * np.pi, n)
        pts = np.column_stack([cx + 0.1 * np.cos(a), cy + 0.1 * np.sin(a), gz + rng.uniform(0, h, n)])
        parts.append(pts)
        labels.append(np.full(len(pts), POLE))

    # ground: jittered grid height field, hidden under roofs
    step = 1.0 / np.sqrt(dens["ground"])
    g = np.arange(0, ext, step) + step / 2
    gx, gy = np.meshgrid(g, g, indexing="ij")
    xy = np.column_stack([gx.ravel(), gy.ravel()]) + rng.uniform(-step / 2, step / 2, (gx.size, 2))
    xy = np.clip(xy, 0, ext)
    visible = np.ones(len(xy), dtype=bool)
    for x0, y0, x1, y1 in roofs:
        visible &= ~((xy[:, 0] >= x0) & (xy[:, 0] <= x1) & (xy[:, 1] >= y0) & (xy[:, 1] <= y1))
    xy = xy[visible]
    ground = np.column_stack([xy, ground_z(xy) + rng.normal(0, 0.03, len(xy))])
    parts.insert(0, ground)
    labels.insert(0, np.full(len(ground), GROUND))

    positions = np.vstack(parts)
    label_arr = np.concatenate(labels).astype(np.int64)
    means = np.array([spec.intensity[name] for name in CLASS_NAMES])
    intensity = np.clip(means[label_arr] + rng.normal(0, spec.intensity_noise, len(label_arr)), 0, 1)
    return PointCloud(positions, intensity[:, None], label_arr, len(CLASS_NAMES))
