import json
from fractions import Fraction

import numpy as np
import pytest

from apcotta.cloud import IGNORE, PointCloud, load_cloud
from apcotta.corrupt import (
    DEFAULT_ORDER,
    SEVERITY_TABLE,
    BenchmarkManifest,
    CorruptionError,
    CorruptionKind,
    Domain,
    build_benchmark,
    corrupt,
    cutout,
    default_manifest,
    density_decrease,
    floor_count,
    gaussian_noise,
    impulse_noise,
    occupied_cells,
    space_noise,
    sunlight,
    uniform_noise,
)


def cloud_of(n, seed=0, extent=20.0):
    rng = np.random.default_rng(seed)
    return PointCloud(rng.uniform(0, extent, (n, 3)), rng.random((n, 1)),
                      rng.integers(0, 5, n), 5)


def moved(before, after):
    return np.any(before.positions != after.positions, axis=1)


def rng(seed=0):
    return np.random.default_rng(seed)


def test_kinds_in_table_order():
    assert [k.value for k in DEFAULT_ORDER] == [
        "sunlight", "space", "uniform", "density", "cutout", "impulse", "gaussian"]
    assert len(CorruptionKind) == 7


@pytest.mark.parametrize("profile", ["isprs", "h3d"])
def test_severity_monotone(profile):
    for key, values in SEVERITY_TABLE[profile].items():
        if isinstance(values, tuple):
            as_float = [Fraction(v) if isinstance(v, str) else v for v in values]
            assert as_float == sorted(as_float), key


def test_floor_rule_is_exact():
    assert floor_count("0.301", 1000) == 301
    assert floor_count("0.0602", 10000) == 602
    assert floor_count("11/100", 3000) == 330
    assert floor_count("0.007", 100) == 0


class TestSunlight:
    def test_isprs_severity5_counts(self):
        c = cloud_of(1000)
        out = sunlight(c, 5, "isprs", rng())
        assert moved(c, out).sum() == 35
        np.testing.assert_array_equal(out.labels, c.labels)
        np.testing.assert_array_equal(out.features, c.features)

    def test_severity_zero_identity(self):
        c = cloud_of(100)
        np.testing.assert_array_equal(sunlight(c, 0, "isprs", rng()).positions, c.positions)

    def test_sigma_monte_carlo(self):
        c = PointCloud(np.zeros((100_000, 3)), np.zeros((100_000, 1)))
        # severity 5 moves 3.5%; draw repeatedly until 1e5 offsets are collected
        offsets = []
        gen = rng(3)
        while sum(len(o) for o in offsets) < 100_000:
            out = sunlight(c, 5, "isprs", gen)
            offsets.append(out.positions[moved(c, out)].ravel())
        sample = np.concatenate(offsets)[:100_000]
        assert abs(sample.std() / 2.0 - 1) < 0.05


class TestDensity:
    def test_isprs_severity1(self):
        c = cloud_of(10_000)
        out = density_decrease(c, 1, "isprs", rng())
        assert len(out) == 9398

    def test_h3d_severity5(self):
        assert len(density_decrease(cloud_of(10_000), 5, "h3d", rng())) == 900

    def test_survivors_bit_identical(self):
        c = cloud_of(500)
        out = density_decrease(c, 3, "isprs", rng(1))
        rows = {tuple(p) for p in c.positions}
        assert all(tuple(p) in rows for p in out.positions)

    def test_tiny_cloud_identity(self):
        c = cloud_of(10)
        assert len(density_decrease(c, 1, "isprs", rng())) == 10

    def test_never_empties_small_clouds(self):
        # every tabulated ratio is < 1, so the floor rule always leaves a survivor
        for n in range(1, 60):
            assert len(density_decrease(cloud_of(n), 5, "h3d", rng(n))) >= 1


class TestCutout:
    def test_isprs_n1000_severity1(self):
        c = cloud_of(1000)
        assert len(cutout(c, 1, "isprs", rng())) == 1000 - 60

    def test_severity5_ten_groups(self):
        c = cloud_of(2000)
        assert len(cutout(c, 5, "isprs", rng())) == 2000 - 10 * 60

    def test_groups_are_neighborhoods(self):
        c = cloud_of(1000, extent=100.0)
        out = cutout(c, 1, "h3d", rng(5))
        gone = c.positions[~np.isin(np.arange(1000), _survivor_index(c, out))]
        assert len(gone) == 20
        # removed points form two tight clumps
        from scipy.cluster.hierarchy import fcluster, linkage
        assert len(set(fcluster(linkage(gone, "single"), 2, "maxclust"))) == 2

    def test_g_one_removes_g_points(self):
        c = cloud_of(20)
        assert len(cutout(c, 3, "isprs", rng())) == 15

    def test_exhausted(self):
        with pytest.raises(CorruptionError):
            cutout(cloud_of(3), 5, "isprs", rng())


def _survivor_index(before, after):
    lookup = {tuple(p): i for i, p in enumerate(before.positions)}
    return np.array([lookup[tuple(p)] for p in after.positions])


class TestNoise:
    def test_gaussian_severity5_std(self):
        c = PointCloud(np.zeros((100_000, 3)), np.zeros((100_000, 1)))
        d = gaussian_noise(c, 5, "isprs", rng(2)).positions
        assert abs(d.std(axis=0) / 0.1001 - 1).max() < 0.05
        se = 0.1001 / np.sqrt(100_000)
        assert np.all(np.abs(d.mean(axis=0)) < 3 * se)

    def test_gaussian_keeps_count_and_labels(self):
        c = cloud_of(300)
        out = gaussian_noise(c, 2, "h3d", rng())
        assert len(out) == 300
        np.testing.assert_array_equal(out.labels, c.labels)

    def test_uniform_bound_and_variance(self):
        c = PointCloud(np.zeros((100_000, 3)), np.zeros((100_000, 1)))
        d = uniform_noise(c, 3, "isprs", rng(4)).positions
        assert np.abs(d).max() <= 0.084
        assert abs(d.var(axis=0) / (0.084 ** 2 / 3) - 1).max() < 0.05

    def test_uniform_zero(self):
        c = cloud_of(50)
        np.testing.assert_array_equal(uniform_noise(c, 0, "isprs", rng()).positions, c.positions)

    def test_impulse_counts_and_magnitude(self):
        c = cloud_of(3000)
        out = impulse_noise(c, 5, "isprs", rng())
        hit = moved(c, out)
        assert hit.sum() == 330
        delta = out.positions[hit] - c.positions[hit]
        np.testing.assert_allclose(np.abs(delta), 0.1, rtol=0, atol=1e-12)
        np.testing.assert_array_equal(out.positions[~hit], c.positions[~hit])

    def test_impulse_tiny_identity(self):
        c = cloud_of(20)
        np.testing.assert_array_equal(impulse_noise(c, 1, "isprs", rng()).positions, c.positions)


class TestSpace:
    def test_single_cell(self):
        c = PointCloud(np.array([[1.0, 1.0, 1.0]]), np.ones((1, 1)), np.array([2]), 5)
        out = space_noise(c, 1, "isprs", rng())
        assert len(out) == 6
        assert np.all(out.labels[1:] == IGNORE)
        assert np.all(out.features[1:] == 0)
        np.testing.assert_array_equal(out.positions[0], c.positions[0])

    def test_occupancy_oracle(self):
        c = cloud_of(400, seed=8)
        out = space_noise(c, 1, "isprs", rng())
        # independent count of occupied cells of the 10^3 bounding-box split
        lo, hi = c.positions.min(0), c.positions.max(0)
        cell = np.minimum(((c.positions - lo) / (hi - lo) * 10).astype(int), 9)
        occupied = len({tuple(r) for r in cell})
        assert len(out) - len(c) == 5 * occupied
        np.testing.assert_array_equal(out.positions[:400], c.positions)

    def test_points_land_in_occupied_cells(self):
        c = cloud_of(50, seed=9)
        out = space_noise(c, 2, "h3d", rng())
        cells, lo, size = occupied_cells(c.positions)
        added = np.minimum(np.floor((out.positions[50:] - lo) / size), 9).astype(int)
        occupied = {tuple(r) for r in cells}
        assert all(tuple(r) in occupied for r in added)

    def test_zero_identity(self):
        c = cloud_of(10)
        assert len(space_noise(c, 0, "isprs", rng())) == 10


@pytest.mark.parametrize("kind", list(CorruptionKind))
def test_deterministic(kind):
    c = cloud_of(600)
    a = corrupt(c, kind, 4, "isprs", rng(7))
    b = corrupt(c, kind, 4, "isprs", rng(7))
    np.testing.assert_array_equal(a.positions, b.positions)
    np.testing.assert_array_equal(a.labels, b.labels)


@pytest.mark.parametrize("kind", list(CorruptionKind))
def test_surviving_labels_unchanged(kind):
    c = cloud_of(600)
    c.features[:, 0] = np.arange(600)  # identity tag that no corruption alters
    out = corrupt(c, kind, 5, "isprs", rng(1))
    orig = out.labels != IGNORE
    tags = out.features[orig, 0].astype(int)
    np.testing.assert_array_equal(out.labels[orig], c.labels[tags])


class TestManifest:
    def test_default_seven_files(self, tmp_path):
        c = cloud_of(800)
        m = default_manifest("clean.xyzl")
        clouds = build_benchmark(c, m, tmp_path)
        assert len(clouds) == 7
        data = json.loads((tmp_path / "manifest.json").read_text())
        assert [d["kind"] for d in data["domains"]] == [k.value for k in DEFAULT_ORDER]
        assert all(d["severity"] == 5 for d in data["domains"])
        for d, cl in zip(data["domains"], clouds):
            back = load_cloud(tmp_path / d["path"])
            assert len(back) == len(cl)

    def test_identical_bytes(self, tmp_path):
        c = cloud_of(300)
        build_benchmark(c, default_manifest("x"), tmp_path / "a")
        build_benchmark(c, default_manifest("x"), tmp_path / "b")
        for f in sorted((tmp_path / "a").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()

    def test_domains_are_not_chained(self):
        c = cloud_of(500)
        m = default_manifest("x")
        clouds = build_benchmark(c, m)
        d = m.domains[3]  # density
        alone = corrupt(c, d.kind, d.severity, m.profile, rng(d.seed))
        np.testing.assert_array_equal(clouds[3].positions, alone.positions)

    def test_duplicate_paths_rejected(self):
        m = BenchmarkManifest("x", domains=[Domain(CorruptionKind.CUTOUT, 5, 1, "a"),
                                            Domain(CorruptionKind.DENSITY, 5, 2, "a")])
        with pytest.raises(CorruptionError, match="duplicate"):
            m.validate()

    def test_severity_range(self):
        m = BenchmarkManifest("x", domains=[Domain(CorruptionKind.CUTOUT, 6, 1, "a")])
        with pytest.raises(CorruptionError):
            m.validate()

    def test_json_round_trip(self, tmp_path):
        m = default_manifest("clean.xyzl", profile="h3d", severity=3, seed=9)
        m.save(tmp_path / "m.json")
        back = BenchmarkManifest.load(tmp_path / "m.json")
        assert back == m

    def test_unknown_profile(self):
        with pytest.raises(CorruptionError):
            corrupt(cloud_of(10), "gaussian", 1, "kitti", rng())
