"""Point-cloud containers, XYZL text I/O, grid subsampling, sub-cloud batching and k-NN."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

IGNORE = 255


class CloudFormatError(ValueError):
    """Malformed XYZL file or invalid cloud contents."""


class EmptySphereError(ValueError):
    pass


@dataclass
class PointCloud:
    positions: np.ndarray
    features: np.ndarray
    labels: np.ndarray | None = None
    class_count: int = 2

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats[:, None]
        self.features = feats
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
        self.validate()

    def validate(self):
        pos = self.positions
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise CloudFormatError(f"positions must be N x 3, got {pos.shape}")
        n = pos.shape[0]
        if n < 1:
            raise CloudFormatError("no points")
        if not np.isfinite(pos).all():
            raise CloudFormatError("non-finite coordinates")
        if self.features.shape[0] != n or self.features.shape[1] < 1:
            raise CloudFormatError(f"features must be N x F (F >= 1), got {self.features.shape}")
        if not np.isfinite(self.features).all():
            raise CloudFormatError("non-finite features")
        if self.class_count < 2:
            raise CloudFormatError("class_count must be >= 2")
        if self.labels is not None:
            if self.labels.shape != (n,):
                raise CloudFormatError(f"labels must have shape ({n},), got {self.labels.shape}")
            scored = self.labels[self.labels != IGNORE]
            if scored.size and (scored.min() < 0 or scored.max() >= self.class_count):
                raise CloudFormatError(
                    f"label out of range for class_count={self.class_count}")

    def __len__(self):
        return self.positions.shape[0]

    @property
    def feature_count(self) -> int:
        return self.features.shape[1]

    def subset(self, index) -> "PointCloud":
        return PointCloud(
            self.positions[index],
            self.features[index],
            None if self.labels is None else self.labels[index],
            self.class_count,
        )


@dataclass
class SubCloudBatch:
    """B sub-clouds of N points each, positions recentered on their sphere centers.

    ``labels`` is filled only for evaluation bookkeeping; adaptation code reads
    ``positions`` and ``features`` and never touches it.
    """

    positions: np.ndarray  # B x N x 3
    features: np.ndarray  # B x N x F
    centers: np.ndarray  # B x 3
    source_indices: np.ndarray  # B x N
    labels: np.ndarray | None = field(default=None, repr=False)

    @property
    def shape(self):
        return self.positions.shape[:2]

    def unlabeled(self) -> "SubCloudBatch":
        return SubCloudBatch(self.positions, self.features, self.centers, self.source_indices)


# ---------------------------------------------------------------------------
# XYZL text format


def _parse_header(line: str) -> dict:
    fields = {}
    for token in line.lstrip("#").split()[1:]:
        if "=" not in token:
            raise CloudFormatError(f"bad header token {token!r}")
        key, value = token.split("=", 1)
        fields[key] = int(value)
    return fields


def load_cloud(path, class_count: int | None = None) -> PointCloud:
    """Read an XYZL file.

    Rows are ``x y z f1 .. fF [label]``. Without a header, the last column is
    taken as the label if it is integral on every row and there are more than
    four columns.
    """
    header = {}
    rows = []
    line_numbers = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                if line.startswith("# xyzl") or line.startswith("#xyzl"):
                    header = _parse_header(line.replace("#xyzl", "# xyzl"))
                continue
            try:
                values = [float(tok) for tok in line.split()]
            except ValueError as exc:
                raise CloudFormatError(f"line {lineno}: {exc}") from None
            if not all(np.isfinite(values)):
                raise CloudFormatError(f"line {lineno}: non-finite value")
            rows.append(values)
            line_numbers.append(lineno)
    if not rows:
        raise CloudFormatError("no points")

    widths = {len(r) for r in rows}
    if len(widths) != 1:
        first_bad = next(ln for r, ln in zip(rows, line_numbers) if len(r) != len(rows[0]))
        raise CloudFormatError(f"line {first_bad}: inconsistent column count")
    width = widths.pop()
    data = np.asarray(rows, dtype=np.float64)

    if "labels" in header:
        has_labels = bool(header["labels"])
    else:
        has_labels = width > 4 and np.all(data[:, -1] == np.round(data[:, -1]))
    n_feat = width - 3 - int(has_labels)
    if "F" in header and header["F"] != n_feat:
        raise CloudFormatError(f"header declares F={header['F']} but rows carry {n_feat} features")
    if n_feat < 1:
        raise CloudFormatError(f"line {line_numbers[0]}: expected at least 4 columns")

    labels = None
    if has_labels:
        raw_labels = data[:, -1]
        if np.any(raw_labels != np.round(raw_labels)) or np.any(raw_labels < 0):
            bad = line_numbers[int(np.argmax((raw_labels != np.round(raw_labels)) | (raw_labels < 0)))]
            raise CloudFormatError(f"line {bad}: label must be a non-negative integer")
        labels = raw_labels.astype(np.int64)

    if class_count is None:
        class_count = header.get("C")
    if class_count is None:
        scored = labels[labels != IGNORE] if labels is not None else np.empty(0, np.int64)
        class_count = max(int(scored.max()) + 1 if scored.size else 2, 2)
    if labels is not None:
        bad = (labels != IGNORE) & (labels >= class_count)
        if bad.any():
            i = int(np.argmax(bad))
            raise CloudFormatError(
                f"line {line_numbers[i]}: label {labels[i]} >= class_count {class_count}")

    return PointCloud(data[:, :3], data[:, 3:3 + n_feat], labels, int(class_count))


def save_cloud(cloud: PointCloud, path) -> None:
    cloud.validate()
    has_labels = cloud.labels is not None
    path = Path(path)
    lines = [f"# xyzl C={cloud.class_count} F={cloud.feature_count} labels={int(has_labels)}"]
    body = np.hstack([cloud.positions, cloud.features])
    for i, row in enumerate(body):
        text = " ".join(f"{v:.9g}" for v in row)
        if has_labels:
            text += f" {int(cloud.labels[i])}"
        lines.append(text)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Geometry helpers


def grid_subsample(cloud: PointCloud, cell: float) -> PointCloud:
    """Keep one point per occupied grid cell.

    The grid is anchored at the lattice cell holding the cloud's minimum
    corner, i.e. on multiples of ``cell``. That anchor survives subsampling,
    which keeps a second pass the identity. The survivor in each
    cell is the member closest to the centroid of the cell's members, lowest
    index on ties. Output preserves the original point order.
    """
    if not cell > 0:
        raise ValueError("cell must be > 0")
    pos = cloud.positions
    keys = np.floor(pos / cell).astype(np.int64)
    _, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    n_cells = inverse.max() + 1
    counts = np.bincount(inverse, minlength=n_cells).astype(np.float64)
    centroids = np.stack(
        [np.bincount(inverse, weights=pos[:, d], minlength=n_cells) for d in range(3)], axis=1
    ) / counts[:, None]
    dist = np.sum((pos - centroids[inverse]) ** 2, axis=1)
    # sort by (cell, distance, index); the first entry of each cell wins
    order = np.lexsort((np.arange(len(pos)), dist, inverse))
    first = np.ones(len(order), dtype=bool)
    first[1:] = inverse[order][1:] != inverse[order][:-1]
    keep = np.sort(order[first])
    return cloud.subset(keep)


def knn(positions, k: int) -> np.ndarray:
    """Exact k nearest neighbours (self excluded), ties broken by lower index.

    Returns an ``N x k`` integer array ordered by increasing distance.
    """
    pos = np.asarray(positions, dtype=np.float64)
    n = pos.shape[0]
    if k >= n:
        raise ValueError(f"k={k} must be smaller than the number of points ({n})")
    if k < 1:
        raise ValueError("k must be >= 1")
    kk = min(n, k + 2)
    dist, idx = cKDTree(pos).query(pos, k=kk)
    dist = dist.reshape(n, kk)
    idx = idx.reshape(n, kk)
    own = idx == np.arange(n)[:, None]
    # push self to the end, then order by (distance, index)
    dist = np.where(own, np.inf, dist)
    order = np.lexsort((idx, dist), axis=-1)
    idx = np.take_along_axis(idx, order, axis=1)
    dist = np.take_along_axis(dist, order, axis=1)
    out = idx[:, :k].copy()
    if kk > k:
        # rows whose k-th distance is tied with a candidate beyond the cut
        # may be missing a lower-index point the tree did not return
        tied = np.flatnonzero(dist[:, k - 1] == dist[:, k])
        if n == kk:
            tied = np.empty(0, dtype=np.int64)
        for r in tied:
            d = np.sum((pos - pos[r]) ** 2, axis=1)
            d[r] = np.inf
            out[r] = np.lexsort((np.arange(n), d))[:k]
    return out


def knn_brute_force(positions, k: int) -> np.ndarray:
    """All-pairs reference for :func:`knn`."""
    pos = np.asarray(positions, dtype=np.float64)
    n = len(pos)
    if k >= n:
        raise ValueError(f"k={k} must be smaller than the number of points ({n})")
    out = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        d = np.sqrt(np.sum((pos - pos[i]) ** 2, axis=1))
        d[i] = np.inf
        out[i] = np.lexsort((np.arange(n), d))[:k]
    return out


def sample_sphere(cloud: PointCloud, center, radius: float, n_points: int, rng):
    """Draw ``n_points`` points from the ball around ``center``.

    Returns ``(positions, features, indices)`` with positions recentered.
    Sampling is without replacement when the ball holds enough points and
    with replacement otherwise.
    """
    if not radius > 0:
        raise ValueError("radius must be > 0")
    center = np.asarray(center, dtype=np.float64)
    d2 = np.sum((cloud.positions - center) ** 2, axis=1)
    inside = np.flatnonzero(d2 <= radius * radius)
    if inside.size == 0:
        raise EmptySphereError("empty sphere")
    replace = inside.size < n_points
    idx = rng.choice(inside, size=n_points, replace=replace)
    return cloud.positions[idx] - center, cloud.features[idx], idx


def make_batch(cloud: PointCloud, b: int, n_points: int, radius: float, rng,
               centers=None) -> SubCloudBatch:
    if centers is None:
        centers = cloud.positions[rng.integers(0, len(cloud), size=b)]
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    pos, feat, idx = [], [], []
    for c in centers:
        p, f, i = sample_sphere(cloud, c, radius, n_points, rng)
        pos.append(p)
        feat.append(f)
        idx.append(i)
    idx = np.stack(idx)
    labels = None if cloud.labels is None else cloud.labels[idx]
    return SubCloudBatch(np.stack(pos), np.stack(feat), centers, idx, labels)
