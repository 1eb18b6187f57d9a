"""Supervised source pretraining and batch-wise evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .cloud import IGNORE, PointCloud, SubCloudBatch, make_batch
from .metrics import ConfusionMatrix
from .net import BATCH_STATS, RUNNING_STATS, Network, cross_entropy, sgd_step, softmax_with_temperature

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BatchGeometry:
    b: int = 4
    n_points: int = 2048
    radius: float = 10.0


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 10
    steps_per_epoch: int = 30
    lr: float = 0.05
    momentum: float = 0.9
    bn_momentum: float = 0.9
    geometry: BatchGeometry = BatchGeometry()
    rotation_deg: float = 180.0
    scale: tuple = (0.9, 1.1)
    jitter: float = 0.01


def _augment_training(batch: SubCloudBatch, rng, cfg: PretrainConfig) -> SubCloudBatch:
    b = batch.positions.shape[0]
    ang = np.deg2rad(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg, b))
    c, s = np.cos(ang)[:, None], np.sin(ang)[:, None]
    x, y, z = np.moveaxis(batch.positions, -1, 0)
    pos = np.stack([c * x - s * y, s * x + c * y, z], axis=-1)
    pos = pos * rng.uniform(*cfg.scale, size=(b, 1, 1))
    pos = pos + rng.normal(0, cfg.jitter, pos.shape)
    return SubCloudBatch(pos, batch.features, batch.centers, batch.source_indices, batch.labels)


def lr_at(cfg: PretrainConfig, step: int, total: int) -> float:
    """Cosine decay from ``cfg.lr`` to zero."""
    return 0.5 * cfg.lr * (1 + np.cos(np.pi * step / max(total, 1)))


def train_step(net: Network, batch: SubCloudBatch, lr: float, momentum: float,
               bn_momentum: float | None = 0.9):
    logits, trace = net.forward(batch, BATCH_STATS, update_running=bn_momentum)
    loss, grad = cross_entropy(logits, batch.labels.ravel())
    net.backward(trace, grad)
    sgd_step(net, lr, momentum)
    valid = batch.labels.ravel() != IGNORE
    acc = float(np.mean(np.argmax(logits, 1)[valid] == batch.labels.ravel()[valid])) if valid.any() else 0.0
    return loss, acc


def pretrain(net: Network, clouds, cfg: PretrainConfig = PretrainConfig(), rng=None):
    """Cross-entropy training on labeled clouds. Returns ``(net, epoch_losses)``."""
    if isinstance(clouds, PointCloud):
        clouds = [clouds]
    if not any(c.labels is not None and np.any(c.labels != IGNORE) for c in clouds):
        raise ValueError("no labeled points to train on")
    rng = np.random.default_rng(rng)
    geo = cfg.geometry
    total = cfg.epochs * cfg.steps_per_epoch
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        losses = []
        for _ in range(cfg.steps_per_epoch):
            cloud = clouds[rng.integers(len(clouds))]
            batch = make_batch(cloud, geo.b, geo.n_points, geo.radius, rng)
            batch = _augment_training(batch, rng, cfg)
            loss, _ = train_step(net, batch, lr_at(cfg, step, total), cfg.momentum, cfg.bn_momentum)
            losses.append(loss)
            step += 1
        history.append(float(np.mean(losses)))
        log.info("epoch %d loss %.4f", epoch, history[-1])
    return net, history


def evaluation_batches(cloud: PointCloud, geometry: BatchGeometry, count: int, seed: int):
    """The fixed sequence of batches used for scoring a cloud."""
    rng = np.random.default_rng(seed)
    return [make_batch(cloud, geometry.b, geometry.n_points, geometry.radius, rng)
            for _ in range(count)]


def evaluate(net: Network, batches, class_count: int, bn_mode: str = RUNNING_STATS) -> ConfusionMatrix:
    cm = ConfusionMatrix(class_count)
    for batch in batches:
        logits, _ = net.forward(batch.unlabeled(), bn_mode)
        cm.update(batch.labels.ravel(), np.argmax(logits, axis=1))
    return cm


def predict_cloud(net: Network, cloud: PointCloud, geometry: BatchGeometry = BatchGeometry(),
                  seed: int = 0, bn_mode: str = RUNNING_STATS, max_batches: int | None = None):
    """Label every point of ``cloud`` by averaging softmax over covering sub-clouds.

    Centers are drawn from points not yet seen. Points never sampled within
    ``max_batches`` take the label of their nearest scored neighbour.
    """
    from scipy.spatial import cKDTree

    n = len(cloud)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    rng = np.random.default_rng(seed)
    if max_batches is None:
        max_batches = 8 * int(np.ceil(n / (geometry.b * geometry.n_points))) + 8
    scores = np.zeros((n, net.spec.class_count))
    hits = np.zeros(n, dtype=np.int64)
    for _ in range(max_batches):
        todo = np.flatnonzero(hits == 0)
        if todo.size == 0:
            break
        centers = cloud.positions[rng.choice(todo, size=min(geometry.b, todo.size), replace=False)]
        batch = make_batch(cloud, len(centers), geometry.n_points, geometry.radius, rng, centers)
        logits, _ = net.forward(batch.unlabeled(), bn_mode)
        idx = batch.source_indices.ravel()
        np.add.at(scores, idx, softmax_with_temperature(logits))
        np.add.at(hits, idx, 1)
    seen = np.flatnonzero(hits > 0)
    labels = np.argmax(scores, axis=1)
    unseen = np.flatnonzero(hits == 0)
    if unseen.size:
        _, j = cKDTree(cloud.positions[seen]).query(cloud.positions[unseen])
        labels[unseen] = labels[seen[j]]
    return labels
