"""scikit-learn style wrappers around the functional core.

``X`` is either a :class:`PointCloud` or an ``(N, 3 + F)`` array of
``x, y, z, features...`` rows; ``y`` holds per-point labels. Constructor
arguments are stored untouched so ``get_params`` / ``set_params`` / ``clone``
behave as in scikit-learn; fitted state lives in attributes ending in ``_``.
"""
from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .adapt import AdaptConfig, AdaptState, canonical_method, step
from .cloud import IGNORE, PointCloud, SubCloudBatch
from .corrupt import CorruptionKind, corrupt
from .metrics import ConfusionMatrix, miou, overall_accuracy
from .net import RUNNING_STATS, BATCH_STATS, NetSpec, Network
from .train import BatchGeometry, PretrainConfig, predict_cloud, pretrain


def as_cloud(X, y=None, class_count=None) -> PointCloud:
    """Coerce ``X`` (and optional labels ``y``) into a validated PointCloud."""
    if isinstance(X, PointCloud):
        if y is None:
            return X
        X = np.hstack([X.positions, X.features])
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] < 4:
        raise ValueError(f"expected an (N, 3 + F) array with F >= 1, got shape {X.shape}")
    labels = None
    if y is not None:
        labels = np.asarray(y)
        if labels.shape != (len(X),):
            raise ValueError(f"y has shape {labels.shape}, expected ({len(X)},)")
        labels = labels.astype(np.int64)
        if class_count is None:
            valid = labels[labels != IGNORE]
            class_count = int(valid.max()) + 1 if valid.size else 1
    cloud = PointCloud(X[:, :3].copy(), X[:, 3:].copy(), labels, class_count or 1)
    cloud.validate()
    return cloud


class PointSegmenter(ClassifierMixin, BaseEstimator):
    """Per-point segmentation network trained from scratch with cross-entropy."""

    def __init__(self, widths=(32, 64, 64, 128, 64), k=16, epochs=10, steps_per_epoch=30,
                 lr=0.05, momentum=0.9, b=4, n_points=2048, radius=10.0, dtype="float32",
                 random_state=0):
        self.widths = widths
        self.k = k
        self.epochs = epochs
        self.steps_per_epoch = steps_per_epoch
        self.lr = lr
        self.momentum = momentum
        self.b = b
        self.n_points = n_points
        self.radius = radius
        self.dtype = dtype
        self.random_state = random_state

    @property
    def geometry_(self):
        return BatchGeometry(self.b, self.n_points, self.radius)

    def fit(self, X, y=None):
        cloud = as_cloud(X, y)
        if cloud.labels is None:
            raise ValueError("fit needs labels (pass y or a labeled PointCloud)")
        spec = NetSpec(in_features=cloud.feature_count, class_count=cloud.class_count,
                       widths=tuple(self.widths), k=self.k)
        self.network_ = Network(spec, seed=self.random_state, dtype=np.dtype(self.dtype))
        cfg = PretrainConfig(epochs=self.epochs, steps_per_epoch=self.steps_per_epoch, lr=self.lr,
                             momentum=self.momentum, geometry=self.geometry_)
        _, self.loss_curve_ = pretrain(self.network_, cloud, cfg, rng=self.random_state)
        self.classes_ = np.arange(cloud.class_count)
        self.n_features_in_ = 3 + cloud.feature_count
        return self

    @classmethod
    def from_network(cls, net: Network, **params):
        """Wrap an already trained network (e.g. a loaded checkpoint)."""
        est = cls(widths=tuple(net.spec.widths), k=net.spec.k, dtype=np.dtype(net.dtype).name,
                  **params)
        est.network_ = net
        est.classes_ = np.arange(net.spec.class_count)
        est.n_features_in_ = 3 + net.spec.in_features
        est.loss_curve_ = []
        return est

    def predict(self, X):
        check_is_fitted(self, "network_")
        cloud = as_cloud(X, class_count=len(self.classes_))
        return predict_cloud(self.network_, cloud, self.geometry_, seed=self.random_state)

    def score(self, X, y=None, sample_weight=None):
        """Mean IoU over classes present in truth or prediction (IGNORE excluded)."""
        cloud = as_cloud(X, y, class_count=len(self.classes_) if hasattr(self, "classes_") else None)
        if cloud.labels is None:
            raise ValueError("score needs labels")
        cm = ConfusionMatrix(len(self.classes_)).update(cloud.labels, self.predict(cloud))
        return miou(cm)[1]


class CloudCorruptor(TransformerMixin, BaseEstimator):
    """Apply one corruption generator; stateless apart from the seed."""

    def __init__(self, kind="gaussian", severity=5, profile="isprs", random_state=0):
        self.kind = kind
        self.severity = severity
        self.profile = profile
        self.random_state = random_state

    def fit(self, X=None, y=None):
        self.kind_ = CorruptionKind(self.kind)
        return self

    def transform(self, X):
        """Return the corrupted PointCloud (point counts may change)."""
        kind = CorruptionKind(self.kind)
        return corrupt(as_cloud(X), kind, self.severity, self.profile,
                       np.random.default_rng(self.random_state))


class ContinualAdapter(BaseEstimator):
    """Stream adaptation of a trained segmenter, one batch per ``partial_fit``.

    ``fit(segmenter)`` snapshots the source weights into a fresh adaptation
    state; each ``partial_fit(batch)`` predicts and then updates, the order
    used in stream evaluation. ``predict`` does not touch the state.
    """

    def __init__(self, method="apcotta", S0=0.001, tau=0.8, alpha=0.999, p=0.01, T=50.0,
                 lr=1e-2, momentum=0.98, dstl=True, ebcl=True, rpi=True, random_state=0):
        self.method = method
        self.S0 = S0
        self.tau = tau
        self.alpha = alpha
        self.p = p
        self.T = T
        self.lr = lr
        self.momentum = momentum
        self.dstl = dstl
        self.ebcl = ebcl
        self.rpi = rpi
        self.random_state = random_state

    def _config(self) -> AdaptConfig:
        return replace(AdaptConfig(), S0=self.S0, tau=self.tau, alpha=self.alpha, p=self.p,
                       T=self.T, lr=self.lr, momentum=self.momentum, dstl=self.dstl,
                       ebcl=self.ebcl, rpi=self.rpi)

    def fit(self, segmenter, y=None):
        net = segmenter.network_ if hasattr(segmenter, "network_") else segmenter
        if not isinstance(net, Network):
            raise TypeError("fit expects a fitted PointSegmenter or a Network")
        self.method_ = canonical_method(self.method)
        self.config_ = self._config()
        self.state_ = AdaptState(net.clone(), seed=self.random_state)
        self.n_steps_ = 0
        self.diagnostics_ = []
        return self

    def partial_fit(self, batch: SubCloudBatch, y=None, new_domain=False):
        check_is_fitted(self, "state_")
        if y is not None:
            raise ValueError("test-time adaptation is unsupervised; labels are not accepted")
        preds, diag = step(self.state_, batch.unlabeled(), self.method_, self.config_,
                           new_domain=new_domain)
        self.last_predictions_ = preds
        self.diagnostics_.append(diag)
        self.n_steps_ += 1
        return self

    def adapt_predict(self, batch: SubCloudBatch, new_domain=False):
        """Predict-then-update on one batch; returns flat per-point labels."""
        return self.partial_fit(batch, new_domain=new_domain).last_predictions_

    def predict(self, batch: SubCloudBatch):
        check_is_fitted(self, "state_")
        mode = RUNNING_STATS if self.method_ == "source" else BATCH_STATS
        logits, _ = self.state_.net.forward(batch.unlabeled(), mode)
        return np.argmax(logits, axis=1)

    def reset(self):
        check_is_fitted(self, "state_")
        self.state_.reset()
        return self


def stream_scores(truths, preds, class_count):
    """``(OA, mIoU)`` for flat label arrays; IGNORE truths are skipped."""
    cm = ConfusionMatrix(class_count).update(np.ravel(truths), np.ravel(preds))
    return overall_accuracy(cm), miou(cm)[1]


__all__ = ["CloudCorruptor", "ContinualAdapter", "PointSegmenter", "as_cloud", "stream_scores"]
