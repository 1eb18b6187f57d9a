"""Online adaptation steps: APCoTTA and the simple continual TTA baselines.

One APCoTTA step on an unlabeled batch:

1. weak and strong views of the batch;
2. layer scores from the gradient of KL(uniform || softmax(logits / T)) on the
   weak view; layers scoring below ``S0`` become trainable for this step;
3. consistency cross-entropy between weak (target) and strong predictions,
   restricted to points whose weak-view entropy is below ``tau``;
4. momentum SGD on the selected layers;
5. each selected parameter is pulled toward its source value with
   probability ``p``: ``theta <- alpha * theta0 + (1 - alpha) * theta``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .cloud import SubCloudBatch
from .net import (
    BATCH_STATS,
    RUNNING_STATS,
    AugmentParams,
    Network,
    cross_entropy,
    log_softmax,
    sgd_step,
    softmax_with_temperature,
    strong_augment,
    weak_augment,
)

NORMALIZED = "normalized"
RAW = "raw"

BASELINES = ("source", "bn_stats", "pseudo_label", "tent_continual", "tent_online")
METHOD_ALIASES = {
    "bnstats": "bn_stats",
    "pseudo": "pseudo_label",
    "tent": "tent_continual",
    "tent-online": "tent_online",
    "tent-continual": "tent_continual",
}


def canonical_method(method: str) -> str:
    method = METHOD_ALIASES.get(method, method)
    if method not in BASELINES + ("apcotta",):
        raise ValueError(f"unknown method {method!r}")
    return method


@dataclass(frozen=True)
class AdaptConfig:
    S0: float = 0.001
    tau: float = 0.8
    alpha: float = 0.999
    p: float = 0.01
    T: float = 50.0
    lr: float = 1e-2
    momentum: float = 0.98
    dstl: bool = True
    ebcl: bool = True
    rpi: bool = True
    entropy_mode: str = NORMALIZED
    stop_gradient_weak: bool = True
    predict_view: str = "weak"  # or "clean": an extra unaugmented batch-stats pass
    augment: AugmentParams = field(default_factory=AugmentParams)

    def __post_init__(self):
        if self.S0 < 0:
            raise ValueError("S0 must be >= 0")
        if self.tau < 0:
            raise ValueError("tau must be >= 0")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must be in [0, 1]")
        if not 0 <= self.p <= 1:
            raise ValueError("p must be in [0, 1]")
        if not self.T > 0:
            raise ValueError("T must be > 0")
        if self.entropy_mode not in (NORMALIZED, RAW):
            raise ValueError(f"entropy_mode must be {NORMALIZED!r} or {RAW!r}")
        if self.predict_view not in ("weak", "clean"):
            raise ValueError("predict_view must be 'weak' or 'clean'")

    def with_toggles(self, dstl=None, ebcl=None, rpi=None) -> "AdaptConfig":
        return replace(
            self,
            dstl=self.dstl if dstl is None else dstl,
            ebcl=self.ebcl if ebcl is None else ebcl,
            rpi=self.rpi if rpi is None else rpi,
        )


@dataclass
class LayerScore:
    layer_id: int
    score: float
    param_count: int


class AdaptState:
    """Current network, a frozen copy of the source parameters and RNG streams."""

    def __init__(self, net: Network, seed: int = 0):
        self.net = net
        self._source = {name: v.copy() for name, v in net.state().items()}
        for v in self._source.values():
            v.flags.writeable = False
        net.zero_momentum()
        streams = np.random.SeedSequence(seed).spawn(2)
        self.rng_augment = np.random.default_rng(streams[0])
        self.rng_mask = np.random.default_rng(streams[1])
        self.t = 0
        self.last_mask = None

    @property
    def source_params(self) -> dict:
        return self._source

    def reset(self):
        """Restore the source parameters and clear optimizer state."""
        self.net.load_state(self._source)
        self.net.zero_momentum()


# ---------------------------------------------------------------------------
# layer scoring


def kl_uniform_loss(logits, T: float):
    """Mean over points of KL(u || softmax(logits / T)) and its gradient."""
    m, c = logits.shape
    logp = log_softmax(logits, T)
    loss = float(np.mean(-math.log(c) - logp.mean(axis=1)))
    grad = (np.exp(logp) - 1.0 / c) / (m * T)
    return loss, grad


def _scores_from_grads(net: Network):
    out = []
    for layer_id, params in net.layer_params().items():
        count = sum(p.values.size for p in params)
        l1 = sum(float(np.abs(p.grad).sum()) for p in params)
        out.append(LayerScore(layer_id, l1 / count, count))
    return out


def layer_scores(state_or_net, weak_batch: SubCloudBatch = None, T: float = 50.0, trace=None):
    """Per-layer mean absolute gradient of the KL-to-uniform loss.

    Parameters are left untouched; the gradient buffers are overwritten.
    """
    net = state_or_net.net if isinstance(state_or_net, AdaptState) else state_or_net
    if trace is None:
        _, trace = net.forward(weak_batch, BATCH_STATS)
    loss, grad = kl_uniform_loss(trace.logits, T)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite scoring loss")
    net.backward(trace, grad)
    return _scores_from_grads(net)


def select_layers(scores, S0: float) -> dict:
    """Layers strictly below ``S0`` are trainable."""
    return {s.layer_id: bool(s.score < S0) for s in scores}


def check_gradient_identity(state_or_net, weak_batch: SubCloudBatch, T: float = 50.0) -> float:
    """Max |grad KL(u || y) - mean_c grad CE(logits / T, c)| over all parameters."""
    net = state_or_net.net if isinstance(state_or_net, AdaptState) else state_or_net
    logits, trace = net.forward(weak_batch, BATCH_STATS)
    m, c = logits.shape
    _, grad = kl_uniform_loss(logits, T)
    net.backward(trace, grad)
    kl_grads = [p.grad.copy() for p in net.params()]

    probs = softmax_with_temperature(logits, T)
    ce_grads = [np.zeros_like(g) for g in kl_grads]
    for cls in range(c):
        onehot = np.zeros_like(probs)
        onehot[:, cls] = 1.0
        # d/dz of mean_i CE(z_i / T, cls)
        net.backward(trace, (probs - onehot) / (m * T))
        for acc, p in zip(ce_grads, net.params()):
            acc += p.grad
    deviation = 0.0
    for a, b in zip(kl_grads, ce_grads):
        deviation = max(deviation, float(np.max(np.abs(a - b / c))))
    return deviation


# ---------------------------------------------------------------------------
# entropy gated consistency


def entropy(probs, mode: str = NORMALIZED):
    probs = np.asarray(probs)
    safe = np.where(probs > 0, probs, 1.0)
    h = -np.sum(probs * np.log(safe), axis=-1)
    if mode == NORMALIZED:
        return h / math.log(probs.shape[-1])
    if mode == RAW:
        return h
    raise ValueError(f"unknown entropy mode {mode!r}")


def consistency_loss(p_weak, p_strong, tau: float, mode: str = NORMALIZED, gated: bool = True):
    """Return ``(loss, reliable_count, reliable_mask)``.

    With no reliable point the loss is 0 and callers skip the update.
    """
    if p_weak.shape != p_strong.shape:
        raise ValueError("weak and strong probabilities differ in shape")
    if gated:
        mask = entropy(p_weak, mode) < tau
    else:
        mask = np.ones(p_weak.shape[0], dtype=bool)
    count = int(mask.sum())
    if count == 0:
        return 0.0, 0, mask
    ce = -np.sum(p_weak[mask] * np.log(np.maximum(p_strong[mask], np.finfo(float).tiny)), axis=1)
    return float(ce.sum() / count), count, mask


def consistency_grads(p_weak, p_strong, logp_strong, mask, count, stop_gradient_weak=True):
    """Gradients of the consistency loss wrt strong (and weak) logits, T = 1."""
    m = mask[:, None] / count
    d_strong = m * (p_strong * p_weak.sum(axis=1, keepdims=True) - p_weak)
    if stop_gradient_weak:
        return d_strong, None
    g = -m * logp_strong
    d_weak = p_weak * (g - np.sum(p_weak * g, axis=1, keepdims=True))
    return d_strong, d_weak


# ---------------------------------------------------------------------------
# source interpolation


def rpi_step(state: AdaptState, cfg: AdaptConfig, selected: dict, rng=None):
    """Bernoulli(p) elementwise pull of the selected layers toward the source weights."""
    rng = state.rng_mask if rng is None else rng
    alpha = cfg.alpha
    for p in state.net.params():
        if not selected.get(p.layer_id, False):
            continue
        mask = rng.random(p.values.shape) < cfg.p
        theta0 = state.source_params[p.name]
        mixed = alpha * theta0 + (1.0 - alpha) * p.values
        p.values[...] = np.where(mask, mixed, p.values)


# ---------------------------------------------------------------------------
# steps


def _argmax(logits):
    return np.argmax(logits, axis=1)


def apcotta_step(state: AdaptState, batch: SubCloudBatch, cfg: AdaptConfig):
    """One adaptation step. Returns ``(predictions, diagnostics)``."""
    net = state.net
    batch = batch.unlabeled()
    weak = weak_augment(batch, state.rng_augment, cfg.augment)
    strong = strong_augment(batch, state.rng_augment, cfg.augment)

    weak_logits, weak_trace = net.forward(weak, BATCH_STATS)
    if cfg.dstl:
        scores = layer_scores(net, trace=weak_trace, T=cfg.T)
        selected = select_layers(scores, cfg.S0)
    else:
        scores = []
        selected = {lid: True for lid in net.layer_ids}
    state.last_mask = selected

    if cfg.predict_view == "clean":
        clean_logits, _ = net.forward(batch, BATCH_STATS)
        preds = _argmax(clean_logits)
    else:
        preds = _argmax(weak_logits)

    diagnostics = {
        "step": state.t,
        "layer_scores": {s.layer_id: s.score for s in scores},
        "selected_layers": [lid for lid, on in selected.items() if on],
        "reliable_fraction": None,
        "loss": None,
        "updated": False,
    }
    if any(selected.values()):
        p_weak = softmax_with_temperature(weak_logits)
        strong_logits, strong_trace = net.forward(strong, BATCH_STATS)
        logp_strong = log_softmax(strong_logits)
        p_strong = np.exp(logp_strong)
        loss, count, mask = consistency_loss(p_weak, p_strong, cfg.tau, cfg.entropy_mode,
                                             gated=cfg.ebcl)
        diagnostics["reliable_fraction"] = count / len(mask)
        diagnostics["loss"] = loss
        if count > 0:
            d_strong, d_weak = consistency_grads(p_weak, p_strong, logp_strong, mask, count,
                                                 cfg.stop_gradient_weak)
            net.backward(strong_trace, d_strong)
            if d_weak is not None:
                net.backward(weak_trace, d_weak, accumulate=True)
            sgd_step(net, cfg.lr, cfg.momentum, selected)
            if cfg.rpi:
                rpi_step(state, cfg, selected)
            diagnostics["updated"] = True
    state.t += 1
    return preds, diagnostics


def baseline_step(state: AdaptState, batch: SubCloudBatch, method: str,
                  cfg: AdaptConfig = AdaptConfig(), new_domain: bool = False):
    """Predict (and possibly update) with one of the simple baselines."""
    method = canonical_method(method)
    net = state.net
    batch = batch.unlabeled()
    if method == "source":
        logits, _ = net.forward(batch, RUNNING_STATS)
        state.t += 1
        return _argmax(logits)
    if method == "tent_online" and new_domain:
        state.reset()
    logits, trace = net.forward(batch, BATCH_STATS)
    preds = _argmax(logits)
    if method == "pseudo_label":
        _, grad = cross_entropy(logits, preds)
        net.backward(trace, grad)
        sgd_step(net, cfg.lr, cfg.momentum)
    elif method in ("tent_continual", "tent_online"):
        m = logits.shape[0]
        logp = log_softmax(logits)
        p = np.exp(logp)
        h = -np.sum(p * logp, axis=1, keepdims=True)
        grad = -p * (logp + h) / m
        net.backward(trace, grad)
        bn_ids = {bn.layer_id for bn in net.bn_layers}
        sgd_step(net, cfg.lr, cfg.momentum, {lid: lid in bn_ids for lid in net.layer_ids})
    state.t += 1
    return preds


def step(state: AdaptState, batch: SubCloudBatch, method: str, cfg: AdaptConfig,
         new_domain: bool = False):
    """Dispatch to APCoTTA or a baseline; always returns ``(preds, diagnostics)``."""
    method = canonical_method(method)
    if method == "apcotta":
        return apcotta_step(state, batch, cfg)
    preds = baseline_step(state, batch, method, cfg, new_domain)
    return preds, {"step": state.t - 1}


__all__ = [
    "AdaptConfig",
    "AdaptState",
    "LayerScore",
    "apcotta_step",
    "baseline_step",
    "check_gradient_identity",
    "consistency_loss",
    "entropy",
    "kl_uniform_loss",
    "layer_scores",
    "rpi_step",
    "select_layers",
    "step",
]
