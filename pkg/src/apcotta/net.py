"""Compact per-point segmentation network with hand-written backward pass.

Architecture (per point, input = recentered xyz + F scalar features)::

    affine 32 > BN > ReLU > affine 64 > BN > ReLU > affine 64 > BN > ReLU = h
    g = max over the k nearest neighbours of h;  q = ReLU(affine 64 (g))
    [h, q] > affine 128 > BN > ReLU > affine 64 > BN > ReLU > head (C logits)

Every affine and every BN layer owns its own ``layer_id``; a layer's tensors
(weight + bias, or scale + shift) share that id.
"""
from __future__ import annotations

import copy
import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .cloud import IGNORE, SubCloudBatch, knn

BN_EPS = 1e-5
BATCH_STATS = "batch-stats"
RUNNING_STATS = "running-stats"

CHECKPOINT_MAGIC = b"APCT"
CHECKPOINT_VERSION = 1


class NetworkFault(FloatingPointError):
    """Non-finite activations; the message names the offending layer."""


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class NetSpec:
    in_features: int = 1
    class_count: int = 5
    widths: tuple = (32, 64, 64, 128, 64)
    k: int = 16

    def __post_init__(self):
        if len(self.widths) != 5 or any(int(w) < 1 for w in self.widths):
            raise ValueError(f"widths must be five positive integers, got {self.widths}")
        if self.in_features < 1 or self.class_count < 2 or self.k < 1:
            raise ValueError("invalid network spec")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    @property
    def input_dim(self) -> int:
        return 3 + self.in_features


@dataclass
class ParamTensor:
    layer_id: int
    name: str
    values: np.ndarray
    trainable_candidate: bool = True
    grad: np.ndarray = field(default=None, repr=False)
    momentum_buf: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        if self.momentum_buf is None:
            self.momentum_buf = np.zeros_like(self.values)


class Affine:
    kind = "affine"

    def __init__(self, layer_id, name, fan_in, fan_out, rng, dtype):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        self.layer_id = layer_id
        self.name = name
        self.weight = ParamTensor(layer_id, f"{name}.weight",
                                  rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype))
        self.bias = ParamTensor(layer_id, f"{name}.bias", np.zeros(fan_out, dtype=dtype))

    @property
    def params(self):
        return [self.weight, self.bias]

    def forward(self, x):
        return x @ self.weight.values + self.bias.values

    def backward(self, x, dy):
        self.weight.grad[...] = x.T @ dy
        self.bias.grad[...] = dy.sum(axis=0)
        return dy @ self.weight.values.T


class BatchNorm:
    kind = "bn"

    def __init__(self, layer_id, name, channels, dtype):
        self.layer_id = layer_id
        self.name = name
        self.scale = ParamTensor(layer_id, f"{name}.scale", np.ones(channels, dtype=dtype))
        self.shift = ParamTensor(layer_id, f"{name}.shift", np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    @property
    def params(self):
        return [self.scale, self.shift]

    def forward(self, x, mode, update_running=None):
        if mode == BATCH_STATS:
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            if update_running is not None:
                m = x.shape[0]
                unbiased = var * m / max(m - 1, 1)
                self.running_mean[...] = update_running * self.running_mean + (1 - update_running) * mean
                self.running_var[...] = update_running * self.running_var + (1 - update_running) * unbiased
        elif mode == RUNNING_STATS:
            mean, var = self.running_mean, self.running_var
        else:
            raise ValueError(f"unknown bn mode {mode!r}")
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mean) * inv_std
        return self.scale.values * xhat + self.shift.values, (xhat, inv_std)

    def backward(self, cache, mode, dy):
        xhat, inv_std = cache
        self.scale.grad[...] = np.sum(dy * xhat, axis=0)
        self.shift.grad[...] = dy.sum(axis=0)
        dxhat = dy * self.scale.values
        if mode == RUNNING_STATS:
            return dxhat * inv_std
        m = dy.shape[0]
        return (inv_std / m) * (
            m * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))


@dataclass
class ForwardTrace:
    mode: str
    neighbors: np.ndarray  # M x k, flat point indices
    cache: dict
    logits: np.ndarray


def batch_neighbors(positions: np.ndarray, k: int) -> np.ndarray:
    """k-NN inside every sub-cloud of a ``B x N x 3`` array, as flat indices."""
    b, n, _ = positions.shape
    return np.concatenate([knn(positions[i], k) + i * n for i in range(b)])


class Network:
    def __init__(self, spec: NetSpec, seed: int = 0, dtype=np.float64):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        w1, w2, w3, w4, w5 = spec.widths
        t = self.dtype
        self.enc = [
            (Affine(0, "enc1", spec.input_dim, w1, rng, t), BatchNorm(1, "enc1_bn", w1, t)),
            (Affine(2, "enc2", w1, w2, rng, t), BatchNorm(3, "enc2_bn", w2, t)),
            (Affine(4, "enc3", w2, w3, rng, t), BatchNorm(5, "enc3_bn", w3, t)),
        ]
        self.pool_proj = Affine(6, "pool_proj", w3, w3, rng, t)
        self.dec = [
            (Affine(7, "dec1", 2 * w3, w4, rng, t), BatchNorm(8, "dec1_bn", w4, t)),
            (Affine(9, "dec2", w4, w5, rng, t), BatchNorm(10, "dec2_bn", w5, t)),
        ]
        self.head = Affine(11, "head", w5, spec.class_count, rng, t)

    # -- parameter bookkeeping ------------------------------------------------

    @property
    def layers(self):
        out = []
        for aff, bn in self.enc:
            out += [aff, bn]
        out.append(self.pool_proj)
        for aff, bn in self.dec:
            out += [aff, bn]
        out.append(self.head)
        return out

    @property
    def bn_layers(self):
        return [bn for _, bn in self.enc + self.dec]

    def params(self):
        return [p for layer in self.layers for p in layer.params]

    @property
    def layer_ids(self):
        return [layer.layer_id for layer in self.layers]

    def layer_params(self) -> dict:
        out = {}
        for p in self.params():
            out.setdefault(p.layer_id, []).append(p)
        return out

    def state(self) -> dict:
        """Copy of all parameter values keyed by tensor name."""
        return {p.name: p.values.copy() for p in self.params()}

    def load_state(self, state: dict):
        for p in self.params():
            p.values[...] = state[p.name]

    def zero_momentum(self):
        for p in self.params():
            p.momentum_buf[...] = 0

    def clone(self) -> "Network":
        other = Network.__new__(Network)
        other.spec = self.spec
        other.dtype = self.dtype
        other.enc = copy.deepcopy(self.enc)
        other.pool_proj = copy.deepcopy(self.pool_proj)
        other.dec = copy.deepcopy(self.dec)
        other.head = copy.deepcopy(self.head)
        return other

    # -- passes -----------------------------------------------------------------

    def prepare_input(self, batch: SubCloudBatch):
        b, n, _ = batch.positions.shape
        if batch.features.shape[-1] != self.spec.in_features:
            raise ValueError(
                f"batch carries {batch.features.shape[-1]} features, network expects "
                f"{self.spec.in_features}")
        x = np.concatenate([batch.positions, batch.features], axis=-1).reshape(b * n, -1)
        return x.astype(self.dtype, copy=False)

    def forward(self, batch: SubCloudBatch, bn_mode: str = BATCH_STATS, neighbors=None,
                update_running=None):
        """Return ``(logits, trace)`` with logits of shape ``(B*N) x C``."""
        x = self.prepare_input(batch)
        if neighbors is None:
            neighbors = batch_neighbors(batch.positions, self.spec.k)
        return self.forward_array(x, neighbors, bn_mode, update_running)

    def forward_array(self, x, neighbors, bn_mode=BATCH_STATS, update_running=None):
        cache = {"x": x}
        h = x
        for i, (aff, bn) in enumerate(self.enc):
            a = aff.forward(h)
            y, bn_cache = bn.forward(a, bn_mode, update_running)
            cache[aff.name] = h
            cache[bn.name] = bn_cache
            cache[f"relu{i}"] = y > 0
            h = np.maximum(y, 0)
            self._check(h, aff.name)
        enc_out = h
        # neighbourhood max-pool, channelwise
        gathered = enc_out[neighbors]  # M x k x C
        arg = gathered.argmax(axis=1)  # first maximum on ties
        pooled = np.take_along_axis(gathered, arg[:, None, :], axis=1)[:, 0, :]
        cache["pool_arg"] = arg
        cache[self.pool_proj.name] = pooled
        q_pre = self.pool_proj.forward(pooled)
        cache["relu_pool"] = q_pre > 0
        q = np.maximum(q_pre, 0)
        h = np.concatenate([enc_out, q], axis=1)
        for i, (aff, bn) in enumerate(self.dec):
            a = aff.forward(h)
            y, bn_cache = bn.forward(a, bn_mode, update_running)
            cache[aff.name] = h
            cache[bn.name] = bn_cache
            cache[f"relu_dec{i}"] = y > 0
            h = np.maximum(y, 0)
            self._check(h, aff.name)
        cache[self.head.name] = h
        logits = self.head.forward(h)
        self._check(logits, self.head.name)
        return logits, ForwardTrace(bn_mode, neighbors, cache, logits)

    @staticmethod
    def _check(arr, name):
        if not np.isfinite(arr).all():
            raise NetworkFault(f"non-finite activations in layer {name}")

    def backward(self, trace: ForwardTrace, dlogits, accumulate: bool = False):
        """Backpropagate ``dL/dlogits``; gradients overwrite ``grad`` unless ``accumulate``."""
        dlogits = np.asarray(dlogits, dtype=self.dtype)
        if dlogits.shape != trace.logits.shape:
            raise ValueError(f"gradient shape {dlogits.shape} != logits shape {trace.logits.shape}")
        previous = [p.grad.copy() for p in self.params()] if accumulate else None
        c = trace.cache
        mode = trace.mode
        dh = self.head.backward(c[self.head.name], dlogits)
        for i in reversed(range(len(self.dec))):
            aff, bn = self.dec[i]
            dy = dh * c[f"relu_dec{i}"]
            da = bn.backward(c[bn.name], mode, dy)
            dh = aff.backward(c[aff.name], da)
        w3 = self.spec.widths[2]
        d_enc = dh[:, :w3].copy()
        dq = dh[:, w3:] * c["relu_pool"]
        dpooled = self.pool_proj.backward(c[self.pool_proj.name], dq)
        nbr = trace.neighbors
        m = nbr.shape[0]
        rows = np.arange(m)[:, None]
        src = nbr[rows, c["pool_arg"]]  # M x w3: source point for each channel's max
        flat = (src * w3 + np.arange(w3)[None, :]).ravel()
        d_enc += np.bincount(flat, weights=dpooled.ravel(), minlength=m * w3).reshape(m, w3)
        dh = d_enc
        for i in reversed(range(len(self.enc))):
            aff, bn = self.enc[i]
            dy = dh * c[f"relu{i}"]
            da = bn.backward(c[bn.name], mode, dy)
            dh = aff.backward(c[aff.name], da)
        if accumulate:
            for p, g in zip(self.params(), previous):
                p.grad += g
        return dh

    def zero_grad(self):
        for p in self.params():
            p.grad[...] = 0


def init_network(spec: NetSpec, seed: int = 0, dtype=np.float64) -> Network:
    return Network(spec, seed, dtype)


# ---------------------------------------------------------------------------
# optimisation


def sgd_step(net: Network, lr: float, momentum: float, layer_mask=None):
    """Momentum SGD on the layers whose mask entry is true.

    ``layer_mask`` maps layer_id to bool; ``None`` updates every layer.
    Masked-out layers keep both their values and momentum buffers.
    """
    for p in net.params():
        if layer_mask is not None and not layer_mask.get(p.layer_id, False):
            continue
        p.momentum_buf *= momentum
        p.momentum_buf += p.grad
        p.values -= lr * p.momentum_buf


def softmax_with_temperature(logits, T: float = 1.0):
    if not T > 0:
        raise ValueError("temperature must be > 0")
    z = np.asarray(logits) / T
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits, T: float = 1.0):
    z = np.asarray(logits) / T
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits, labels):
    """Mean cross-entropy over non-IGNORE points and its gradient wrt logits."""
    labels = np.asarray(labels)
    valid = labels != IGNORE
    count = int(valid.sum())
    grad = np.zeros_like(logits)
    if count == 0:
        return 0.0, grad
    logp = log_softmax(logits[valid])
    rows = np.arange(count)
    loss = -logp[rows, labels[valid]].mean()
    g = np.exp(logp)
    g[rows, labels[valid]] -= 1.0
    grad[valid] = g / count
    return float(loss), grad


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentParams:
    weak_rotation_deg: float = 10.0
    weak_translation: float = 0.05
    strong_rotation_deg: float = 180.0
    strong_jitter: float = 0.05
    strong_scale: tuple = (0.9, 1.1)


def _rotate_z(positions, angles):
    c, s = np.cos(angles), np.sin(angles)
    x, y, z = positions[..., 0], positions[..., 1], positions[..., 2]
    return np.stack([c[:, None] * x - s[:, None] * y, s[:, None] * x + c[:, None] * y, z], axis=-1)


def _with_positions(batch: SubCloudBatch, positions) -> SubCloudBatch:
    return SubCloudBatch(positions, batch.features, batch.centers, batch.source_indices,
                         batch.labels)


def weak_augment(batch: SubCloudBatch, rng, params: AugmentParams = AugmentParams()):
    """Random rotation about z plus a small translation, one draw per sub-cloud."""
    b = batch.positions.shape[0]
    angles = np.deg2rad(rng.uniform(-params.weak_rotation_deg, params.weak_rotation_deg, size=b))
    shift = rng.uniform(-params.weak_translation, params.weak_translation, size=(b, 1, 3))
    return _with_positions(batch, _rotate_z(batch.positions, angles) + shift)


def strong_augment(batch: SubCloudBatch, rng, params: AugmentParams = AugmentParams()):
    """Wide rotation, translation, isotropic scale and per-point Gaussian jitter."""
    b = batch.positions.shape[0]
    angles = np.deg2rad(
        rng.uniform(-params.strong_rotation_deg, params.strong_rotation_deg, size=b))
    shift = rng.uniform(-params.weak_translation, params.weak_translation, size=(b, 1, 3))
    scale = rng.uniform(*params.strong_scale, size=(b, 1, 1))
    jitter = rng.normal(0.0, 1.0, size=batch.positions.shape) * params.strong_jitter
    pos = _rotate_z(batch.positions, angles) * scale + shift + jitter
    return _with_positions(batch, pos)


# ---------------------------------------------------------------------------
# checkpoints


def _pack_str(buf, text):
    raw = text.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def save_checkpoint(net: Network, path):
    """Write the binary checkpoint (magic, version, spec block, tensors, BN stats)."""
    buf = io.BytesIO()
    spec = net.spec
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<I", len(spec.widths)))
    buf.write(struct.pack(f"<{len(spec.widths)}I", *spec.widths))
    buf.write(struct.pack("<III", spec.k, spec.class_count, spec.in_features))
    params = net.params()
    buf.write(struct.pack("<I", len(params)))
    for p in params:
        _pack_str(buf, p.name)
        buf.write(struct.pack("<II", p.layer_id, p.values.ndim))
        buf.write(struct.pack(f"<{p.values.ndim}I", *p.values.shape))
        buf.write(np.ascontiguousarray(p.values, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(p.momentum_buf, dtype="<f8").tobytes())
    bns = net.bn_layers
    buf.write(struct.pack("<I", len(bns)))
    for bn in bns:
        _pack_str(buf, bn.name)
        buf.write(struct.pack("<I", bn.running_mean.size))
        buf.write(np.ascontiguousarray(bn.running_mean, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(bn.running_var, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self):
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")

    def floats(self, count):
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)


def load_checkpoint(path, spec: NetSpec | None = None, dtype=np.float64) -> Network:
    """Read a checkpoint; when ``spec`` is given it must match the stored one."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic bytes: not a checkpoint")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n_widths,) = r.unpack("<I")
    widths = r.unpack(f"<{n_widths}I")
    k, class_count, in_features = r.unpack("<III")
    stored = NetSpec(in_features=in_features, class_count=class_count, widths=tuple(widths), k=k)
    if spec is not None and spec != stored:
        raise CheckpointError(f"spec mismatch: checkpoint has {stored}, expected {spec}")
    net = Network(stored, seed=0, dtype=dtype)
    by_name = {p.name: p for p in net.params()}
    (n_params,) = r.unpack("<I")
    if n_params != len(by_name):
        raise CheckpointError("spec mismatch: tensor count differs")
    for _ in range(n_params):
        name = r.string()
        layer_id, ndim = r.unpack("<II")
        shape = r.unpack(f"<{ndim}I")
        if name not in by_name or by_name[name].values.shape != tuple(shape):
            raise CheckpointError(f"spec mismatch at tensor {name}")
        size = int(np.prod(shape))
        p = by_name[name]
        p.values[...] = r.floats(size).reshape(shape)
        p.momentum_buf[...] = r.floats(size).reshape(shape)
    bns = {bn.name: bn for bn in net.bn_layers}
    (n_bn,) = r.unpack("<I")
    for _ in range(n_bn):
        name = r.string()
        (ch,) = r.unpack("<I")
        if name not in bns or bns[name].running_mean.size != ch:
            raise CheckpointError(f"spec mismatch at batch-norm {name}")
        bns[name].running_mean[...] = r.floats(ch)
        bns[name].running_var[...] = r.floats(ch)
    if r.pos != len(r.data):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return net
