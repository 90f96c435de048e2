"""Dense neural-network kernel with exact forward and backward passes.

A model is a flat float64 parameter vector plus a manifest that partitions it
into named modules. Supported layers: affine, batchnorm, relu and a final
softmax. Batch normalization exposes four modules per layer (weight, bias,
running mean, running variance); the last two are running statistics and are
never touched by gradient descent.

Two forward modes exist:

``train-stats``
    BN normalizes with the statistics of the current batch and reports them.
``frozen-stats``
    BN normalizes with the stored running statistics. Output rows depend only
    on their own input row.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import DegenerateBatchError, DimensionError, NumericError, UsageError

TRAIN_STATS = "train-stats"
FROZEN_STATS = "frozen-stats"
MODES = (TRAIN_STATS, FROZEN_STATS)

TRAINABLE = "trainable"
RUNNING_STAT = "running_stat"

LAYER_KINDS = ("affine", "batchnorm", "relu", "softmax")
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    input_dim: int
    output_dim: int
    eps: float = 1e-5

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.input_dim <= 0 or self.output_dim <= 0:
            raise DimensionError(f"{self.kind} layer needs positive dims")
        if self.kind != "affine" and self.input_dim != self.output_dim:
            raise DimensionError(f"{self.kind} layer must preserve width")
        if self.kind == "batchnorm" and not self.eps > 0:
            raise ValueError("batchnorm epsilon must be positive")


@dataclass(frozen=True)
class ModuleEntry:
    name: str
    kind: str  # TRAINABLE or RUNNING_STAT
    offset: int
    length: int
    shape: tuple
    layer: int  # index into the layer list
    role: str  # weight | bias | running_mean | running_var


class ModuleManifest:
    """Ordered partition of the flat parameter vector into modules.

    Stands in for the 0-1 assignment matrix: multiplying by it is a scatter
    over ``offsets``/``lengths``, multiplying by its transpose is a segmented
    reduction.
    """

    def __init__(self, entries):
        self.entries = tuple(entries)
        pos = 0
        for e in self.entries:
            if e.offset != pos:
                raise DimensionError(f"module {e.name!r} leaves a gap or overlaps at {pos}")
            if e.length <= 0 or int(np.prod(e.shape)) != e.length:
                raise DimensionError(f"module {e.name!r} has inconsistent length")
            if e.kind not in (TRAINABLE, RUNNING_STAT):
                raise ValueError(f"module {e.name!r} has unknown kind {e.kind!r}")
            pos += e.length
        self.size = pos
        self.names = tuple(e.name for e in self.entries)
        if len(set(self.names)) != len(self.names):
            raise ValueError("duplicate module names")
        self._index = {n: i for i, n in enumerate(self.names)}
        self.offsets = np.array([e.offset for e in self.entries], dtype=np.int64)
        self.lengths = np.array([e.length for e in self.entries], dtype=np.int64)
        self.kinds = tuple(e.kind for e in self.entries)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __eq__(self, other):
        return isinstance(other, ModuleManifest) and self.entries == other.entries

    def __hash__(self):
        return hash(self.entries)

    def index(self, name):
        return self._index[name]

    def entry(self, name):
        return self.entries[self._index[name]]

    def slice(self, name):
        e = self.entry(name)
        return slice(e.offset, e.offset + e.length)

    def module_mask(self, kind):
        """Boolean mask of length d selecting modules of ``kind``."""
        return np.array([k == kind for k in self.kinds])

    def expand(self, per_module):
        """Scatter a length-d vector to length D (multiplication by A)."""
        return np.repeat(np.asarray(per_module, dtype=float), self.lengths)

    def to_json(self):
        return [
            {"name": e.name, "kind": e.kind, "offset": e.offset, "length": e.length,
             "shape": list(e.shape), "layer": e.layer, "role": e.role}
            for e in self.entries
        ]

    @classmethod
    def from_json(cls, items):
        return cls(ModuleEntry(i["name"], i["kind"], int(i["offset"]), int(i["length"]),
                               tuple(i["shape"]), int(i["layer"]), i["role"]) for i in items)


def manifest_for(layers):
    entries = []
    pos = 0

    def add(name, kind, shape, li, role):
        nonlocal pos
        n = int(np.prod(shape))
        entries.append(ModuleEntry(name, kind, pos, n, tuple(shape), li, role))
        pos += n

    for li, layer in enumerate(layers):
        if layer.kind == "affine":
            add(f"layer{li}.weight", TRAINABLE, (layer.output_dim, layer.input_dim), li, "weight")
            add(f"layer{li}.bias", TRAINABLE, (layer.output_dim,), li, "bias")
        elif layer.kind == "batchnorm":
            f = layer.output_dim
            add(f"layer{li}.weight", TRAINABLE, (f,), li, "weight")
            add(f"layer{li}.bias", TRAINABLE, (f,), li, "bias")
            add(f"layer{li}.running_mean", RUNNING_STAT, (f,), li, "running_mean")
            add(f"layer{li}.running_var", RUNNING_STAT, (f,), li, "running_var")
    return ModuleManifest(entries)


def validate_layers(layers):
    if not layers:
        raise DimensionError("empty network")
    for a, b in zip(layers, layers[1:]):
        if a.output_dim != b.input_dim:
            raise DimensionError(f"{a.kind}->{b.kind} width mismatch")
    for layer in layers[:-1]:
        if layer.kind == "softmax":
            raise DimensionError("softmax must be the final layer")
    if layers[-1].kind != "softmax":
        raise DimensionError("network must end in softmax")


@dataclass
class ParameterStore:
    """Flat parameter vector ``w`` with its layer list and module manifest."""

    layers: tuple
    manifest: ModuleManifest
    w: np.ndarray

    def __post_init__(self):
        self.layers = tuple(self.layers)
        self.w = np.ascontiguousarray(self.w, dtype=np.float64)
        if self.w.ndim != 1 or self.w.shape[0] != self.manifest.size:
            raise DimensionError(
                f"parameter vector has length {self.w.shape}, manifest needs {self.manifest.size}")

    @property
    def D(self):
        return self.manifest.size

    @property
    def d(self):
        return len(self.manifest)

    @property
    def input_dim(self):
        return self.layers[0].input_dim

    @property
    def num_classes(self):
        return self.layers[-1].output_dim

    def view(self, name):
        """Shaped view into ``w`` (writes go through)."""
        e = self.manifest.entry(name)
        return self.w[e.offset:e.offset + e.length].reshape(e.shape)

    def with_params(self, w):
        return ParameterStore(self.layers, self.manifest, np.array(w, dtype=np.float64))

    def copy(self):
        return self.with_params(self.w.copy())

    def checksum(self):
        return zlib.crc32(self.w.tobytes())


def build_model(layers, w=None):
    validate_layers(layers)
    manifest = manifest_for(layers)
    if w is None:
        w = np.zeros(manifest.size)
    return ParameterStore(tuple(layers), manifest, w)


def mlp_layers(input_dim, hidden, num_classes, batchnorm=True, eps=1e-5):
    layers = []
    width = input_dim
    for h in hidden:
        layers.append(LayerSpec("affine", width, h))
        if batchnorm:
            layers.append(LayerSpec("batchnorm", h, h, eps))
        layers.append(LayerSpec("relu", h, h))
        width = h
    layers.append(LayerSpec("affine", width, num_classes))
    layers.append(LayerSpec("softmax", num_classes, num_classes))
    return layers


def init_mlp(input_dim, hidden, num_classes, rng, batchnorm=True):
    """He-initialized MLP with unit BN scale and identity running stats."""
    model = build_model(mlp_layers(input_dim, hidden, num_classes, batchnorm))
    for e in model.manifest:
        v = model.view(e.name)
        if e.role == "weight" and model.layers[e.layer].kind == "affine":
            v[...] = rng.normal(0.0, np.sqrt(2.0 / e.shape[1]), size=e.shape)
        elif e.role == "weight" or e.role == "running_var":
            v[...] = 1.0
    return model


@dataclass
class ForwardCache:
    mode: str
    model: ParameterStore
    checksum: int
    inputs: list  # per-layer input activations
    aux: list  # per-layer extras (BN xhat/inv_std, relu mask)
    logits: np.ndarray
    probs: np.ndarray
    batch_stats: dict = field(default_factory=dict)  # running-stat module name -> batch value


def _check_batch(model, X):
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] != model.input_dim:
        raise DimensionError(f"batch shape {X.shape} does not match input_dim {model.input_dim}")
    if not np.isfinite(X).all():
        raise NumericError("non-finite value in input batch")
    return X


def forward(model, X, mode=FROZEN_STATS, record_stats=False):
    """Run the network on a batch; returns ``(probabilities, cache)``.

    Train-stats mode always records per-BN-layer batch mean and biased
    variance of the pre-normalization activations in ``cache.batch_stats``;
    frozen-stats mode does so only with ``record_stats``.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    X = _check_batch(model, X)
    if mode == TRAIN_STATS and X.shape[0] < 2:
        raise DegenerateBatchError("train-stats mode needs at least 2 samples")
    a = X
    inputs, aux = [], []
    stats = {}
    probs = logits = None
    for li, layer in enumerate(model.layers):
        inputs.append(a)
        if layer.kind == "affine":
            W = model.view(f"layer{li}.weight")
            b = model.view(f"layer{li}.bias")
            # einsum keeps a fixed per-row summation order (BLAS does not),
            # so a row's output never depends on the rest of the batch
            a = np.einsum("bi,oi->bo", a, W) + b
            aux.append(None)
        elif layer.kind == "batchnorm":
            gamma = model.view(f"layer{li}.weight")
            beta = model.view(f"layer{li}.bias")
            if mode == TRAIN_STATS:
                a, xhat, mean, var, inv = kernels.bn_forward_train(a, gamma, beta, layer.eps)
                stats[f"layer{li}.running_mean"] = mean
                stats[f"layer{li}.running_var"] = var
            else:
                rm = model.view(f"layer{li}.running_mean")
                rv = model.view(f"layer{li}.running_var")
                # adapted variances may cross zero; they act as 0 there
                neg = rv < 0
                if neg.any():
                    rv = np.where(neg, 0.0, rv)
                if record_stats:
                    stats[f"layer{li}.running_mean"] = a.mean(axis=0)
                    stats[f"layer{li}.running_var"] = a.var(axis=0)
                a, xhat, inv = kernels.bn_forward_frozen(a, rm, rv, gamma, beta, layer.eps)
                aux.append((xhat, inv, neg))
                continue
            aux.append((xhat, inv, None))
        elif layer.kind == "relu":
            mask = a > 0
            a = a * mask
            aux.append(mask)
        else:
            logits = np.ascontiguousarray(a)
            probs = np.exp(kernels.log_softmax(logits))
            aux.append(None)
    if not np.isfinite(logits).all():
        raise NumericError("non-finite logits")
    cache = ForwardCache(mode, model, model.checksum(), inputs, aux, logits, probs, stats)
    return probs, cache


def _as_int_labels(labels, n, num_classes):
    y = np.asarray(labels)
    if y.ndim == 2:
        if y.shape != (n, num_classes):
            raise DimensionError(f"one-hot labels shape {y.shape} != {(n, num_classes)}")
        y = y.argmax(axis=1)
    if y.shape != (n,):
        raise DimensionError(f"labels shape {y.shape} does not match batch of {n}")
    y = y.astype(np.int64)
    if (y < 0).any() or (y >= num_classes).any():
        raise DimensionError("label out of range")
    return np.ascontiguousarray(y)


def cross_entropy(predictions, labels, return_clamped=False):
    """Mean cross-entropy of probability rows against labels.

    Probabilities are floored at 1e-12; with ``return_clamped`` the number of
    floored true-label entries is also returned.
    """
    p = np.asarray(predictions, dtype=np.float64)
    if not np.isfinite(p).all():
        raise NumericError("non-finite predictions")
    y = _as_int_labels(labels, p.shape[0], p.shape[1])
    picked = p[np.arange(p.shape[0]), y]
    clamped = int((picked < PROB_FLOOR).sum())
    loss = float(-np.log(np.maximum(picked, PROB_FLOOR)).mean())
    return (loss, clamped) if return_clamped else loss


def entropy_loss(predictions):
    """Mean Shannon entropy of probability rows, with 0 log 0 = 0."""
    p = np.asarray(predictions, dtype=np.float64)
    if not np.isfinite(p).all():
        raise NumericError("non-finite predictions")
    safe = np.where(p > 0, p, 1.0)
    return float(-(p * np.log(safe)).sum(axis=1).mean())


def backward(cache, loss_kind, labels=None):
    """Gradient of the chosen loss w.r.t. the full parameter vector.

    Returned vector has length D. In train-stats mode the running-statistic
    slices are exactly zero (they do not influence the output). In
    frozen-stats mode they carry the derivative through the normalization,
    which the adaptation-rate gradient needs.
    """
    if cache.model.checksum() != cache.checksum:
        raise UsageError("model parameters changed since forward; cache is stale")
    if loss_kind == "entropy":
        if labels is not None:
            raise UsageError("entropy loss takes no labels")
        _, _, delta = kernels.entropy_grad(cache.logits)
    elif loss_kind == "cross_entropy":
        if labels is None:
            raise UsageError("cross_entropy needs labels")
        y = _as_int_labels(labels, cache.logits.shape[0], cache.logits.shape[1])
        _, _, delta = kernels.ce_grad(cache.logits, y)
    else:
        raise ValueError(f"unknown loss {loss_kind!r}")
    return _backprop(cache, delta)


def _backprop(cache, delta):
    model = cache.model
    grad = np.zeros(model.D)
    man = model.manifest
    for li in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[li]
        if layer.kind == "softmax":
            continue
        if layer.kind == "affine":
            x = cache.inputs[li]
            W = model.view(f"layer{li}.weight")
            grad[man.slice(f"layer{li}.weight")] = (delta.T @ x).ravel()
            grad[man.slice(f"layer{li}.bias")] = delta.sum(axis=0)
            delta = delta @ W
        elif layer.kind == "batchnorm":
            xhat, inv, neg = cache.aux[li]
            gamma = model.view(f"layer{li}.weight")
            delta = np.ascontiguousarray(delta)
            if cache.mode == TRAIN_STATS:
                delta, dg, db = kernels.bn_backward_train(delta, xhat, gamma, inv)
            else:
                delta, dg, db, dm, dv = kernels.bn_backward_frozen(delta, xhat, gamma, inv)
                if neg is not None and neg.any():
                    dv[neg] = 0.0
                grad[man.slice(f"layer{li}.running_mean")] = dm
                grad[man.slice(f"layer{li}.running_var")] = dv
            grad[man.slice(f"layer{li}.weight")] = dg
            grad[man.slice(f"layer{li}.bias")] = db
        else:
            delta = delta * cache.aux[li]
    return grad


def loss_and_grad(model, X, loss_kind, labels=None, mode=FROZEN_STATS, record_stats=False):
    """One forward/backward; returns ``(loss, grad, cache)``."""
    probs, cache = forward(model, X, mode, record_stats)
    if loss_kind == "entropy":
        _, loss, delta = kernels.entropy_grad(cache.logits)
    else:
        y = _as_int_labels(labels, X.shape[0], model.num_classes)
        _, loss, delta = kernels.ce_grad(cache.logits, y)
    return loss, _backprop(cache, delta), cache


def predict(model, X, mode=FROZEN_STATS):
    probs, _ = forward(model, X, mode)
    return probs


def update_running_stats(model, batch_stats, momentum):
    """In-place EMA ``r <- (1-m) r + m * batch``, PyTorch momentum convention."""
    for name, value in batch_stats.items():
        v = model.view(name)
        v *= 1.0 - momentum
        v += momentum * value


# -- checkpoint files --------------------------------------------------------

def _header(model):
    return {
        "format": "atpfl-checkpoint",
        "version": 1,
        "dtype": "float64",
        "byteorder": "little",
        "D": model.D,
        "layers": [{"kind": l.kind, "input_dim": l.input_dim, "output_dim": l.output_dim,
                    "eps": l.eps} for l in model.layers],
        "modules": model.manifest.to_json(),
    }


def save_checkpoint(model, path, inline=None):
    """Write a checkpoint.

    ``path`` ending in ``.json`` with ``inline=True`` (default for D <= 4096)
    produces a single JSON file; otherwise a JSON manifest plus a sibling
    ``.bin`` file of little-endian float64 values.
    """
    path = Path(path)
    if inline is None:
        inline = model.D <= 4096
    head = _header(model)
    if inline:
        head["params"] = [float(x) for x in model.w]
    else:
        bin_path = path.with_suffix(".bin")
        bin_path.write_bytes(model.w.astype("<f8").tobytes())
        head["params_file"] = bin_path.name
    path.write_text(json.dumps(head, indent=1))
    return path


def load_checkpoint(path):
    path = Path(path)
    head = json.loads(path.read_text())
    if head.get("format") != "atpfl-checkpoint":
        raise ValueError(f"{path} is not a checkpoint file")
    layers = [LayerSpec(l["kind"], l["input_dim"], l["output_dim"], l.get("eps", 1e-5))
              for l in head["layers"]]
    if "params" in head:
        w = np.array(head["params"], dtype=np.float64)
    else:
        w = np.frombuffer((path.parent / head["params_file"]).read_bytes(), dtype="<f8").astype(np.float64)
    model = build_model(layers, w)
    if model.manifest.to_json() != head["modules"]:
        raise DimensionError("checkpoint module table does not match its layers")
    return model
