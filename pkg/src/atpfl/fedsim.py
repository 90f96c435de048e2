"""Federated simulation: client populations, FedAvg pretraining, rate training.

Clients draw disjoint samples from a per-class pool (a Gaussian class mixture
by default, or an external CSV dataset). Label shift is a step partition
(a few major classes with many samples, the rest with few); feature shift is
a per-client corruption ``x -> r*x + offset + noise``.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .adaptation import (AdaptationRates, alpha_gradient, apply_adaptation,
                         compute_update_direction, refine_alpha)
from .errors import ConfigError, DimensionError, NumericError
from .nn import TRAIN_STATS, init_mlp, loss_and_grad, update_running_stats
from .parallel import OrderedPool

log = logging.getLogger(__name__)

SHIFT_KINDS = ("none", "label", "feature", "hybrid")

# rng stream tags
_POOL, _CLIENT, _PRETRAIN, _ATP, _INIT = 1, 2, 3, 4, 5


def rng_for(*key):
    return np.random.default_rng([int(k) for k in key])


@dataclass
class CorruptionRange:
    scale: tuple = (0.5, 2.0)  # log-uniform range of r
    offset_std: float = 1.0  # offset ~ N(0, offset_std^2 I)
    noise: tuple = (0.0, 0.2)  # uniform range of the noise std


@dataclass
class ShiftConfig:
    kind: str = "hybrid"
    num_classes: int = 10
    dim: int = 20
    class_sep: float = 3.0
    class_std: float = 1.0
    major_classes: int = 2
    major_count: int = 80
    minor_classes: int = 8
    minor_count: int = 5
    pool_per_class: int = 4000
    val_fraction: float = 0.2
    source_corruption: CorruptionRange = field(default_factory=CorruptionRange)
    target_corruption: CorruptionRange = field(
        default_factory=lambda: CorruptionRange((0.4, 2.5), 1.2, (0.0, 0.25)))

    def __post_init__(self):
        if isinstance(self.source_corruption, dict):
            self.source_corruption = CorruptionRange(**self.source_corruption)
        if isinstance(self.target_corruption, dict):
            self.target_corruption = CorruptionRange(**self.target_corruption)
        self.validate()

    def validate(self):
        if self.kind not in SHIFT_KINDS:
            raise ConfigError(f"shift.kind must be one of {SHIFT_KINDS}, got {self.kind!r}")
        if self.minor_classes + self.major_classes != self.num_classes:
            raise ConfigError("shift: minor_classes + major_classes must equal num_classes")
        for name in ("major_classes", "major_count", "minor_count", "num_classes", "dim",
                     "pool_per_class"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"shift.{name} must be positive")
        if self.minor_classes < 0:
            raise ConfigError("shift.minor_classes must be non-negative")
        if self.num_classes > self.dim:
            raise ConfigError("shift: class means need dim >= num_classes")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("shift.val_fraction must be in [0, 1)")
        for c in (self.source_corruption, self.target_corruption):
            if not (0 < c.scale[0] <= c.scale[1]):
                raise ConfigError("corruption scale range must satisfy 0 < lo <= hi")
            if c.offset_std < 0 or c.noise[0] < 0 or c.noise[1] < c.noise[0]:
                raise ConfigError("corruption offset/noise must be non-negative ranges")

    @property
    def samples_per_client(self):
        return self.major_classes * self.major_count + self.minor_classes * self.minor_count

    def to_dict(self):
        return asdict(self)


@dataclass
class Corruption:
    scale: float
    offset: np.ndarray
    noise: float

    @classmethod
    def identity(cls, dim):
        return cls(1.0, np.zeros(dim), 0.0)

    def apply(self, X, rng):
        out = self.scale * X + self.offset
        if self.noise > 0:
            out = out + self.noise * rng.standard_normal(X.shape)
        return out


@dataclass
class ClientSpec:
    id: int
    role: str  # source | target
    label_prior: np.ndarray
    corruption: Corruption
    X: np.ndarray  # source: training split; target: test data
    y: np.ndarray
    X_val: np.ndarray = None  # source only
    y_val: np.ndarray = None

    def fingerprint(self):
        parts = [self.X, self.y, self.label_prior]
        if self.X_val is not None:
            parts += [self.X_val, self.y_val]
        return b"".join(np.ascontiguousarray(p).tobytes() for p in parts)


@dataclass
class ClientPopulation:
    config: ShiftConfig
    sources: list
    targets: list
    seed: int

    def fingerprint(self):
        return b"".join(c.fingerprint() for c in self.sources + self.targets)


def batches(X, y, batch_size, rng=None):
    """Fixed-size batches in dataset order (or shuffled by ``rng``); drops the short tail."""
    n = X.shape[0]
    order = np.arange(n) if rng is None else rng.permutation(n)
    out = []
    for s in range(0, n - batch_size + 1, batch_size):
        idx = order[s:s + batch_size]
        out.append((X[idx], None if y is None else y[idx]))
    return out


class GaussianMixturePool:
    """Class-conditional Gaussians with means on a scaled simplex and shared isotropic noise."""

    def __init__(self, num_classes, dim, class_sep, class_std):
        self.num_classes = num_classes
        self.dim = dim
        self.class_std = class_std
        self.means = np.zeros((num_classes, dim))
        self.means[np.arange(num_classes), np.arange(num_classes)] = class_sep

    def draw(self, per_class, rng):
        return [self.means[c] + self.class_std * rng.standard_normal((per_class, self.dim))
                for c in range(self.num_classes)]

    def bayes_posterior(self, X, prior):
        """Exact class posterior under ``prior`` (no corruption)."""
        logits = X @ self.means.T / self.class_std ** 2
        logits -= 0.5 * (self.means ** 2).sum(axis=1) / self.class_std ** 2
        logits += np.log(prior)
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)


def load_csv_pool(path, label_column="label"):
    """Per-class arrays from a CSV of numeric feature columns plus an integer label column."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or label_column not in reader.fieldnames:
            raise ConfigError(f"{path}: missing label column {label_column!r}")
        feats = [f for f in reader.fieldnames if f != label_column]
        rows, labels = [], []
        for r in reader:
            rows.append([float(r[f]) for f in feats])
            labels.append(int(r[label_column]))
    X = np.array(rows, dtype=np.float64)
    y = np.array(labels)
    classes = np.unique(y)
    if not np.array_equal(classes, np.arange(len(classes))):
        raise ConfigError(f"{path}: labels must be 0..C-1")
    return [X[y == c] for c in classes]


class _PoolQueue:
    def __init__(self, per_class, rng):
        self.data = [p[rng.permutation(len(p))] for p in per_class]
        self.pos = [0] * len(per_class)

    def take(self, c, n):
        s = self.pos[c]
        if s + n > len(self.data[c]):
            raise ConfigError(
                f"class {c}: clients demand more than the {len(self.data[c])} pooled samples")
        self.pos[c] = s + n
        return self.data[c][s:s + n]


def _label_counts(cfg, rng):
    C = cfg.num_classes
    if cfg.kind in ("label", "hybrid"):
        counts = np.full(C, cfg.minor_count)
        counts[rng.choice(C, cfg.major_classes, replace=False)] = cfg.major_count
    else:
        per = cfg.samples_per_client // C
        if per <= 0:
            raise ConfigError("too few samples per client for a uniform label prior")
        counts = np.full(C, per)
    return counts


def _corruption(cfg, role, rng):
    if cfg.kind in ("none", "label"):
        return Corruption.identity(cfg.dim)
    rngc = cfg.source_corruption if role == "source" else cfg.target_corruption
    lo, hi = np.log(rngc.scale[0]), np.log(rngc.scale[1])
    r = float(np.exp(rng.uniform(lo, hi)))
    offset = rngc.offset_std * rng.standard_normal(cfg.dim)
    noise = float(rng.uniform(*rngc.noise))
    return Corruption(r, offset, noise)


def sample_population(cfg, n_sources, n_targets, seed, pool=None):
    """Materialize ``n_sources + n_targets`` clients; fully determined by ``seed``."""
    if n_sources < 1 or n_targets < 1:
        raise ConfigError("need at least one source and one target client")
    if pool is None:
        gm = GaussianMixturePool(cfg.num_classes, cfg.dim, cfg.class_sep, cfg.class_std)
        pool = gm.draw(cfg.pool_per_class, rng_for(seed, _POOL))
    elif len(pool) != cfg.num_classes or pool[0].shape[1] != cfg.dim:
        raise ConfigError("external pool does not match num_classes/dim")
    queue = _PoolQueue(pool, rng_for(seed, _POOL, 1))
    sources, targets = [], []
    for cid in range(n_sources + n_targets):
        role = "source" if cid < n_sources else "target"
        rng = rng_for(seed, _CLIENT, cid)
        counts = _label_counts(cfg, rng)
        corr = _corruption(cfg, role, rng)
        X = np.concatenate([queue.take(c, int(n)) for c, n in enumerate(counts)])
        y = np.concatenate([np.full(int(n), c) for c, n in enumerate(counts)]).astype(np.int64)
        X = corr.apply(X, rng)
        perm = rng.permutation(len(y))
        X, y = np.ascontiguousarray(X[perm]), y[perm]
        prior = counts / counts.sum()
        if role == "source":
            n_val = int(round(cfg.val_fraction * len(y)))
            n_tr = len(y) - n_val
            sources.append(ClientSpec(cid, role, prior, corr, X[:n_tr], y[:n_tr],
                                      X[n_tr:], y[n_tr:]))
        else:
            targets.append(ClientSpec(cid, role, prior, corr, X, y))
    return ClientPopulation(cfg, sources, targets, seed)


# -- FedAvg pretraining ------------------------------------------------------

def _mean_in_order(vectors):
    acc = np.zeros_like(vectors[0])
    for v in vectors:
        acc = acc + v
    return acc / len(vectors)


def _local_sgd(model, X, y, lr, batch_size, epochs, momentum, seed, rnd, cid):
    losses = []
    for e in range(epochs):
        for Xb, yb in batches(X, y, batch_size, rng_for(seed, _PRETRAIN, rnd, cid, e)):
            loss, grad, cache = loss_and_grad(model, Xb, "cross_entropy", yb, mode=TRAIN_STATS)
            model.w -= lr * grad
            update_running_stats(model, cache.batch_stats, momentum)
            losses.append(loss)
    return model, (float(np.mean(losses)) if losses else float("nan"))


def fedavg_pretrain(sources, hidden, rounds, cohort, lr, batch_size, epochs=1, seed=0,
                    bn_momentum=0.1, init=None):
    """Train the global model with FedAvg on the sources' training splits.

    Returns ``(model, rows)`` where ``rows`` holds one dict per round with the
    mean local training loss.
    """
    if not sources:
        raise ConfigError("FedAvg needs at least one source client")
    if not 1 <= cohort <= len(sources):
        raise ConfigError(f"cohort size {cohort} must be in [1, {len(sources)}]")
    num_classes = int(max(int(c.y.max()) for c in sources if len(c.y)) + 1)
    if init is None:
        init = init_mlp(sources[0].X.shape[1], hidden, num_classes, rng_for(seed, _INIT))
    model = init.copy()
    rng = rng_for(seed, _PRETRAIN)
    rows = []
    for t in range(rounds):
        chosen = np.sort(rng.choice(len(sources), cohort, replace=False))
        ws, losses = [], []
        for i in chosen:
            c = sources[i]
            try:
                local, loss = _local_sgd(model.copy(), c.X, c.y, lr, batch_size, epochs,
                                         bn_momentum, seed, t, c.id)
            except NumericError as e:
                raise NumericError(f"FedAvg diverged at round {t + 1}: {e}") from e
            ws.append(local.w)
            losses.append(loss)
        mean_loss = float(np.nanmean(losses)) if not np.all(np.isnan(losses)) else float("nan")
        model = model.with_params(_mean_in_order(ws))
        if not np.isfinite(model.w).all() or not math.isfinite(mean_loss):
            raise NumericError(f"FedAvg diverged at round {t + 1}")
        rows.append({"round": t + 1, "train_loss": mean_loss})
    return model, rows


# -- adaptation-rate training ------------------------------------------------

@dataclass
class CommLedger:
    """Scalar traffic bookkeeping for rate training vs plain FedAvg."""

    D: int
    d: int
    rounds: int = 0
    cohort_sizes: list = field(default_factory=list)
    bytes_per_scalar: int = 8

    def record_round(self, cohort_size):
        self.rounds += 1
        self.cohort_sizes.append(int(cohort_size))

    @property
    def atp_scalars_per_path(self):
        return self.D + 2 * self.rounds * self.d

    @property
    def fedavg_scalars_per_path(self):
        return 2 * self.rounds * self.D

    @property
    def alpha_scalars_exchanged(self):
        return 2 * self.d * sum(self.cohort_sizes)

    @property
    def bytes_model_broadcast(self):
        return self.bytes_per_scalar * self.D

    @property
    def bytes_alpha_exchanged(self):
        return self.bytes_per_scalar * self.alpha_scalars_exchanged

    def to_dict(self):
        return {
            "D": self.D, "d": self.d, "rounds": self.rounds,
            "participation_paths": sum(self.cohort_sizes),
            "atp_scalars_per_path": self.atp_scalars_per_path,
            "fedavg_scalars_per_path": self.fedavg_scalars_per_path,
            "alpha_scalars_exchanged": self.alpha_scalars_exchanged,
            "bytes_model_broadcast": self.bytes_model_broadcast,
            "bytes_alpha_exchanged": self.bytes_alpha_exchanged,
        }


def client_train_round(X, y, w_G, rates, eta, epochs=1, batch_size=20, shuffle_key=None,
                       normalize=True, grad_clip=None):
    """Local rate training on one source client.

    For each batch: direction from the unlabeled inputs at ``w_G``, adapted
    model ``w_G + (A alpha) h``, one gradient step on the rates using labels.
    ``shuffle_key`` (a tuple of ints) seeds per-epoch shuffling; ``None``
    keeps dataset order. ``grad_clip`` bounds each rate-gradient coordinate.
    Returns ``(rates, stats)``.
    """
    if X is None or len(X) < batch_size:
        raise ConfigError("client has no full batch of labeled data")
    ces, accs = [], []
    for e in range(epochs):
        rng = None if shuffle_key is None else rng_for(*shuffle_key, e)
        for Xb, yb in batches(X, y, batch_size, rng):
            direction, _ = compute_update_direction(w_G, Xb)
            w_k = apply_adaptation(w_G, rates, direction)
            grad, ce, probs = alpha_gradient(w_k, direction, Xb, yb, normalize)
            ces.append(ce)
            accs.append(float((probs.argmax(axis=1) == yb).mean()))
            if grad_clip is not None:
                grad = np.clip(grad, -grad_clip, grad_clip)
            if eta > 0:
                rates = refine_alpha(rates, grad, eta)
    return rates, {"ce": float(np.mean(ces)), "acc": float(np.mean(accs))}


def server_aggregate(alphas):
    """Coordinate-wise mean, summed in list order."""
    if not alphas:
        raise ValueError("nothing to aggregate")
    vecs = [np.asarray(a, dtype=np.float64) for a in alphas]
    if any(v.shape != vecs[0].shape for v in vecs):
        raise DimensionError("alpha vectors differ in length")
    return _mean_in_order(vecs)


_worker = {}


def _init_worker(sources, w_G, eta, epochs, batch_size, seed, normalize, mask, grad_clip):
    _worker.update(sources=sources, w_G=w_G, eta=eta, epochs=epochs, batch_size=batch_size,
                   seed=seed, normalize=normalize, mask=mask, grad_clip=grad_clip)


def _run_client(task):
    idx, rnd, alpha = task
    s = _worker
    c = s["sources"][idx]
    rates = AdaptationRates(s["w_G"].manifest, alpha, s["mask"])
    rates, stats = client_train_round(c.X_val, c.y_val, s["w_G"], rates, s["eta"], s["epochs"],
                                      s["batch_size"], (s["seed"], _ATP, rnd, c.id),
                                      s["normalize"], s["grad_clip"])
    return rates.alpha, stats


def atp_train(sources, w_G, rounds, cohort, eta, epochs=1, batch_size=20, variant="full",
              seed=0, jobs=1, normalize=True, grad_clip=None):
    """Learn adaptation rates over source clients (validation splits).

    Returns ``(rates, rows, ledger)``; ``rows`` has one dict per round with
    mean pre-step cross-entropy, accuracy and the rate norm.
    """
    if not 1 <= cohort <= len(sources):
        raise ConfigError(f"cohort size {cohort} must be in [1, {len(sources)}]")
    rates = AdaptationRates.ablation(w_G.manifest, variant)
    ledger = CommLedger(w_G.D, w_G.d)
    rng = rng_for(seed, _ATP)
    rows = []
    before = w_G.checksum()
    with OrderedPool(jobs, _init_worker, (sources, w_G, eta, epochs, batch_size, seed,
                                          normalize, rates.mask, grad_clip)) as pool:
        for t in range(rounds):
            chosen = np.sort(rng.choice(len(sources), cohort, replace=False))
            results = pool.map(_run_client, [(int(i), t, rates.alpha) for i in chosen])
            rates = rates.with_alpha(server_aggregate([a for a, _ in results]))
            ledger.record_round(len(chosen))
            row = {"round": t + 1,
                   "mean_ce": float(np.mean([s["ce"] for _, s in results])),
                   "mean_acc": float(np.mean([s["acc"] for _, s in results])),
                   "alpha_norm": rates.norm}
            if not np.isfinite(rates.alpha).all():
                raise NumericError(f"adaptation rates diverged at round {t + 1}")
            rows.append(row)
    assert w_G.checksum() == before
    return rates, rows, ledger


def write_rounds_csv(rows, path):
    path = Path(path)
    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})
