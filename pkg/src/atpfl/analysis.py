"""Executable checks of the method's analytical claims.

* last-layer bias calibration for label shift,
* BN statistic adaptation removing affine feature shift,
* the generalization bound for learned rates (log-space calculator),
* the 1-D toy showing why negative rates help under label shift,
* grouping learned rates by module kind and depth.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import stats as sps

from .adaptation import AdaptationRates, apply_adaptation, compute_update_direction
from .errors import DomainError
from .nn import (FROZEN_STATS, RUNNING_STAT, LayerSpec, build_model, cross_entropy, forward,
                 predict)


# -- label shift: bias calibration ---------------------------------------------

def last_affine_layer(model):
    for li in range(len(model.layers) - 1, -1, -1):
        if model.layers[li].kind == "affine":
            if li != len(model.layers) - 2:
                raise DomainError("last affine layer must feed the softmax directly")
            return li
    raise DomainError("model has no affine layer")


def calibrate_last_layer(model, p_prior, q_prior):
    """Copy of ``model`` with ``log(q/p)`` added to the final affine bias."""
    p = np.asarray(p_prior, dtype=np.float64)
    q = np.asarray(q_prior, dtype=np.float64)
    if p.shape != (model.num_classes,) or q.shape != p.shape:
        raise DomainError("priors must have one entry per class")
    if (p <= 0).any() or (q <= 0).any():
        raise DomainError("priors must be strictly positive")
    out = model.copy()
    out.view(f"layer{last_affine_layer(model)}.bias")[...] += np.log(q) - np.log(p)
    return out


def gaussian_bayes_model(means, std, prior):
    """Affine+softmax model equal to the exact posterior of a shared-variance Gaussian mixture."""
    means = np.asarray(means, dtype=np.float64)
    prior = np.asarray(prior, dtype=np.float64)
    if (prior <= 0).any():
        raise DomainError("class priors must be strictly positive")
    C, dim = means.shape
    model = build_model([LayerSpec("affine", dim, C), LayerSpec("softmax", C, C)])
    model.view("layer0.weight")[...] = means / std ** 2
    model.view("layer0.bias")[...] = -0.5 * (means ** 2).sum(axis=1) / std ** 2 + np.log(prior)
    return model


def bayes_posterior(X, means, std, prior):
    logits = X @ means.T / std ** 2 - 0.5 * (means ** 2).sum(axis=1) / std ** 2 + np.log(prior)
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class Prop31Report:
    max_pointwise_dev: float
    ce_calibrated: float
    ce_bayes: float
    ce_uncalibrated: float
    samples: int

    @property
    def ce_gap(self):
        return abs(self.ce_calibrated - self.ce_bayes)

    def passed(self, pointwise_tol=1e-6, ce_tol=1e-3):
        return self.max_pointwise_dev <= pointwise_tol and self.ce_gap <= ce_tol


def prop31_check(p_prior, q_prior, num_samples=100_000, dim=None, sep=2.0, std=1.0, seed=0):
    """Calibrate an exactly calibrated Gaussian-mixture model from ``p`` to ``q``.

    Samples are drawn under ``q``; the reference posterior and CE are the
    closed-form Bayes ones, computed independently of the model code.
    """
    p = np.asarray(p_prior, dtype=np.float64)
    q = np.asarray(q_prior, dtype=np.float64)
    C = len(p)
    dim = C if dim is None else dim
    means = np.zeros((C, dim))
    means[np.arange(C), np.arange(C)] = sep
    rng = np.random.default_rng(seed)
    y = rng.choice(C, size=num_samples, p=q)
    X = means[y] + std * rng.standard_normal((num_samples, dim))
    model = gaussian_bayes_model(means, std, p)
    calibrated = calibrate_last_layer(model, p, q)
    post = predict(calibrated, X)
    ref = bayes_posterior(X, means, std, q)
    rows = np.arange(num_samples)
    return Prop31Report(
        max_pointwise_dev=float(np.abs(post - ref).max()),
        ce_calibrated=cross_entropy(post, y),
        ce_bayes=float(-np.log(ref[rows, y]).mean()),
        ce_uncalibrated=cross_entropy(predict(model, X), y),
        samples=num_samples,
    )


# -- feature shift: BN statistic alignment -------------------------------------

@dataclass
class AlignmentReport:
    source_mean: float
    source_std: float
    adapted_mean: float
    adapted_std: float
    expected_mean: float
    expected_std: float
    ks_before: float
    ks_after: float
    samples: int
    threshold: float = 0.05

    @property
    def aligned(self):
        return self.ks_after < self.threshold


def _bn_probe(mean, var):
    model = build_model([LayerSpec("batchnorm", 1, 1), LayerSpec("affine", 1, 2),
                         LayerSpec("softmax", 2, 2)])
    model.view("layer0.weight")[...] = 1.0
    model.view("layer0.running_mean")[...] = mean
    model.view("layer0.running_var")[...] = var
    model.view("layer1.weight")[...] = [[-1.0], [1.0]]
    return model


def _normalized(model, X):
    _, cache = forward(model, X, FROZEN_STATS)
    return cache.aux[0][0].ravel()


def bn_align_check(scale=2.0, offset=3.0, samples=10_000, source_mean=0.0, source_std=1.0,
                   shift="affine", seed=0, threshold=0.05, reference_factor=10):
    """Shift 1-D features, adapt BN running stats fully, and compare distributions.

    The target batch goes through the real adaptation path (update direction
    plus rate 1 on the statistic modules). Normalized target features are
    compared with normalized source features by a two-sample KS statistic
    against a reference sample ``reference_factor`` times larger.
    """
    rng = np.random.default_rng(seed)
    src = source_mean + source_std * rng.standard_normal((samples * reference_factor, 1))
    base = source_mean + source_std * rng.standard_normal((samples, 1))
    if shift == "affine":
        tgt = scale * base + offset
    elif shift == "cube":
        tgt = base ** 3
    else:
        raise ValueError(f"unknown shift {shift!r}")
    model = _bn_probe(source_mean, source_std ** 2)
    direction, _ = compute_update_direction(model, tgt)
    alpha = np.where(np.array(model.manifest.kinds) == RUNNING_STAT, 1.0, 0.0)
    adapted = apply_adaptation(model, AdaptationRates(model.manifest, alpha, alpha > 0), direction)
    z_src = _normalized(model, src)
    z_before = _normalized(model, tgt)
    z_after = _normalized(adapted, tgt)
    return AlignmentReport(
        source_mean=source_mean, source_std=source_std,
        adapted_mean=float(adapted.view("layer0.running_mean")[0]),
        adapted_std=float(np.sqrt(adapted.view("layer0.running_var")[0])),
        expected_mean=scale * source_mean + offset if shift == "affine" else float("nan"),
        expected_std=scale * source_std if shift == "affine" else float("nan"),
        ks_before=float(sps.ks_2samp(z_src, z_before).statistic),
        ks_after=float(sps.ks_2samp(z_src, z_after).statistic),
        samples=samples, threshold=threshold,
    )


# -- generalization bound --------------------------------------------------------

@dataclass(frozen=True)
class BoundInput:
    L: float  # model Lipschitz constant
    H: float  # per-module direction norm bound
    R: float  # rate-norm radius
    d: int  # number of modules
    N: int  # source clients
    K: int  # batches per source client
    eps: float

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v > 0:
                raise DomainError(f"bound input {k} must be positive")


@dataclass(frozen=True)
class BoundResult:
    log_value: float
    value: float  # raw right-hand side, may exceed 1 or be inf
    probability: float  # clamped to [0, 1]


def generalization_bound(b):
    """``(12 L H R / eps)^d * 4 exp(-N K eps^2 / (2 (sqrt(K)+1)^2))`` in log space."""
    log_v = (b.d * math.log(12.0 * b.L * b.H * b.R / b.eps) + math.log(4.0)
             - b.N * b.K * b.eps ** 2 / (2.0 * (math.sqrt(b.K) + 1.0) ** 2))
    value = math.exp(log_v) if log_v < 709.0 else math.inf
    return BoundResult(log_v, value, min(1.0, value))


# -- toy experiment ----------------------------------------------------------------

@dataclass
class ToyConfig:
    mean: float = 1.0  # class means are -mean and +mean
    std: float = 0.8
    train_prior: float = 0.5  # Pr(y = +1) at training
    test_prior: float = 5.0 / 6.0
    alphas: tuple = (-1.0, -0.5, 0.0, 0.5, 1.0)
    samples: int = 100_000
    seed: int = 0

    def __post_init__(self):
        if not self.std > 0:
            raise DomainError("std must be positive")
        for p in (self.train_prior, self.test_prior):
            if not 0 < p < 1:
                raise DomainError("priors must lie in (0, 1)")


@dataclass
class ToyResult:
    train_accuracy: float
    rows: list = field(default_factory=list)  # (alpha, accuracy, adapted mean, adapted var)

    def accuracy(self, alpha):
        for a, acc, *_ in self.rows:
            if a == alpha:
                return acc
        raise KeyError(alpha)


def toy_model(cfg):
    """One BN feature with stored training statistics and a sign classifier (gamma>0, beta=0)."""
    p = cfg.train_prior
    mu = (2 * p - 1) * cfg.mean
    var = cfg.std ** 2 + cfg.mean ** 2 - mu ** 2
    return _bn_probe(mu, var)


def _toy_sample(cfg, prior, n, rng):
    y = (rng.random(n) < prior).astype(np.int64)  # 1 is the positive class
    x = np.where(y == 1, cfg.mean, -cfg.mean) + cfg.std * rng.standard_normal(n)
    return x[:, None], y


def toy_experiment(cfg=None):
    """Accuracy under the test prior after moving BN statistics with rate alpha."""
    cfg = cfg or ToyConfig()
    rng = np.random.default_rng(cfg.seed)
    model = toy_model(cfg)
    Xtr, ytr = _toy_sample(cfg, cfg.train_prior, cfg.samples, rng)
    train_acc = float((predict(model, Xtr).argmax(axis=1) == ytr).mean())
    Xte, yte = _toy_sample(cfg, cfg.test_prior, cfg.samples, rng)
    direction, _ = compute_update_direction(model, Xte)
    stat_mask = np.array(model.manifest.kinds) == RUNNING_STAT
    rows = []
    for a in cfg.alphas:
        rates = AdaptationRates(model.manifest, np.where(stat_mask, a, 0.0), stat_mask)
        adapted = apply_adaptation(model, rates, direction)
        acc = float((predict(adapted, Xte).argmax(axis=1) == yte).mean())
        rows.append((float(a), acc, float(adapted.view("layer0.running_mean")[0]),
                     float(adapted.view("layer0.running_var")[0])))
    return ToyResult(train_acc, rows)


def toy_accuracy_exact(cfg, alpha):
    """Closed-form test accuracy of the toy for rate ``alpha`` (decision at the adapted mean)."""
    p, q, m, s = cfg.train_prior, cfg.test_prior, cfg.mean, cfg.std
    mu_train = (2 * p - 1) * m
    mu_test = (2 * q - 1) * m
    t = mu_train + alpha * (mu_test - mu_train)
    return q * sps.norm.sf((t - m) / s) + (1 - q) * sps.norm.cdf((t + m) / s)


# -- learned-rate report ---------------------------------------------------------

def _depths(model_layers):
    depth, out = 0, []
    for layer in model_layers:
        if layer.kind == "affine":
            depth += 1
        out.append(depth)
    return out


def alpha_report(rates, layers):
    """Per-module rows plus group means by kind, role and depth."""
    depth_of = _depths(layers)
    rows = []
    for e, a in zip(rates.manifest, rates.alpha):
        rows.append({"module": e.name, "kind": e.kind, "role": e.role, "depth": depth_of[e.layer],
                     "alpha": float(a), "sign": int(np.sign(a))})
    groups = {}
    for key_fn, label in ((lambda r: r["kind"], "kind"), (lambda r: r["role"], "role"),
                          (lambda r: f"{r['depth']}:{r['kind']}", "depth:kind")):
        for r in rows:
            groups.setdefault((label, key_fn(r)), []).append(r["alpha"])
    summary = [{"group_by": g, "group": k, "mean": float(np.mean(v)),
                "min": float(np.min(v)), "max": float(np.max(v)), "count": len(v)}
               for (g, k), v in groups.items()]
    return {"modules": rows, "groups": summary}


def group_mean(report, group_by, group):
    for g in report["groups"]:
        if g["group_by"] == group_by and g["group"] == group:
            return g["mean"]
    raise KeyError((group_by, group))


def write_rows_csv(rows, path):
    if not rows:
        open(path, "w").close()
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})
