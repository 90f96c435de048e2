"""Per-module adaptation: update directions, applying rates, and rate gradients.

A model adapted to a batch is ``w_G + (A alpha) * h`` where ``h`` is the
unsupervised update direction and ``A`` assigns each module's rate to its
coordinates. ``h`` is the negative entropy gradient on trainable modules and
``batch statistic - running statistic`` on BN running-statistic modules.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import DegenerateBatchError, DimensionError, UsageError
from .nn import (FROZEN_STATS, RUNNING_STAT, TRAINABLE, ModuleManifest,
                 ParameterStore, loss_and_grad)

__all__ = [
    "ModuleManifest", "AdaptationRates", "UpdateDirection",
    "compute_update_direction", "apply_adaptation", "alpha_gradient", "refine_alpha",
    "save_alpha", "load_alpha",
]


@dataclass
class AdaptationRates:
    manifest: ModuleManifest
    alpha: np.ndarray
    mask: np.ndarray  # True = learnable; False entries are pinned at 0

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64).copy()
        self.mask = np.asarray(self.mask, dtype=bool).copy()
        d = len(self.manifest)
        if self.alpha.shape != (d,) or self.mask.shape != (d,):
            raise DimensionError(f"alpha/mask must have length {d}")
        self.alpha[~self.mask] = 0.0

    @classmethod
    def zeros(cls, manifest, mask=None):
        d = len(manifest)
        return cls(manifest, np.zeros(d), np.ones(d, bool) if mask is None else mask)

    @classmethod
    def ablation(cls, manifest, variant):
        """``full``, ``params`` (trainable modules only) or ``stats`` (running stats only)."""
        if variant == "full":
            mask = np.ones(len(manifest), bool)
        elif variant == "params":
            mask = manifest.module_mask(TRAINABLE)
        elif variant == "stats":
            mask = manifest.module_mask(RUNNING_STAT)
        else:
            raise ValueError(f"unknown ablation variant {variant!r}")
        return cls.zeros(manifest, mask)

    def with_alpha(self, alpha):
        return AdaptationRates(self.manifest, alpha, self.mask)

    @property
    def norm(self):
        return float(np.linalg.norm(self.alpha))


@dataclass
class UpdateDirection:
    manifest: ModuleManifest
    h: np.ndarray

    def module(self, name):
        return self.h[self.manifest.slice(name)]


def compute_update_direction(model, X, mode=FROZEN_STATS):
    """Unsupervised direction for a batch, evaluated at the (fixed) model.

    Returns ``(direction, entropy)``. A single forward pass in ``mode``
    provides both the entropy gradient and the per-feature batch statistics.
    The default normalizes with the running statistics, so the parameter
    directions and the statistic directions are decoupled.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise DegenerateBatchError("update direction needs a batch of at least 2 samples")
    ent, grad, cache = loss_and_grad(model, X, "entropy", mode=mode, record_stats=True)
    h = -grad
    for name, value in cache.batch_stats.items():
        sl = model.manifest.slice(name)
        h[sl] = value - model.w[sl]
    return UpdateDirection(model.manifest, h), ent


def _check(model, rates, direction):
    man = model.manifest
    if rates.manifest is not man and rates.manifest != man:
        raise DimensionError("adaptation rates use a different module manifest")
    if direction.h.shape != (model.D,):
        raise DimensionError(f"direction length {direction.h.shape} != D={model.D}")


def apply_adaptation(w_G, rates, direction):
    """Return ``w_G + (A alpha) * h`` as a new store; ``w_G`` is untouched."""
    _check(w_G, rates, direction)
    man = w_G.manifest
    w = kernels.scatter_axpy(w_G.w, rates.alpha, direction.h, man.offsets, man.lengths)
    return ParameterStore(w_G.layers, man, w)


def alpha_gradient(w_k, direction, X, labels, normalize=True):
    """Gradient of the supervised loss at ``w_k`` w.r.t. the rates.

    Per module: inner product of the direction slice and the cross-entropy
    gradient slice, divided by sqrt(module size) when ``normalize``.
    Returns ``(grad, ce_loss, probabilities)``.
    """
    if direction.h.shape != (w_k.D,):
        raise UsageError("direction does not match the adapted model")
    loss, g, cache = loss_and_grad(w_k, X, "cross_entropy", labels, mode=FROZEN_STATS)
    man = w_k.manifest
    out = kernels.segment_dot(direction.h, g, man.offsets, man.lengths)
    if normalize:
        out = out / np.sqrt(man.lengths)
    return out, loss, cache.probs


def refine_alpha(rates, grad, eta, mask=None):
    """One gradient-descent step on the rates; masked-off modules stay at 0."""
    if not eta > 0:
        raise ValueError("learning rate must be positive")
    mask = rates.mask if mask is None else np.asarray(mask, bool)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != rates.alpha.shape:
        raise DimensionError("gradient length does not match alpha")
    alpha = np.where(mask, rates.alpha - eta * grad, 0.0)
    return AdaptationRates(rates.manifest, alpha, mask)


def save_alpha(rates, path):
    rows = [{"module": e.name, "kind": e.kind, "alpha": float(a), "learnable": bool(m)}
            for e, a, m in zip(rates.manifest, rates.alpha, rates.mask)]
    Path(path).write_text(json.dumps(rows, indent=1))


def load_alpha(path, manifest):
    rows = json.loads(Path(path).read_text())
    if [r["module"] for r in rows] != list(manifest.names):
        raise DimensionError("alpha file modules do not match the model")
    return AdaptationRates(manifest, [r["alpha"] for r in rows],
                           [r.get("learnable", True) for r in rows])
