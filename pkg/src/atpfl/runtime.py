"""Test-time adaptation on target clients.

Adaptation code only ever receives input batches. Labels stay with the
evaluator in :func:`evaluate_client`.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adaptation import UpdateDirection, apply_adaptation, compute_update_direction
from .errors import DegenerateBatchError, UsageError
from .fedsim import batches
from .nn import FROZEN_STATS, TRAIN_STATS, forward, loss_and_grad, predict

BATCH = "batch"
ONLINE = "online"

METHODS = ("none", "atp-batch", "atp-online", "bn-adapt", "tent", "em")


class AdaptationSession:
    """Per-client test-time state.

    ``batch`` mode adapts each batch independently from ``w_G``. ``online``
    mode keeps a cumulative moving average of the directions and always
    applies a single step of it from ``w_G``.
    """

    def __init__(self, w_G, rates, mode=BATCH):
        if mode not in (BATCH, ONLINE):
            raise ValueError(f"mode must be {BATCH!r} or {ONLINE!r}")
        self.w_G = w_G
        self.rates = rates
        self.mode = mode
        self.h_history = np.zeros(w_G.D) if mode == ONLINE else None
        self.k = 0
        self._closed = False
        self.last_model = None

    def step(self, X):
        """Adapt to batch ``X`` and return class probabilities for it."""
        if self._closed:
            raise UsageError("session is closed")
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] < 2:
            raise DegenerateBatchError("test batches need at least 2 samples")
        direction, _ = compute_update_direction(self.w_G, X)
        if self.mode == ONLINE:
            self.k += 1
            k = self.k
            self.h_history = ((k - 1) / k) * self.h_history + (1.0 / k) * direction.h
            if not np.isfinite(self.h_history).all():
                self._closed = True
                raise UsageError("online direction history became non-finite")
            direction = UpdateDirection(self.w_G.manifest, self.h_history)
        else:
            self.k += 1
        model = apply_adaptation(self.w_G, self.rates, direction)
        self.last_model = model
        return predict(model, X, FROZEN_STATS)

    def close(self):
        self._closed = True


def adapt_and_predict_batch(session, X):
    return session.step(X)


# -- baselines ---------------------------------------------------------------

def baseline_none(w_G, X):
    return predict(w_G, X, FROZEN_STATS)


def baseline_bn_adapt(w_G, X):
    """Normalize with the current batch statistics (momentum 1)."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] < 2:
        raise DegenerateBatchError("BN-Adapt needs at least 2 samples")
    probs, _ = forward(w_G, X, TRAIN_STATS)
    return probs


def bn_affine_mask(model):
    """Length-D mask of BN weight and bias coordinates."""
    mask = np.zeros(model.D, bool)
    for e in model.manifest:
        if model.layers[e.layer].kind == "batchnorm" and e.role in ("weight", "bias"):
            mask[e.offset:e.offset + e.length] = True
    return mask


def baseline_tent(w_G, X, lr, steps=1, replace_stats=True):
    """Entropy minimization on BN scale/shift, then predict.

    With ``replace_stats`` the batch statistics are used (BN-Adapt plus
    gradient steps); otherwise running statistics stay frozen.
    """
    mode = TRAIN_STATS if replace_stats else FROZEN_STATS
    mask = bn_affine_mask(w_G)
    model = w_G.copy()
    for _ in range(steps):
        _, grad, _ = loss_and_grad(model, X, "entropy", mode=mode)
        model.w[mask] -= lr * grad[mask]
    probs, _ = forward(model, X, mode)
    return probs


@dataclass
class EMResult:
    posteriors: np.ndarray
    prior: np.ndarray
    iterations: int
    converged: bool


def em_prior_adjust(posteriors, train_prior, max_iter=50, tol=1e-6):
    """Re-estimate the label prior by EM and reweight the posteriors.

    Alternates prior = mean posterior and Bayes reweighting by
    ``prior / train_prior``; stops when the L1 change drops below ``tol``.
    """
    p0 = np.asarray(posteriors, dtype=np.float64)
    train_prior = np.asarray(train_prior, dtype=np.float64)
    prior = train_prior.copy()
    post = p0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        ratio = prior / train_prior
        weighted = p0 * ratio
        post = weighted / weighted.sum(axis=1, keepdims=True)
        new_prior = post.mean(axis=0)
        delta = np.abs(new_prior - prior).sum()
        prior = new_prior
        if delta < tol:
            converged = True
            break
    ratio = prior / train_prior
    weighted = p0 * ratio
    post = weighted / weighted.sum(axis=1, keepdims=True)
    return EMResult(post, prior, it, converged)


def baseline_em_prior(w_G, X, max_iter=50, train_prior=None, tol=1e-6):
    """Frozen-model posteriors on all of ``X``, prior-adjusted by EM."""
    if train_prior is None:
        train_prior = np.full(w_G.num_classes, 1.0 / w_G.num_classes)
    return em_prior_adjust(predict(w_G, X), train_prior, max_iter, tol)


# -- evaluation --------------------------------------------------------------

@dataclass
class EvalResult:
    client_id: int
    method: str
    accuracy: float
    ce: float
    per_batch: list = field(default_factory=list)

    def to_dict(self):
        return {"client": self.client_id, "mode": self.method, "accuracy": self.accuracy,
                "ce": self.ce, "per_batch": self.per_batch}


def _score(probs, y):
    pred = probs.argmax(axis=1)
    p = probs[np.arange(len(y)), y]
    return pred == y, -np.log(np.maximum(p, 1e-12))


def run_method(method, w_G, X_batches, rates=None, tent_lr=1e-2, train_prior=None):
    """Predictions for each unlabeled batch under ``method`` (labels never passed)."""
    if method == "none":
        return [baseline_none(w_G, X) for X in X_batches]
    if method in ("atp-batch", "atp-online"):
        if rates is None:
            raise UsageError(f"{method} needs adaptation rates")
        s = AdaptationSession(w_G, rates, BATCH if method == "atp-batch" else ONLINE)
        return [s.step(X) for X in X_batches]
    if method == "bn-adapt":
        return [baseline_bn_adapt(w_G, X) for X in X_batches]
    if method == "tent":
        return [baseline_tent(w_G, X, tent_lr) for X in X_batches]
    if method == "em":
        sizes = [len(X) for X in X_batches]
        if not sizes:
            return []
        joint = baseline_em_prior(w_G, np.concatenate(X_batches), train_prior=train_prior).posteriors
        return np.split(joint, np.cumsum(sizes)[:-1])
    raise ValueError(f"unknown method {method!r}")


def evaluate_client(client, w_G, method, rates=None, batch_size=20, tent_lr=1e-2,
                    train_prior=None):
    """Stream the client's data in dataset order and score each batch."""
    pairs = batches(client.X, client.y, batch_size)
    preds = run_method(method, w_G, [X for X, _ in pairs], rates, tent_lr, train_prior)
    correct, ces, per_batch = [], [], []
    for k, ((_, y), probs) in enumerate(zip(pairs, preds)):
        ok, ce = _score(probs, y)
        correct.append(ok)
        ces.append(ce)
        per_batch.append({"batch": k, "accuracy": float(ok.mean()), "ce": float(ce.mean())})
    correct = np.concatenate(correct) if correct else np.zeros(0)
    ces = np.concatenate(ces) if ces else np.zeros(0)
    return EvalResult(client.id, method, float(correct.mean()), float(ces.mean()), per_batch)


def write_client_report(result, path):
    Path(path).write_text(json.dumps(result.to_dict(), indent=1))


def aggregate_table(results_by_method):
    """Rows of (method, mean accuracy %, s.d. %, n clients)."""
    rows = []
    for method, results in results_by_method.items():
        accs = np.array([r.accuracy for r in results]) * 100.0
        rows.append({"method": method, "mean_acc": float(accs.mean()),
                     "sd_acc": float(accs.std()), "clients": len(accs)})
    return rows


def write_aggregate_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "mean_acc", "sd_acc", "clients"])
        for r in rows:
            w.writerow([r["method"], f"{r['mean_acc']:.4f}", f"{r['sd_acc']:.4f}", r["clients"]])
