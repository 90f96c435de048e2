"""NumPy implementations of the hot kernels.

Used when the compiled extension is unavailable or ``ATPFL_PURE_PYTHON=1``.
Every function here has a twin with an identical signature in ``_ckernels``.
Inputs are float64, 2-D arrays are (batch, features).
"""
import numpy as np


def bn_forward_train(x, gamma, beta, eps):
    mean = x.mean(axis=0)
    centered = x - mean
    var = (centered * centered).mean(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    return xhat * gamma + beta, xhat, mean, var, inv_std


def bn_forward_frozen(x, mean, var, gamma, beta, eps):
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return xhat * gamma + beta, xhat, inv_std


def bn_backward_train(dy, xhat, gamma, inv_std):
    n = dy.shape[0]
    dbeta = dy.sum(axis=0)
    dgamma = (dy * xhat).sum(axis=0)
    dxhat = dy * gamma
    dx = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    return dx, dgamma, dbeta


def bn_backward_frozen(dy, xhat, gamma, inv_std):
    dbeta = dy.sum(axis=0)
    dgamma = (dy * xhat).sum(axis=0)
    dx = dy * (gamma * inv_std)
    dmean = -dbeta * gamma * inv_std
    dvar = -0.5 * dgamma * gamma * inv_std * inv_std
    return dx, dgamma, dbeta, dmean, dvar


def log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def entropy_grad(logits):
    """Mean row entropy and its gradient w.r.t. the logits."""
    logp = log_softmax(logits)
    p = np.exp(logp)
    ent = -(p * logp).sum(axis=1)
    dlogits = -p * (logp + ent[:, None]) / logits.shape[0]
    return p, float(ent.mean()), dlogits


def ce_grad(logits, labels):
    """Mean cross-entropy against integer labels and its logit gradient."""
    n = logits.shape[0]
    logp = log_softmax(logits)
    p = np.exp(logp)
    rows = np.arange(n)
    loss = float(-logp[rows, labels].mean())
    dlogits = p.copy()
    dlogits[rows, labels] -= 1.0
    dlogits /= n
    return p, loss, dlogits


def segment_dot(h, g, offsets, lengths):
    out = np.empty(len(offsets))
    for i in range(len(offsets)):
        s = offsets[i]
        e = s + lengths[i]
        out[i] = np.dot(h[s:e], g[s:e])
    return out


def scatter_axpy(w, alpha, h, offsets, lengths):
    """w + (A alpha) * h with A given implicitly by the segments."""
    scale = np.repeat(alpha, lengths)
    # zero-rate modules are copied untouched so that alpha=0 is bit-exact
    out = np.array(w, dtype=np.float64)
    nz = scale != 0.0
    out[nz] += scale[nz] * h[nz]
    return out
