import numpy as np
import pytest

from atpfl.nn import LayerSpec, build_model, init_mlp


def random_model(rng, input_dim=4, hidden=(5,), num_classes=3, batchnorm=True):
    """Small MLP with non-trivial BN parameters and running statistics."""
    model = init_mlp(input_dim, hidden, num_classes, rng, batchnorm)
    for e in model.manifest:
        v = model.view(e.name)
        if e.role == "bias":
            v[...] = 0.3 * rng.standard_normal(e.shape)
        elif model.layers[e.layer].kind == "batchnorm":
            if e.role == "weight":
                v[...] = rng.uniform(0.5, 1.5, e.shape)
            elif e.role == "running_mean":
                v[...] = 0.5 * rng.standard_normal(e.shape)
            elif e.role == "running_var":
                v[...] = rng.uniform(0.5, 2.0, e.shape)
    return model


def linear_model(rng, input_dim=3, num_classes=4):
    model = build_model([LayerSpec("affine", input_dim, num_classes),
                         LayerSpec("softmax", num_classes, num_classes)])
    model.w[:] = rng.standard_normal(model.D)
    return model


def central_diff(f, w, step=1e-6):
    g = np.zeros_like(w)
    for i in range(len(w)):
        wp, wm = w.copy(), w.copy()
        wp[i] += step
        wm[i] -= step
        g[i] = (f(wp) - f(wm)) / (2 * step)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
