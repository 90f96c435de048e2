"""Adaptive test-time personalization for federated learning.

A global model is trained with FedAvg on source clients; then one scalar
adaptation rate per module is learned so that each unseen target client can
adapt the model to its own unlabeled test batches without further training.
"""
from .adaptation import (AdaptationRates, UpdateDirection, alpha_gradient, apply_adaptation,
                         compute_update_direction, load_alpha, refine_alpha, save_alpha)
from .errors import (ConfigError, DegenerateBatchError, DimensionError, DomainError,
                     NumericError, UsageError)
from .kernels import BACKEND
from .nn import (LayerSpec, ModuleManifest, ParameterStore, backward, build_model,
                 cross_entropy, entropy_loss, forward, init_mlp, load_checkpoint, mlp_layers,
                 predict, save_checkpoint)

__version__ = "0.1.0"
