"""Federated multi-view matrix factorization.

Joint factorization of a user-item interaction matrix with user-side and
item-side feature matrices, trained through a simulated three-party
federation protocol (clients, aggregating server, item server), with
cold-start inference from side features and top-k ranking evaluation.
"""

from fedmvmf.model import FeatureVector, HyperParams, InteractionRow
from fedmvmf.optimizer import AdamConfig, AdamState, adam_step

__version__ = "0.1.0"

__all__ = [
    "AdamConfig",
    "AdamState",
    "FeatureVector",
    "HyperParams",
    "InteractionRow",
    "adam_step",
    "__version__",
]
