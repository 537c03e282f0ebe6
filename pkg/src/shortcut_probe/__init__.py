"""Dual-head shortcut probing on a small numpy autodiff engine.

A shared trunk feeds a lesion head and a stain head; the stain term of the
total loss is weighted by ``mu2`` to test (supervised) or suppress (entropy)
reliance on stain. Predictive uncertainty comes from MC dropout.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConfigError,
    DatasetError,
    DomainError,
    NonFiniteGradientError,
    ShapeError,
    UsageError,
)
from .model import DualHeadModel, TrunkConfig, make_dual_head_model, make_stain_only_model, mc_predict  # noqa: E402
from .objectives import LossWeights, combined_loss, cross_entropy, stain_entropy  # noqa: E402
from .synthdata import GenSpec, SplitPlan, generate, group_split, read_dataset, write_dataset  # noqa: E402
from .training import TrainConfig, train  # noqa: E402

__all__ = [
    "ConfigError", "DatasetError", "DomainError", "NonFiniteGradientError", "ShapeError", "UsageError",
    "DualHeadModel", "TrunkConfig", "make_dual_head_model", "make_stain_only_model", "mc_predict",
    "LossWeights", "combined_loss", "cross_entropy", "stain_entropy",
    "GenSpec", "SplitPlan", "generate", "group_split", "read_dataset", "write_dataset",
    "TrainConfig", "train",
]
