"""Loss functions: cross-entropy, stain-head entropy and the weighted dual-head total.

The total is ``mu1 * CE(lesion) + mu2 * S`` where ``S`` is either the
supervised stain cross-entropy or the mean stain-prediction entropy.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, UsageError
from .tensor import Tensor

PROB_FLOOR = 1e-12

SUPERVISED_CE = "supervised_ce"
ENTROPY_MAX = "entropy_max"
NONE = "none"
STAIN_MODES = (SUPERVISED_CE, ENTROPY_MAX, NONE)


@dataclass(frozen=True)
class LossWeights:
    mu1: float = 1.0
    mu2: float = 0.0
    stain_mode: str = SUPERVISED_CE

    def __post_init__(self):
        if self.stain_mode not in STAIN_MODES:
            raise ConfigError(f"stain_mode must be one of {STAIN_MODES}, got {self.stain_mode!r}")
        if self.mu1 < 0:
            raise ConfigError(f"mu1 must be >= 0, got {self.mu1}")
        if self.stain_mode == ENTROPY_MAX and self.mu2 > 0:
            raise ConfigError(
                f"entropy_max with mu2={self.mu2} > 0 would minimize stain entropy; use mu2 <= 0")

    @property
    def needs_stain_labels(self) -> bool:
        return self.stain_mode == SUPERVISED_CE and self.mu2 != 0


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Batch mean of -log p[label], with probabilities floored at 1e-12."""
    labels = np.asarray(labels, dtype=np.int64)
    k = probs.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    logp = T.log(T.clamp_min(probs, PROB_FLOOR))
    return T.scale(T.mean(T.pick(logp, labels)), -1.0)


def stain_entropy(probs: Tensor) -> Tensor:
    """Mean per-sample entropy (nats) of the stain distribution."""
    logp = T.log(T.clamp_min(probs, PROB_FLOOR))
    return T.scale(T.mean(T.tsum(T.mul(probs, logp), axis=-1)), -1.0)


def stain_term(stain_probs: Tensor, stain_labels, w: LossWeights) -> Optional[Tensor]:
    if w.stain_mode == SUPERVISED_CE:
        if stain_labels is None:
            raise UsageError("stain_mode 'supervised_ce' needs stain labels")
        return cross_entropy(stain_probs, stain_labels)
    if w.stain_mode == ENTROPY_MAX:
        return stain_entropy(stain_probs)
    return None


def combined_loss(lesion_probs: Tensor, lesion_labels, stain_probs: Tensor,
                  stain_labels_opt, w: LossWeights) -> Tensor:
    """mu1 * CE(lesion) + mu2 * S.

    With ``mu2 == 0`` or ``stain_mode == 'none'`` the stain term is not put on
    the tape at all, so the result is exactly ``mu1 * CE(lesion)`` and stain
    parameters receive no gradient.
    """
    if w.stain_mode == SUPERVISED_CE and stain_labels_opt is None:
        raise UsageError("stain_mode 'supervised_ce' needs stain labels")
    lesion = T.scale(cross_entropy(lesion_probs, lesion_labels), w.mu1)
    if w.stain_mode == NONE or w.mu2 == 0:
        return lesion
    s = stain_term(stain_probs, stain_labels_opt, w)
    return T.add(lesion, T.scale(s, w.mu2))
