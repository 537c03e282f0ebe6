"""Classification metrics and uncertainty summaries.

AUC uses the rank-sum form with midranks for ties, which equals the fraction
of (positive, negative) pairs ordered correctly with ties counted as 1/2.
Multiclass AUC is the unweighted one-vs-rest mean over classes present with
both positives and negatives.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import rankdata


@dataclass
class MetricReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: Optional[float]
    mean_uncertainty: Optional[float]
    n: int
    auc_defined: bool = True
    per_class: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _ratio(num, den) -> float:
    return float(num) / float(den) if den else 0.0


def _f1(p, r) -> float:
    return 2.0 * p * r / (p + r) if p + r > 0 else 0.0


def roc_auc(scores, labels) -> Optional[float]:
    """Binary ROC-AUC; None when only one class is present."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def binary_metrics(scores, labels, uncertainty=None, threshold: float = 0.5) -> MetricReport:
    """Metrics for the positive class; ``scores`` are P(y = 1)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ")
    pred = (scores >= threshold).astype(np.int64)
    tp = int(((pred == 1) & (labels == 1)).sum())
    fp = int(((pred == 1) & (labels == 0)).sum())
    fn = int(((pred == 0) & (labels == 1)).sum())
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    auc = roc_auc(scores, labels)
    return MetricReport(
        accuracy=_ratio((pred == labels).sum(), labels.size),
        precision=precision,
        recall=recall,
        f1=_f1(precision, recall),
        auc=auc,
        mean_uncertainty=None if uncertainty is None else float(np.mean(uncertainty)),
        n=int(labels.size),
        auc_defined=auc is not None,
    )


def multiclass_metrics(probs, labels, uncertainty=None) -> MetricReport:
    """Argmax accuracy (lowest index wins ties) and macro precision/recall/F1/OvR-AUC."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = probs.shape
    pred = probs.argmax(axis=1)
    per_class, aucs = [], []
    for c in range(k):
        tp = int(((pred == c) & (labels == c)).sum())
        fp = int(((pred == c) & (labels != c)).sum())
        fn = int(((pred != c) & (labels == c)).sum())
        p, r = _ratio(tp, tp + fp), _ratio(tp, tp + fn)
        auc = roc_auc(probs[:, c], labels == c)
        if auc is not None:
            aucs.append(auc)
        per_class.append({"class": c, "precision": p, "recall": r, "f1": _f1(p, r),
                          "auc": auc, "support": int((labels == c).sum())})
    return MetricReport(
        accuracy=_ratio((pred == labels).sum(), n),
        precision=float(np.mean([pc["precision"] for pc in per_class])),
        recall=float(np.mean([pc["recall"] for pc in per_class])),
        f1=float(np.mean([pc["f1"] for pc in per_class])),
        auc=float(np.mean(aucs)) if aucs else None,
        mean_uncertainty=None if uncertainty is None else float(np.mean(uncertainty)),
        n=int(n),
        auc_defined=bool(aucs),
        per_class=per_class,
    )


def point_biserial(values, indicator) -> Optional[float]:
    """Pearson correlation between a real variable and a 0/1 indicator; None if either is constant."""
    x = np.asarray(values, dtype=np.float64)
    y = np.asarray(indicator, dtype=np.float64)
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt((xc * xc).sum()), np.sqrt((yc * yc).sum())
    if sx == 0 or sy == 0:
        return None
    return float((xc * yc).sum() / (sx * sy))


def uncertainty_summary(mc, correct=None) -> dict:
    """Mean/std of scalar uncertainties and their correlation with per-sample correctness.

    ``mc`` is an MCPrediction, a list of them, or a plain array of
    uncertainties; ``correct`` is a boolean array aligned with it.
    """
    if hasattr(mc, "uncertainty"):
        u = np.asarray(mc.uncertainty, dtype=np.float64)
    elif len(mc) and hasattr(mc[0], "uncertainty"):
        u = np.concatenate([np.atleast_1d(m.uncertainty) for m in mc]).astype(np.float64)
    else:
        u = np.asarray(mc, dtype=np.float64)
    if u.size == 0:
        raise ValueError("uncertainty_summary needs at least one value")
    corr = None if correct is None else point_biserial(u, np.asarray(correct, dtype=np.float64))
    return {"mean": float(u.mean()), "std": float(u.std()), "correlation_with_correct": corr, "n": int(u.size)}
