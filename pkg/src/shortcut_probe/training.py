"""Mini-batch training: Adam, plateau LR schedule, early stopping, CV orchestration."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, NonFiniteGradientError, UsageError
from .layers import DISABLED, STOCHASTIC
from .model import LESION, STAIN, DualHeadModel, predict_probs, trunk_features_np
from .objectives import ENTROPY_MAX, NONE, SUPERVISED_CE, LossWeights, combined_loss, cross_entropy
from .synthdata import Dataset, SplitPlan
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 7
    scheduler_factor: float = 0.5
    scheduler_patience: int = 3
    min_lr: float = 1e-5
    improvement_tol: float = 1e-4
    eval_batch: int = 1024

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("batch_size, max_epochs and patience must be positive")
        if not 0 < self.scheduler_factor < 1:
            raise ConfigError("scheduler_factor must lie in (0, 1)")
        if self.lr <= 0 or self.min_lr <= 0:
            raise ConfigError("lr and min_lr must be positive")


# ------------------------------------------------------------------ Adam

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState, names=None):
    """One bias-corrected Adam update, in place on ``params`` (list of Tensor)."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        bad = ~np.isfinite(g)
        if bad.any():
            name = names[i] if names else (p.name or f"param[{i}]")
            raise NonFiniteGradientError(name, int(bad.sum()))
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    step_size = state.lr / c1
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v / c2)
        denom += state.eps
        p.data = p.data - step_size * (m / denom)
    return params, state


# ---------------------------------------------------- schedule and stopping

@dataclass
class PlateauScheduler:
    lr: float
    factor: float = 0.5
    patience_epochs: int = 3
    min_lr: float = 1e-5
    tol: float = 1e-4
    best_val_loss: float = float("inf")
    epochs_since_improvement: int = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best_val_loss - self.tol:
            self.best_val_loss = val_loss
            self.epochs_since_improvement = 0
        else:
            self.epochs_since_improvement += 1
            if self.epochs_since_improvement > self.patience_epochs:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.epochs_since_improvement = 0
        return self.lr


@dataclass
class EarlyStop:
    """Stops when more than ``patience`` consecutive epochs fail to improve, or at ``max_epochs``.

    ``patience`` non-improving epochs are tolerated and the next one stops
    training, the same counting the plateau scheduler uses: with patience 7,
    a best at epoch 1 followed by no improvement stops after epoch 9. Epochs
    are counted from 1; improvement means the loss drops by more than ``tol``
    below the best so far.
    """

    patience: int = 7
    max_epochs: int = 50
    tol: float = 1e-4
    best_val_loss: float = float("inf")
    best_epoch: int = 0
    epoch: int = 0
    stopped: bool = False
    bad_epochs: int = 0

    def update(self, val_loss: float) -> bool:
        """Record one epoch; returns True if it is the new best."""
        if self.stopped:
            raise UsageError("early stopping already triggered")
        self.epoch += 1
        improved = val_loss < self.best_val_loss - self.tol
        if improved:
            self.best_val_loss = val_loss
            self.best_epoch = self.epoch
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        if self.bad_epochs > self.patience or self.epoch >= self.max_epochs:
            self.stopped = True
        return improved


# --------------------------------------------------------------- history

HISTORY_COLUMNS = ["epoch", "train_loss", "val_loss", "val_lesion_loss", "lr",
                   "val_lesion_accuracy", "val_stain_accuracy", "val_stain_entropy",
                   "stain_head_weight_norm"]


@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = float("inf")
    stopped_early: bool = False
    stain_label_reads: int = 0
    snapshot: Optional[dict] = None

    def __len__(self):
        return len(self.rows)

    def column(self, name) -> list:
        return [r[name] for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(HISTORY_COLUMNS)
        for r in self.rows:
            wr.writerow([_fmt(r[c]) for c in HISTORY_COLUMNS])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "stopped_early": self.stopped_early,
            "epochs": len(self.rows),
            "stain_label_reads": self.stain_label_reads,
        }


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.6g}"


# ------------------------------------------------------------- evaluation

def _head_probs(model, outputs):
    return {name: T.softmax(logits) for name, logits in outputs.items()}


def batch_objective(model: DualHeadModel, probs: dict, lesion_y, stain_y, w: LossWeights) -> Tensor:
    """Training objective for one batch; stain-only models use stain cross-entropy alone."""
    if LESION not in model.head_names:
        return cross_entropy(probs[STAIN], stain_y)
    return combined_loss(probs[LESION], lesion_y, probs.get(STAIN), stain_y, w)


def _uses_stain_labels(model, w: LossWeights) -> bool:
    return LESION not in model.head_names or w.stain_mode == SUPERVISED_CE


def evaluate_objective(model: DualHeadModel, data: Dataset, w: LossWeights,
                       features: Optional[np.ndarray] = None) -> dict:
    """Dropout-disabled objective on a whole set: total, lesion CE, accuracies, stain entropy."""
    probs = predict_probs(model, data.pixels.astype(np.float64), features)
    out = {"val_lesion_loss": None, "val_lesion_accuracy": None,
           "val_stain_accuracy": None, "val_stain_entropy": None}
    stain_y = data.stain if _uses_stain_labels(model, w) else None
    floor = 1e-12
    if STAIN in probs:
        ps = np.maximum(probs[STAIN], floor)
        out["val_stain_entropy"] = float(-(probs[STAIN] * np.log(ps)).sum(axis=1).mean())
        if stain_y is not None:
            out["val_stain_accuracy"] = float((probs[STAIN].argmax(axis=1) == stain_y).mean())
    if LESION not in model.head_names:
        ps = np.maximum(probs[STAIN], floor)
        out["val_loss"] = float(-np.log(ps[np.arange(len(data)), stain_y]).mean())
        return out
    pl = np.maximum(probs[LESION], floor)
    lesion_ce = float(-np.log(pl[np.arange(len(data)), data.lesion]).mean())
    out["val_lesion_loss"] = lesion_ce
    out["val_lesion_accuracy"] = float((probs[LESION].argmax(axis=1) == data.lesion).mean())
    total = w.mu1 * lesion_ce
    if w.stain_mode != NONE and w.mu2 != 0:
        if w.stain_mode == SUPERVISED_CE:
            s = float(-np.log(ps_at(probs[STAIN], stain_y, floor)).mean())
        else:
            s = out["val_stain_entropy"]
        total += w.mu2 * s
    out["val_loss"] = total
    return out


def ps_at(p, labels, floor):
    return np.maximum(p[np.arange(len(labels)), labels], floor)


def stain_head_weight_norm(model: DualHeadModel) -> Optional[float]:
    if STAIN not in model.head_names:
        return None
    return float(np.linalg.norm(model.heads[STAIN][-1].weight.data))


# ------------------------------------------------------------------ train

def train(model: DualHeadModel, dev_data: Dataset, fold: Optional[int], loss_weights: LossWeights,
          config: Optional[TrainConfig] = None, seed: int = 0, plan: Optional[SplitPlan] = None,
          val_data: Optional[Dataset] = None):
    """Train ``model`` on one CV fold; returns ``(model restored to best epoch, TrainHistory)``.

    Either pass ``plan`` + ``fold`` (validation = that fold's groups, training
    = the other dev folds) or explicit ``val_data`` (then ``dev_data`` is the
    training set). Batches are reshuffled each epoch from ``(seed, epoch)``.
    """
    config = TrainConfig() if config is None else config
    if val_data is None:
        if plan is None or fold is None:
            raise UsageError("train needs either plan + fold or val_data")
        if not 0 <= fold < plan.n_folds:
            raise UsageError(f"fold {fold} out of range for {plan.n_folds} folds")
        train_data = dev_data.in_groups(plan.train_groups(fold))
        val_data = dev_data.in_groups(plan.fold_groups(fold))
    else:
        train_data = dev_data
    if len(train_data) == 0 or len(val_data) == 0:
        raise UsageError(f"fold {fold}: empty training or validation set")

    use_stain = _uses_stain_labels(model, loss_weights)
    x_train = train_data.pixels.astype(np.float64)
    x_val = val_data.pixels.astype(np.float64)
    y_lesion = train_data.lesion
    y_stain = train_data.stain if use_stain else None

    model.fit_input_norm(x_train)
    names = [n for n, _ in model.named_parameters()]
    params = model.parameters()
    adam = AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    sched = PlateauScheduler(config.lr, config.scheduler_factor, config.scheduler_patience,
                             config.min_lr, config.improvement_tol)
    stopper = EarlyStop(config.patience, config.max_epochs, config.improvement_tol)
    history = TrainHistory()
    model.reseed_dropout(seed, 1)
    n = len(train_data)
    tape = Tape()

    while not stopper.stopped:
        epoch = stopper.epoch + 1
        order = np.random.default_rng(np.random.SeedSequence([int(seed), 2, epoch])).permutation(n)
        model.set_dropout(STOCHASTIC)
        running, seen = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            with tape:
                probs = _head_probs(model, model.outputs(Tensor(x_train[idx])))
                loss = batch_objective(model, probs, y_lesion[idx],
                                       None if y_stain is None else y_stain[idx], loss_weights)
            for p in params:
                p.grad = None
            if tape.nodes:
                T.backward(loss, tape)
            tape.clear()
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            adam_step(params, grads, adam, names)
            running += loss.item() * len(idx)
            seen += len(idx)

        model.set_dropout(DISABLED)
        ev = evaluate_objective(model, val_data, loss_weights)
        improved = stopper.update(ev["val_loss"])
        if improved:
            history.snapshot = model.state_dict()
        history.rows.append({
            "epoch": epoch,
            "train_loss": running / seen,
            "val_loss": ev["val_loss"],
            "val_lesion_loss": ev["val_lesion_loss"],
            "lr": adam.lr,
            "val_lesion_accuracy": ev["val_lesion_accuracy"],
            "val_stain_accuracy": ev["val_stain_accuracy"],
            "val_stain_entropy": ev["val_stain_entropy"],
            "stain_head_weight_norm": stain_head_weight_norm(model),
        })
        log.debug("epoch %d train %.4f val %.4f lr %.2e", epoch, running / seen, ev["val_loss"], adam.lr)
        adam.lr = sched.step(ev["val_loss"])

    if history.snapshot is not None:
        model.load_state_dict(history.snapshot)
    model.set_dropout(STOCHASTIC)
    history.best_epoch = stopper.best_epoch
    history.best_val_loss = stopper.best_val_loss
    history.stopped_early = stopper.epoch < config.max_epochs
    history.stain_label_reads = train_data.stain_reads + val_data.stain_reads
    return model, history


# -------------------------------------------------------------------- CV

def aggregate(values) -> dict:
    """Mean and population std over folds; None entries are skipped."""
    arr = np.asarray([v for v in values if v is not None], dtype=float)
    if arr.size == 0:
        return {"mean": None, "std": None, "n": 0}
    return {"mean": float(arr.mean()), "std": float(arr.std()), "n": int(arr.size)}


def run_cv(model_factory: Callable[[int], DualHeadModel], dev_data: Dataset, plan: SplitPlan,
           loss_weights: LossWeights, config: Optional[TrainConfig] = None, seed: int = 0,
           test_data: Optional[Dataset] = None, evaluate: Optional[Callable] = None):
    """Train one model per fold and evaluate each on the held-out test set.

    ``model_factory(fold)`` returns a fresh model. ``evaluate(model, test_data)``
    returns a flat dict of metric -> value; per-metric mean/std across folds
    are reported under ``aggregate``.
    """
    if not plan.fold_of_group:
        raise UsageError("split plan is not filled")
    histories, fold_metrics, models = [], [], []
    for k in range(plan.n_folds):
        model = model_factory(k)
        model, hist = train(model, dev_data, k, loss_weights, config,
                            seed=int(np.random.SeedSequence([int(seed), 3, k]).generate_state(1)[0]),
                            plan=plan)
        histories.append(hist)
        models.append(model)
        if evaluate is not None and test_data is not None:
            fold_metrics.append(evaluate(model, test_data))
    keys = sorted({k for m in fold_metrics for k in m})
    agg = {k: aggregate([m.get(k) for m in fold_metrics]) for k in keys}
    return {"histories": histories, "fold_metrics": fold_metrics, "aggregate": agg, "models": models}
