"""Experiment orchestration: stain-only training, mu2 sweeps and the confound probe.

Each experiment expands into independent (mu2, fold, seed) cells. Cells run on a
bounded worker pool (``SHORTCUT_PROBE_THREADS`` caps it) and are merged in a
fixed order, so a report depends only on the plan and the data.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import platform
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .errors import ConfigError
from .kernels import BACKEND
from .metrics import binary_metrics, multiclass_metrics, uncertainty_summary
from .model import (
    LESION,
    STAIN,
    TrunkConfig,
    make_dual_head_model,
    make_stain_only_model,
    mc_predict,
    trunk_features_np,
)
from .objectives import ENTROPY_MAX, PROB_FLOOR, SUPERVISED_CE, LossWeights
from .synthdata import Dataset, GenSpec, SplitPlan, generate, group_split, mutual_information, read_dataset
from .training import TrainConfig, train

log = logging.getLogger(__name__)

EXP1 = "exp1_stain_only"
EXP2 = "exp2_supervised_sweep"
EXP3 = "exp3_entropy_sweep"
PROBE = "probe"
KINDS = (EXP1, EXP2, EXP3, PROBE)
KIND_ALIASES = {"1": EXP1, "2": EXP2, "3": EXP3, "exp1": EXP1, "exp2": EXP2, "exp3": EXP3}
SHORT = {EXP1: "exp1", EXP2: "exp2", EXP3: "exp3", PROBE: "probe"}
DEFAULT_GRIDS = {
    EXP2: [-1.0, -0.5, -0.1, 0.0, 0.1, 0.5, 1.0],
    EXP3: [0.0, -0.1, -0.5, -1.0],
}
METRIC_NAMES = ["accuracy", "precision", "recall", "f1", "auc", "mean_uncertainty"]
SUMMARY_COLUMNS = ["experiment", "mu2", "fold", "seed", "head"] + METRIC_NAMES
SCHEMA_VERSION = 1
# seed offset for the independently drawn stain-swapped probe set
SWAP_SEED_OFFSET = 7919


@dataclass
class ExperimentPlan:
    kind: str = EXP2
    mu2_grid: Optional[list] = None
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    T: int = 50
    n_folds: int = 5
    # subset of folds to run; None runs all of them
    folds: Optional[list] = None
    dev_fraction: float = 0.85
    split_seed: int = 0
    mu1: float = 1.0
    rho_grid: list = field(default_factory=lambda: [0.0, 0.95])
    probe_mu2: float = -0.5
    # exp2 refuses data whose lesion/stain mutual information exceeds this (nats)
    max_confound_mi: float = 0.01
    # stain-head output init for entropy-mode runs: a zero output layer gives
    # exactly uniform predictions, where the entropy term has zero gradient
    entropy_stain_init: str = "glorot"
    dataset: Optional[str] = None
    gen_spec: GenSpec = field(default_factory=GenSpec)
    trunk_config: TrunkConfig = field(default_factory=TrunkConfig)
    train_config: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        self.kind = KIND_ALIASES.get(str(self.kind), self.kind)
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        if self.mu2_grid is None:
            self.mu2_grid = list(DEFAULT_GRIDS.get(self.kind, []))
        self.mu2_grid = [float(m) for m in self.mu2_grid]
        if self.kind == EXP3 and any(m > 0 for m in self.mu2_grid):
            raise ConfigError(f"entropy sweep needs mu2 <= 0, got {self.mu2_grid}")
        if self.kind == PROBE and self.probe_mu2 > 0:
            raise ConfigError(f"probe_mu2 must be <= 0, got {self.probe_mu2}")
        self.seeds = [int(s) for s in self.seeds]
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if int(self.T) < 1:
            raise ConfigError(f"T must be a positive integer, got {self.T}")
        if self.folds is not None:
            self.folds = [int(f) for f in self.folds]
            if any(not 0 <= f < self.n_folds for f in self.folds):
                raise ConfigError(f"folds {self.folds} out of range for {self.n_folds} folds")
        if any(not 0.0 <= r <= 1.0 for r in self.rho_grid):
            raise ConfigError(f"rho_grid must lie in [0, 1], got {self.rho_grid}")
        if self.entropy_stain_init not in ("glorot", "zero"):
            raise ConfigError(f"entropy_stain_init must be 'glorot' or 'zero', got {self.entropy_stain_init!r}")
        if isinstance(self.gen_spec, dict):
            self.gen_spec = GenSpec(**self.gen_spec)
        if isinstance(self.trunk_config, dict):
            self.trunk_config = TrunkConfig(**self.trunk_config)
        if isinstance(self.train_config, dict):
            self.train_config = TrainConfig(**self.train_config)

    @property
    def fold_list(self) -> list:
        return list(range(self.n_folds)) if self.folds is None else list(self.folds)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunReport:
    experiment: str
    plan: dict
    results: list = field(default_factory=list)
    aggregate: list = field(default_factory=list)
    data: dict = field(default_factory=dict)
    split: dict = field(default_factory=dict)
    environment: dict = field(default_factory=dict)
    # run name -> history CSV text; written next to the report, not inside it
    histories: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA_VERSION,
            "experiment": self.experiment,
            "plan": self.plan,
            "environment": self.environment,
            "data": self.data,
            "split": self.split,
            "results": self.results,
            "aggregate": self.aggregate,
        }

    def ok_results(self) -> list:
        return [r for r in self.results if r["status"] == "ok"]

    def cells(self, mu2=None, rho=None) -> list:
        out = []
        for r in self.ok_results():
            if mu2 is not None and not math.isclose(r["mu2"], mu2):
                continue
            if rho is not None and not math.isclose(r["rho"], rho):
                continue
            out.append(r)
        return out


# ------------------------------------------------------------------ helpers

def environment_stamp() -> dict:
    return {
        "package_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "kernel_backend": BACKEND,
    }


def worker_count(n_jobs: int) -> int:
    cap = os.environ.get("SHORTCUT_PROBE_THREADS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ConfigError(f"SHORTCUT_PROBE_THREADS must be an integer, got {cap!r}")
    return max(1, min(n, n_jobs))


def _map(fn, jobs):
    n = worker_count(len(jobs))
    if n <= 1:
        return [fn(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, jobs))


def load_data(plan: ExperimentPlan, gen_spec: Optional[GenSpec] = None) -> Dataset:
    if plan.dataset:
        return read_dataset(plan.dataset)
    ds, _ = generate(gen_spec or plan.gen_spec)
    return ds


def make_split(data: Dataset, plan: ExperimentPlan) -> SplitPlan:
    return group_split(data.manifest, SplitPlan(dev_fraction=plan.dev_fraction, n_folds=plan.n_folds),
                       plan.split_seed)


def split_summary(data: Dataset, split: SplitPlan) -> dict:
    m = data.manifest
    out = {"test_groups": len(split.test_groups), "folds": []}
    test_mask = np.isin(m.group_id, split.test_groups)
    out["test"] = {"n": int(test_mask.sum()), "positives": int(m.lesion[test_mask].sum()),
                   "per_stain": np.bincount(m.stain[test_mask], minlength=4).tolist()}
    for k in range(split.n_folds):
        mask = np.isin(m.group_id, split.fold_groups(k))
        out["folds"].append({"fold": k, "groups": len(split.fold_groups(k)), "n": int(mask.sum()),
                             "positives": int(m.lesion[mask].sum()),
                             "per_stain": np.bincount(m.stain[mask], minlength=4).tolist()})
    return out


def data_summary(data: Dataset) -> dict:
    m = data.manifest
    return {
        "n": len(data),
        "positives": int(m.lesion.sum()),
        "per_stain": np.bincount(m.stain, minlength=4).tolist(),
        "lesion_stain_mi": mutual_information(m.lesion, m.stain),
    }


def train_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(fold), 11]).generate_state(1)[0])


def run_name(kind: str, mu2, fold: int, seed: int, rho=None) -> str:
    parts = [SHORT[kind]]
    if rho is not None:
        parts.append(f"rho_{rho:g}")
    if mu2 is not None:
        parts.append(f"mu2_{mu2:+g}")
    parts += [f"f{fold}", f"s{seed}"]
    return "_".join(parts)


def mean_entropy(probs: np.ndarray) -> float:
    p = np.maximum(probs, PROB_FLOOR)
    return float(-(probs * np.log(p)).sum(axis=1).mean())


def evaluate_model(model, data: Dataset, T: int = 50, seed: int = 0) -> dict:
    """MC-dropout metrics for every head of ``model`` on ``data``."""
    feats = trunk_features_np(model, data.pixels.astype(np.float64))
    preds = mc_predict(model, data.pixels, T_passes=T, seed=seed, features=feats)
    if not isinstance(preds, tuple):
        preds = (preds,)
    by_head = dict(zip(model.head_names, preds))
    heads, unc = {}, {}
    if LESION in by_head:
        mc = by_head[LESION]
        rep = binary_metrics(mc.mean_probs[:, 1], data.lesion, mc.uncertainty)
        heads[LESION] = rep.to_dict()
        unc[LESION] = uncertainty_summary(mc, mc.mean_probs.argmax(axis=1) == data.lesion)
    out = {"heads": heads, "uncertainty": unc}
    if STAIN in by_head:
        mc = by_head[STAIN]
        stain = data.stain
        heads[STAIN] = multiclass_metrics(mc.mean_probs, stain, mc.uncertainty).to_dict()
        unc[STAIN] = uncertainty_summary(mc, mc.mean_probs.argmax(axis=1) == stain)
        out["stain_entropy"] = mean_entropy(mc.mean_probs)
    return out


# -------------------------------------------------------------------- cells

@dataclass
class _Context:
    plan: ExperimentPlan
    dev: Dataset
    test: Dataset
    split: SplitPlan
    swapped: Optional[Dataset] = None


def _run_cell(ctx: _Context, kind: str, mu2, fold: int, seed: int, stain_mode: str, rho=None):
    plan = ctx.plan
    name = run_name(kind, mu2, fold, seed, rho)
    entry = {"experiment": kind, "mu2": mu2, "fold": fold, "seed": seed, "run": name}
    if rho is not None:
        entry["rho"] = rho
        entry["stain_mode"] = stain_mode
    try:
        if kind == EXP1:
            model = make_stain_only_model(plan.trunk_config, seed)
            weights = LossWeights(plan.mu1, 0.0, SUPERVISED_CE)
        else:
            cfg = plan.trunk_config
            if stain_mode == ENTROPY_MAX:
                cfg = replace(cfg, stain_output_init=plan.entropy_stain_init)
            model = make_dual_head_model(cfg, seed)
            weights = LossWeights(plan.mu1, mu2, stain_mode)
        model, hist = train(model, ctx.dev, fold, weights, plan.train_config,
                            seed=train_seed(seed, fold), plan=ctx.split)
        entry.update(evaluate_model(model, ctx.test, plan.T, seed))
        if ctx.swapped is not None:
            swap = evaluate_model(model, ctx.swapped, plan.T, seed)
            entry["heads"]["lesion_swapped"] = swap["heads"][LESION]
            entry["lesion_gap"] = entry["heads"][LESION]["accuracy"] - swap["heads"][LESION]["accuracy"]
        entry["training"] = hist.to_dict()
        entry["stain_label_reads"] = hist.stain_label_reads
        entry["weight_norm_trace"] = hist.column("stain_head_weight_norm")
        entry["history_file"] = f"history_{name}.csv"
        entry["status"] = "ok"
        log.info("%s done: best epoch %d of %d", name, hist.best_epoch, len(hist))
        return entry, hist.to_csv()
    except Exception as e:  # a failed cell is reported, not fatal to the sweep
        log.warning("%s failed: %s", name, e)
        entry["status"] = "failed"
        entry["error"] = f"{type(e).__name__}: {e}"
        return entry, None


def _sort_key(r):
    mu2 = r["mu2"] if r["mu2"] is not None else -math.inf
    return (r["experiment"], r.get("rho", 0.0), mu2, r["fold"], r["seed"])


def _stats(values) -> dict:
    arr = np.asarray([v for v in values if v is not None], dtype=float)
    if arr.size == 0:
        return {"mean": None, "std": None, "n": 0}
    return {"mean": float(arr.mean()), "std": float(arr.std()), "n": int(arr.size)}


def _aggregate(results: list) -> list:
    """Mean/std over folds and seeds per (experiment, rho, mu2) and head."""
    groups = {}
    for r in results:
        if r["status"] != "ok":
            continue
        groups.setdefault((r["experiment"], r.get("rho"), r["mu2"]), []).append(r)
    out = []
    for (kind, rho, mu2), cells in sorted(groups.items(), key=lambda kv: _sort_key(kv[1][0])):
        row = {"experiment": kind, "mu2": mu2, "n_cells": len(cells), "heads": {}}
        if rho is not None:
            row["rho"] = rho
        for head in sorted({h for c in cells for h in c["heads"]}):
            row["heads"][head] = {m: _stats(c["heads"][head][m] for c in cells if head in c["heads"])
                                  for m in METRIC_NAMES}
            seeds = sorted({c["seed"] for c in cells})
            row["heads"][head]["seed_accuracy"] = [
                float(np.mean([c["heads"][head]["accuracy"] for c in cells if c["seed"] == s])) for s in seeds]
        if any("stain_entropy" in c for c in cells):
            row["stain_entropy"] = _stats(c.get("stain_entropy") for c in cells)
        if any("lesion_gap" in c for c in cells):
            row["lesion_gap"] = _stats(c["lesion_gap"] for c in cells)
        row["stain_label_reads"] = int(sum(c["stain_label_reads"] for c in cells))
        out.append(row)
    return out


def _finish(kind: str, plan: ExperimentPlan, outputs: list, data_info: dict, split_info: dict) -> RunReport:
    report = RunReport(kind, plan.to_dict(), data=data_info, split=split_info,
                       environment=environment_stamp())
    outputs = sorted(outputs, key=lambda eh: _sort_key(eh[0]))
    for entry, hist_csv in outputs:
        report.results.append(entry)
        if hist_csv is not None:
            report.histories[entry["run"]] = hist_csv
    report.aggregate = _aggregate(report.results)
    return report


def _sweep(kind: str, plan: ExperimentPlan, data: Optional[Dataset], grid: list, stain_mode: str) -> RunReport:
    data = load_data(plan) if data is None else data
    split = make_split(data, plan)
    ctx = _Context(plan, data.in_groups(split.dev_groups()), data.in_groups(split.test_groups), split)
    jobs = [(mu2, k, s) for mu2 in grid for k in plan.fold_list for s in plan.seeds]
    outputs = _map(lambda j: _run_cell(ctx, kind, j[0], j[1], j[2], stain_mode), jobs)
    return _finish(kind, plan, outputs, data_summary(data), split_summary(data, split))


# -------------------------------------------------------------- experiments

def _expect_kind(plan: ExperimentPlan, kind: str) -> ExperimentPlan:
    # a plan written for another experiment falls back to this one's default grid
    if plan.kind != kind:
        plan = replace(plan, kind=kind, mu2_grid=None)
    return plan


def run_exp1(plan: ExperimentPlan, data: Optional[Dataset] = None) -> RunReport:
    """Stain-only model per (fold, seed); mu2_grid is ignored."""
    plan = _expect_kind(plan, EXP1)
    return _sweep(EXP1, plan, data, [None], SUPERVISED_CE)


def run_exp2(plan: ExperimentPlan, data: Optional[Dataset] = None) -> RunReport:
    """Supervised stain cross-entropy sweep over ``mu2_grid`` on de-confounded data."""
    plan = _expect_kind(plan, EXP2)
    data = load_data(plan) if data is None else data
    m = data.manifest
    mi = mutual_information(m.lesion, m.stain)
    if mi > plan.max_confound_mi:
        raise ConfigError(f"supervised sweep expects de-confounded data; lesion/stain mutual "
                          f"information is {mi:.4g} nats > {plan.max_confound_mi}")
    return _sweep(EXP2, plan, data, plan.mu2_grid, SUPERVISED_CE)


def run_exp3(plan: ExperimentPlan, data: Optional[Dataset] = None) -> RunReport:
    """Label-free stain entropy sweep over ``mu2_grid`` (all values <= 0)."""
    plan = _expect_kind(plan, EXP3)
    if any(m > 0 for m in plan.mu2_grid):
        raise ConfigError(f"entropy sweep needs mu2 <= 0, got {plan.mu2_grid}")
    return _sweep(EXP3, plan, data, plan.mu2_grid, ENTROPY_MAX)


def swapped_spec(spec: GenSpec, n: int) -> GenSpec:
    """Same generator with the confounding table inverted and a disjoint seed."""
    return replace(spec, invert_confounding=not spec.invert_confounding,
                   seed=spec.seed + SWAP_SEED_OFFSET, n_patches=int(n))


def run_confound_probe(plan: ExperimentPlan, rho_grid=None) -> RunReport:
    """Positive control: mu2 = 0 and entropy-regularized models on confounded data.

    Lesion accuracy is measured on the in-distribution test split and on an
    independently drawn set whose confounding table is inverted; the
    difference is ``lesion_gap``.
    """
    plan = _expect_kind(plan, PROBE)
    rho_grid = plan.rho_grid if rho_grid is None else [float(r) for r in rho_grid]
    if any(not 0.0 <= r <= 1.0 for r in rho_grid):
        raise ConfigError(f"rho_grid must lie in [0, 1], got {rho_grid}")
    outputs, data_info, split_info = [], {}, {}
    for rho in rho_grid:
        spec = replace(plan.gen_spec, confound_rho=float(rho))
        data, _ = generate(spec)
        split = make_split(data, plan)
        test = data.in_groups(split.test_groups)
        swapped, _ = generate(swapped_spec(spec, len(test)))
        ctx = _Context(plan, data.in_groups(split.dev_groups()), test, split, swapped)
        jobs = [(mu2, k, s) for mu2 in (0.0, float(plan.probe_mu2)) for k in plan.fold_list for s in plan.seeds]
        outputs += _map(lambda j: _run_cell(ctx, PROBE, j[0], j[1], j[2], ENTROPY_MAX, rho=float(rho)), jobs)
        key = f"rho={rho:g}"
        data_info[key] = data_summary(data)
        data_info[key]["swapped"] = data_summary(swapped)
        split_info[key] = split_summary(data, split)
    return _finish(PROBE, plan, outputs, data_info, split_info)


def run_experiment(plan: ExperimentPlan, data: Optional[Dataset] = None) -> RunReport:
    if plan.kind == EXP1:
        return run_exp1(plan, data)
    if plan.kind == EXP2:
        return run_exp2(plan, data)
    if plan.kind == EXP3:
        return run_exp3(plan, data)
    return run_confound_probe(plan)


# ---------------------------------------------------------------- reporting

def _round6(obj):
    """Recursively round floats to 6 significant digits; NaN/inf become None."""
    if isinstance(obj, bool) or obj is None or isinstance(obj, str):
        return obj
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return float(f"{v:.6g}") if math.isfinite(v) else None
    if isinstance(obj, dict):
        return {str(k): _round6(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round6(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _round6(obj.tolist())
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return f"{float(v):.6g}"


def report_json(report: RunReport) -> str:
    return json.dumps(_round6(report.to_dict()), indent=2, sort_keys=True) + "\n"


def summary_rows(report: RunReport) -> list:
    rows = []
    for r in report.ok_results():
        label = r["experiment"] if "rho" not in r else f"{r['experiment']}[rho={r['rho']:g}]"
        for head in sorted(r["heads"]):
            m = r["heads"][head]
            rows.append([label, _fmt(r["mu2"]), str(r["fold"]), str(r["seed"]), head]
                        + [_fmt(m[k]) for k in METRIC_NAMES])
    return rows


def summary_csv(report: RunReport) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(SUMMARY_COLUMNS)
    wr.writerows(summary_rows(report))
    return buf.getvalue()


def _write(path: Path, text: str):
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror or e}") from e


def emit_report(report: RunReport, out_dir) -> list:
    """Write report.json, summary.csv and one history CSV per run; returns the paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create {out}: {e.strerror or e}") from e
    written = [out / "report.json", out / "summary.csv"]
    _write(written[0], report_json(report))
    _write(written[1], summary_csv(report))
    for name in sorted(report.histories):
        p = out / f"history_{name}.csv"
        _write(p, report.histories[name])
        written.append(p)
    return written


def summarize(in_dir) -> str:
    """Per (experiment, mu2, head) mean +- std table from a written summary.csv."""
    path = Path(in_dir) / "summary.csv"
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise OSError(f"cannot read {path}: {e.strerror or e}") from e
    rows = list(csv.DictReader(io.StringIO(text)))
    groups = {}
    for r in rows:
        groups.setdefault((r["experiment"], r["mu2"], r["head"]), []).append(r)

    def cell(rs, k):
        vals = [float(r[k]) for r in rs if r[k] != ""]
        if not vals:
            return "n/a"
        return f"{np.mean(vals):.4f}+-{np.std(vals):.4f}"

    cols = ["accuracy", "f1", "auc", "mean_uncertainty"]
    header = ["experiment", "mu2", "head", "n"] + cols
    lines = [header]
    for (exp, mu2, head), rs in groups.items():
        lines.append([exp, mu2 or "-", head, str(len(rs))] + [cell(rs, k) for k in cols])
    widths = [max(len(line[i]) for line in lines) for i in range(len(header))]
    return "\n".join("  ".join(v.ljust(w) for v, w in zip(line, widths)).rstrip() for line in lines)
