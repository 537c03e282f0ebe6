"""Command line: gen, train, sweep and report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .config import load_config
from .errors import ConfigError, DatasetError, UsageError
from .model import make_dual_head_model, save_checkpoint
from .synthdata import generate, read_dataset, write_dataset
from .training import train

log = logging.getLogger("shortcut_probe")

EXPERIMENTS = {"1": harness.EXP1, "2": harness.EXP2, "3": harness.EXP3, "probe": harness.PROBE}


def cmd_gen(args) -> int:
    cfg = load_config(args.config)
    ds, _ = generate(cfg.gen_spec)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds)} patches to {args.out}")
    return 0


def cmd_train(args) -> int:
    """Train one dual-head model on one fold and evaluate it on the test split."""
    cfg = load_config(args.config)
    plan = cfg.experiment_plan
    data = read_dataset(args.data)
    split = harness.make_split(data, plan)
    fold, seed = plan.fold_list[0], plan.seeds[0]
    model = make_dual_head_model(cfg.trunk_config, seed)
    model, hist = train(model, data.in_groups(split.dev_groups()), fold, cfg.loss_weights,
                        cfg.train_config, seed=harness.train_seed(seed, fold), plan=split)
    metrics = harness.evaluate_model(model, data.in_groups(split.test_groups), plan.T, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "model.ckpt")
    (out / "history.csv").write_text(hist.to_csv(), encoding="utf-8")
    doc = {"fold": fold, "seed": seed, "loss_weights": cfg.to_dict()["loss_weights"],
           "training": hist.to_dict(), **metrics}
    (out / "metrics.json").write_text(json.dumps(harness._round6(doc), indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")
    les = metrics["heads"]["lesion"]
    print(f"fold {fold} seed {seed}: best epoch {hist.best_epoch}, test lesion accuracy {les['accuracy']:.4f}")
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    plan = cfg.plan_for(EXPERIMENTS[args.experiment])
    data = None
    if args.data is not None:
        if plan.kind == harness.PROBE:
            log.warning("--data is ignored by the probe; it generates one dataset per rho")
        else:
            data = read_dataset(args.data)
    report = harness.run_experiment(plan, data)
    paths = harness.emit_report(report, args.out)
    failed = [r["run"] for r in report.results if r["status"] != "ok"]
    print(f"{len(report.results)} runs, {len(failed)} failed; wrote {len(paths)} files to {args.out}")
    for name in failed:
        print(f"failed: {name}", file=sys.stderr)
    return 1 if failed else 0


def cmd_report(args) -> int:
    print(harness.summarize(args.inp))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shortcut-probe", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train one model on one fold")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sweep", help="run an experiment grid")
    s.add_argument("--experiment", required=True, choices=sorted(EXPERIMENTS))
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_sweep)

    r = sub.add_parser("report", help="print the summary table of a sweep")
    r.add_argument("--in", dest="inp", required=True)
    r.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (DatasetError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
