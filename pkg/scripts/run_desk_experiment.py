#!/usr/bin/env python3
"""Desk-scale end-to-end experiment: pretrain, brew 5 cases, 4 victims each,
the eps = 0 null attack under the same seeds, feature filtering and the DP sweep.

The output directory can be handed to the acceptance suite through
POISONBREW_DESK_RUN to skip recomputation.
"""
import argparse
import json
import os
import time
from pathlib import Path

from poisonbrew import pipeline
from poisonbrew.config import ExperimentConfig, load_config, with_overrides


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--config")
    ap.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    cfg = with_overrides(cfg, {"out": args.out, **dict(s.split("=", 1) for s in args.set)})
    start = time.perf_counter()
    result = pipeline.run_experiment(cfg, args.threads, cfg.out)
    print(f"experiment done in {(time.perf_counter() - start) / 60:.1f} min", flush=True)
    rows, points = pipeline.run_defenses(result, args.threads, cfg.out)
    s = result.summary()
    for c in s["brew"]:
        print(f"case {c['case']}: {c['target_class']} -> {c['adv_class']}  "
              f"B {c['initial_loss']:.4f} -> {c['final_loss']:.4f}")
    for key in ("poisoned", "null"):
        r = s[key]
        print(f"{key:8s} success {100 * r['avg_poison_success']:6.2f}% (se {100 * r['std_error']:.2f})  "
              f"val acc {r['mean_val_acc']:.4f}  per case {[round(v, 2) for v in r['case_success']]}")
    for frac in cfg.eval.filter_fractions:
        sel = [r for _, r in rows if r.fraction == frac]
        print(f"filter {frac:.2f}: {sum(r.poisons_removed for r in sel)}/{sum(r.poisons for r in sel)} poisons removed")
    for p in points:
        print(f"dp sigma {p.sigma:g}: success {100 * p.avg_success:.2f}%  val acc {p.val_acc:.4f}")
    print(f"total {(time.perf_counter() - start) / 60:.1f} min; reports in {Path(cfg.out).resolve()}")
    (Path(cfg.out) / "timing.json").write_text(json.dumps({"minutes": (time.perf_counter() - start) / 60}) + "\n")


if __name__ == "__main__":
    main()
