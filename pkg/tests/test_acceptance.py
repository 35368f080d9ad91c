"""Acceptance gate: the ten end-to-end criteria, one PASS/FAIL line each.

Criteria 5-9 are judged from the report files of one desk-scale experiment
(run once per session, or read from ``$POISONBREW_DESK_RUN`` when that points
at a finished run of the identical configuration, e.g. from
``scripts/run_desk_experiment.py``).
"""
import csv
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from poisonbrew import analysis, brewer as bw, datapipe as data, gradcheck, nn, pipeline
from poisonbrew.config import ExperimentConfig, to_ini, with_overrides

from conftest import record_acceptance

DESK = ExperimentConfig(out="desk")


# ------------------------------------------------------------------ helpers

def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _same_config(run_dir: Path) -> bool:
    ini = run_dir / "config.ini"
    if not ini.exists():
        return False
    strip = lambda text: [ln for ln in text.splitlines() if not ln.startswith("out =")]  # noqa: E731
    return strip(ini.read_text()) == strip(to_ini(DESK))


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    cached = os.environ.get("POISONBREW_DESK_RUN")
    if cached and _same_config(Path(cached)) and (Path(cached) / "dp_curve.csv").exists():
        return Path(cached), float("nan")
    out = tmp_path_factory.mktemp("desk")
    start = time.perf_counter()
    result = pipeline.run_experiment(DESK, threads=os.cpu_count() or 1, out=out)
    pipeline.run_defenses(result, threads=os.cpu_count() or 1, out=out)
    return out, time.perf_counter() - start


# ----------------------------------------------------------------- criteria

def test_01_gradient_suite():
    start = time.perf_counter()
    results = gradcheck.run_suite(points=20, seed=0)
    elapsed = time.perf_counter() - start
    worst = max(results, key=lambda r: r.max_rel_error)
    ok = all(r.passed for r in results) and all(r.points >= 20 for r in results) and elapsed < 120
    record_acceptance(1, ok, f"{len(results)} checks, worst {worst.name} rel {worst.max_rel_error:.2e}, "
                             f"{elapsed:.0f}s")
    assert ok, gradcheck.format_report(results)


def test_02_insertion_zero_loss():
    spec = nn.ModelSpec.convnet(DESK.model.width_scale, (DESK.dataset.image_size,) * 2 + (3,), 10)
    members = [nn.build(spec, s) for s in range(3)]
    _, val = pipeline.load_data(DESK)
    worst = 0.0
    for i in range(5):
        target = val.images[i:i + 1]
        adv = np.array([(int(val.labels[i]) + 1) % 10])
        for m in members:
            b = bw.matching_loss_arrays(np.zeros_like(target), [m], target, adv, target, adv)
            worst = max(worst, abs(b))
    record_acceptance(2, worst < 1e-10, f"max |B| = {worst:.1e} over 15 insertions")
    assert worst < 1e-10


def test_03_constraints_hold_through_full_brew():
    cfg = with_overrides(DESK, {"dataset.per_class": "20", "dataset.val_per_class": "5", "threat.budget": "0.05"})
    train, val = pipeline.load_data(cfg)
    spec = pipeline.model_spec(cfg, train)
    case = data.sample_case(train, val, cfg.threat.budget, 1, 0)
    base = train.images[train.positions(case.poison_ids)]
    steps = []
    res = bw.brew([nn.build(spec, 0)], train, val, case, cfg.threat, bw.BrewConfig(restarts=2, steps=50), seed=0,
                  monitor=lambda r, k, b: steps.append((r, k)))
    eps = cfg.threat.eps
    final_ok = all(np.abs(d).max() <= eps and (base + d).min() >= 0 and (base + d).max() <= 1 for d in res.deltas)
    gen = np.random.default_rng(0)
    x = gen.uniform(-0.5, 0.5, size=10_000)
    b = gen.uniform(0, 1, size=10_000)
    once = bw.project(x, b, eps)
    idem = np.array_equal(bw.project(once, b, eps), once)
    ok = len(steps) == 100 and final_ok and idem
    record_acceptance(3, ok, f"{len(steps)} projected steps without ConstraintViolation; project idempotent on 1e4")
    assert ok


def test_04_prop1_verifier():
    start = time.perf_counter()
    rep = analysis.prop1_toy_verifier(dimension=10, instances=100, seed=0, beta=0.9)
    elapsed = time.perf_counter() - start
    ok = rep.violations == 0 and elapsed < 10 and not rep.premise_never_satisfied
    record_acceptance(4, ok, f"{rep.violations} violations over {rep.premise_steps} admissible steps, "
                             f"{elapsed:.1f}s")
    assert ok


def test_05_desk_attack_beats_null(desk_run):
    out, elapsed = desk_run
    s = json.loads((out / "summary.json").read_text())
    success, null = s["poisoned"]["avg_poison_success"], s["null"]["avg_poison_success"]
    brew_ok = all(c["final_loss"] < c["initial_loss"] for c in s["brew"])
    ok = success > 3 * null and brew_ok
    took = "" if np.isnan(elapsed) else f", {elapsed / 60:.0f} min"
    record_acceptance(5, ok, f"success {100 * success:.1f}% (se {100 * s['poisoned']['std_error']:.1f}) vs null "
                             f"{100 * null:.1f}%; B decreased in {sum(c['final_loss'] < c['initial_loss'] for c in s['brew'])}"
                             f"/{len(s['brew'])} cases{took}")
    assert brew_ok
    assert success > 3 * null


def _epoch_means(path):
    by_epoch = {}
    for r in _rows(path):
        by_epoch.setdefault(int(r["epoch"]), []).append(float(r["align_adv"]))
    return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def test_06_alignment_shape(desk_run):
    out, _ = desk_run
    pois = _epoch_means(out / "alignment.csv")
    clean = _epoch_means(out / "null_alignment.csv")
    pos = np.mean([v > 0 for v in pois])
    post = clean[1:]
    neg = np.mean([v < 0 for v in post])
    ok = pos >= 0.8 and neg > 0.5
    record_acceptance(6, ok, f"poisoned positive in {100 * pos:.0f}% of epochs; clean negative in "
                             f"{100 * neg:.0f}% of post-warmup epochs")
    assert ok


def test_07_validation_neutrality(desk_run):
    out, _ = desk_run
    s = json.loads((out / "summary.json").read_text())
    diff = s["poisoned"]["mean_val_acc"] - s["null"]["mean_val_acc"]
    ok = abs(diff) < 0.01
    record_acceptance(7, ok, f"val acc poisoned {s['poisoned']['mean_val_acc']:.4f} vs clean "
                             f"{s['null']['mean_val_acc']:.4f} (diff {100 * diff:+.2f} pp)")
    assert ok


def test_08_filtering_near_chance(desk_run):
    out, _ = desk_run
    rows = _rows(out / "filter.csv")
    parts, ok = [], True
    for frac in sorted({float(r["fraction"]) for r in rows}):
        sel = [r for r in rows if float(r["fraction"]) == frac]
        removed = sum(int(r["poisons_removed"]) for r in sel)
        total = sum(int(r["poisons"]) for r in sel)
        rate = removed / total
        ok &= rate <= frac + 0.10
        parts.append(f"{100 * frac:.0f}%: {removed}/{total} removed ({100 * rate:.0f}% vs random {100 * frac:.0f}%)")
    record_acceptance(8, ok, "; ".join(parts))
    assert ok


def test_09_dp_trend(desk_run):
    out, _ = desk_run
    pts = sorted(_rows(out / "dp_curve.csv"), key=lambda r: float(r["sigma"]))
    pts = [p for p in pts if p["counter"] == "0"]
    succ = [float(p["avg_success"]) for p in pts]
    acc = [float(p["val_acc"]) for p in pts]
    ok = (all(b <= a for a, b in zip(succ, succ[1:])) and all(b <= a for a, b in zip(acc, acc[1:]))
          and succ[-1] < succ[0])
    record_acceptance(9, ok, "sigma " + ", ".join(f"{float(p['sigma']):g}: success {100 * s:.1f}% acc {a:.3f}"
                                                   for p, s, a in zip(pts, succ, acc)))
    assert ok


TINY = {"dataset.per_class": "12", "dataset.val_per_class": "4", "dataset.image_size": "9",
        "dataset.classes": "4", "model.width_scale": "1/16", "train.epochs": "2", "train.drop_epochs": "1",
        "train.epoch_scale": "1.0", "brew.restarts": "2", "brew.steps": "4", "eval.cases": "2",
        "eval.victims": "2", "threat.budget": "0.05", "out": "run"}


def test_10_determinism(tmp_path, monkeypatch):
    cfg = with_overrides(DESK, TINY)
    trees = []
    for name, threads in (("first", 1), ("second", 1), ("four", 4)):
        (tmp_path / name).mkdir()
        monkeypatch.chdir(tmp_path / name)
        res = pipeline.run_experiment(cfg, threads=threads, out=cfg.out)
        pipeline.run_defenses(res, threads=threads, out=cfg.out)
        root = tmp_path / name / "run"
        trees.append({p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()})
    ok = trees[0] == trees[1] == trees[2]
    record_acceptance(10, ok, f"{len(trees[0])} report files byte-identical across 2 runs and threads 1 vs 4")
    assert ok
