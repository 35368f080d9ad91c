"""End-to-end experiment: data -> pretrain -> cases -> brew -> evaluate, with report files.

All randomness derives from ``ExperimentConfig.seed`` through named streams, so
reports are byte-identical across runs and across worker counts.
"""
from __future__ import annotations

import configparser
import csv
import itertools
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import analysis, nn
from .brewer import PoisonPackage, brew, load_package, save_package
from .config import ExperimentConfig, as_dict, to_ini, with_overrides
from .datapipe import Dataset, PoisonCase, apply_poison, load_cifar_dir, sample_case, synth_dataset
from .rng import derive_seed
from .trainer import DPConfig, TrainConfig, train_victim


def _seed(seed: int, *path) -> int:
    return derive_seed(seed, *path) % (2**31)


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = cfg.dataset
    if d.source == "cifar":
        return load_cifar_dir(d.cifar_dir, d.per_class, d.val_per_class)
    seed = _seed(cfg.seed, "data")
    kw = dict(snr=d.snr, modes=d.modes, mode_weight=d.mode_weight, texture=d.texture,
              texture_cutoff=d.texture_cutoff)
    train = synth_dataset(d.classes, d.per_class, d.image_size, seed, split="train", **kw)
    val = synth_dataset(d.classes, d.val_per_class, d.image_size, seed, split="validation", **kw)
    return train, val


def model_spec(cfg: ExperimentConfig, train: Dataset) -> nn.ModelSpec:
    m = cfg.model
    if m.kind == "convnet":
        return replace(nn.ModelSpec.convnet(m.width_scale, train.image_shape, train.classes), init_gain=m.init_gain)
    if m.kind == "mlp":
        return nn.ModelSpec(kind="mlp", widths=m.hidden, input_shape=train.image_shape, classes=train.classes,
                            init_gain=m.init_gain)
    raise ValueError(f"unknown model.kind {m.kind!r}")


def member_config(cfg: ExperimentConfig, k: int) -> TrainConfig:
    return replace(cfg.train, seed=_seed(cfg.seed, "pretrain", k))


def victim_config(cfg: ExperimentConfig) -> TrainConfig:
    return replace(cfg.train, seed=_seed(cfg.seed, "victims"))


def _pretrain_job(args):
    train, val, spec, tcfg = args
    return train_victim(train, spec, tcfg, None, (), val)


def pretrain(cfg: ExperimentConfig, train: Dataset, val: Dataset, threads: int = 1):
    """One clean model per ensemble member; returns the training traces."""
    spec = model_spec(cfg, train)
    jobs = [(train, val, spec, member_config(cfg, k)) for k in range(cfg.brew.ensemble)]
    return analysis.run_jobs(_pretrain_job, jobs, threads)


def make_cases(cfg: ExperimentConfig, train: Dataset, val: Dataset) -> list[PoisonCase]:
    return [sample_case(train, val, cfg.threat.budget, cfg.threat.targets, _seed(cfg.seed, "case", i))
            for i in range(cfg.eval.cases)]


def _brew_job(args):
    members, train, val, case, threat, bcfg, seed = args
    res = brew(members, train, val, case, threat, bcfg, seed)
    return PoisonPackage.from_result(case, threat, bcfg, res)


def brew_cases(cfg: ExperimentConfig, members: Sequence[nn.ModelParams], train: Dataset, val: Dataset,
               cases: Sequence[PoisonCase], threads: int = 1, brew_cfg=None) -> list[PoisonPackage]:
    bcfg = cfg.brew if brew_cfg is None else brew_cfg
    jobs = [(list(members), train, val, case, cfg.threat, bcfg, _seed(cfg.seed, "brew", i))
            for i, case in enumerate(cases)]
    return analysis.run_jobs(_brew_job, jobs, threads)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    train: Dataset
    validation: Dataset
    spec: nn.ModelSpec
    members: list[nn.ModelParams]
    pretrain_acc: list[float]
    packages: list[PoisonPackage]
    report: analysis.EvalReport
    null_report: analysis.EvalReport | None = None
    extra: dict = field(default_factory=dict)

    def summary(self) -> dict:
        out = {
            "config": as_dict(self.config),
            "pretrain_val_acc": self.pretrain_acc,
            "brew": [{"case": i, "target_class": p.case.target_class, "adv_class": p.case.adv_class,
                      "initial_loss": p.initial_losses[p.chosen], "final_loss": p.final_losses[p.chosen],
                      "chosen_restart": p.chosen} for i, p in enumerate(self.packages)],
            "poisoned": self.report.summary(),
        }
        if self.null_report is not None:
            out["null"] = self.null_report.summary()
        out.update(self.extra)
        return out


def run_experiment(cfg: ExperimentConfig, threads: int = 1, out: str | Path | None = None) -> ExperimentResult:
    train, val = load_data(cfg)
    spec = model_spec(cfg, train)
    traces = pretrain(cfg, train, val, threads)
    members = [t.params for t in traces]
    cases = make_cases(cfg, train, val)
    packages = brew_cases(cfg, members, train, val, cases, threads)
    vcfg = victim_config(cfg)
    e = cfg.eval
    report = analysis.evaluate_case_suite(packages, train, val, spec, vcfg, e.victims, None, threads, e.monitor,
                                          keep_params=True)
    null = None
    if e.null_attack:
        null = analysis.evaluate_case_suite(packages, train, val, spec, vcfg, e.victims, None, threads,
                                            e.monitor, null_attack=True)
    result = ExperimentResult(cfg, train, val, spec, members, [t.val_acc[-1] if t.val_acc else float("nan")
                                                               for t in traces], packages, report, null)
    if out is not None:
        write_reports(result, out)
    return result


def run_defenses(result: ExperimentResult, threads: int = 1, out: str | Path | None = None):
    """Feature filtering with victim 0 of every case, then the DP-SGD sweep.

    sigma = 0 reuses the undefended evaluation (same seeds, DP off).
    Returns ``(filter_rows, dp_points)``.
    """
    cfg, e = result.config, result.config.eval
    vcfg = victim_config(cfg)
    first = {r.case: r for r in result.report.runs if r.victim == 0}
    rows = []
    for i, pkg in enumerate(result.packages):
        poisoned = apply_poison(result.train, pkg.case.poison_ids, pkg.delta)
        run = first[i]
        if run.params is None:
            raise ValueError(f"case {i}: victim 0 has no parameters (diverged or not kept)")
        feats = nn.feature_matrix(run.params, poisoned.images)
        for frac in e.filter_fractions:
            rows.append((i, analysis.feature_filter_defense(poisoned, None, pkg.case.poison_ids, frac, features=feats)))
    points = []
    for sigma in e.dp_sigmas:
        if sigma == 0:
            rep = result.report
        else:
            dp = DPConfig(clip=e.dp_clip, sigma=float(sigma), enabled=True)
            rep = analysis.evaluate_case_suite(result.packages, result.train, result.validation, result.spec,
                                               vcfg, e.victims, dp, threads)
        points.append(analysis.DPPoint(float(sigma), rep.avg_success, rep.std_error, rep.mean_val_acc))
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        analysis.write_filter_csv(out / "filter.csv", rows)
        analysis.write_dp_curve(out / "dp_curve.csv", points)
    return rows, points


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_reports(result: ExperimentResult, out: str | Path) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(to_ini(result.config))
    ck = out / "checkpoints"
    ck.mkdir(exist_ok=True)
    for k, m in enumerate(result.members):
        nn.save_checkpoint(ck / f"member{k}.ckpt", m)
    for i, pkg in enumerate(result.packages):
        save_package(out / "packages" / f"case{i}", pkg, result.train)
    with open(out / "brew.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["case", "restart", "initial_loss", "final_loss", "chosen"])
        for i, pkg in enumerate(result.packages):
            for r, (b0, b1) in enumerate(zip(pkg.initial_losses, pkg.final_losses)):
                w.writerow([i, r, repr(float(b0)), repr(float(b1)), int(r == pkg.chosen)])
    result.report.write_csv(out / "runs.csv")
    result.report.write_alignment(out / "alignment.csv")
    if result.null_report is not None:
        result.null_report.write_csv(out / "null_runs.csv")
        result.null_report.write_alignment(out / "null_alignment.csv")
    _dump_json(out / "summary.json", result.summary())
    return out


def packages_from_dir(out: str | Path, sub: str = "packages") -> list[PoisonPackage]:
    root = Path(out) / sub
    dirs = sorted(root.glob("case*"), key=lambda p: int(p.name[4:]))
    return [load_package(d) for d in dirs]


def zero_packages(packages: Sequence[PoisonPackage]) -> list[PoisonPackage]:
    return [replace(p, delta=np.zeros_like(p.delta)) for p in packages]


# ---------------------------------------------------------------- ablations

def read_grid(path) -> tuple[dict[str, list[str]], str | None]:
    """Grid manifest: INI with an ``[axes]`` section (``brew.steps = 50; 100``) and an
    optional ``[grid] base = path/to/config.ini``."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser.read_string(Path(path).read_text())
    if "axes" not in parser:
        raise ValueError(f"{path}: grid manifest needs an [axes] section")
    axes = {k: [v.strip() for v in vals.split(";") if v.strip()] for k, vals in parser["axes"].items()}
    base = parser["grid"].get("base") if "grid" in parser else None
    return axes, base


def ablation_grid(base: ExperimentConfig, axes: dict[str, Sequence], threads: int = 1,
                  out: str | Path | None = None) -> list[dict]:
    """Cartesian sweep over dotted config overrides. Cases are shared across cells
    because they depend only on the seed, budget and data. Failed cells are recorded."""
    keys = list(axes)
    rows = []
    for values in itertools.product(*(axes[k] for k in keys)):
        cell = dict(zip(keys, values))
        row = {k: str(v) for k, v in cell.items()}
        try:
            cfg = with_overrides(base, cell)
            res = run_experiment(replace(cfg, eval=replace(cfg.eval, null_attack=False)), threads)
            s = res.report.summary()
            row.update(status="ok", avg_success=s["avg_poison_success"], std_error=s["std_error"],
                       val_acc=s["mean_val_acc"],
                       final_loss=float(np.mean([p.final_losses[p.chosen] for p in res.packages])))
        except Exception as err:  # a failed cell must not sink the sweep
            row.update(status=f"failed: {type(err).__name__}: {err}", avg_success=float("nan"),
                       std_error=float("nan"), val_acc=float("nan"), final_loss=float("nan"))
        rows.append(row)
    if out is not None:
        write_grid_csv(out, rows, keys)
    return rows


def write_grid_csv(path, rows: Sequence[dict], keys: Sequence[str]) -> None:
    cols = [*keys, "status", "avg_success", "std_error", "val_acc", "final_loss"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])
