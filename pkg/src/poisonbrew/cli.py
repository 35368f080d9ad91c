"""poisonbrew command line: pretrain, brew, train-victim, evaluate, defend, ablate, gradcheck, data, run."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis, gradcheck, nn, pipeline
from .brewer import PoisonPackage, load_package, save_package
from .config import ConfigError, ExperimentConfig, load_config, to_ini, with_overrides
from .trainer import train_victim
from .datapipe import apply_poison, load_cifar_binary, quantize, synth_dataset, write_cifar_binary


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for item in args.set or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    return with_overrides(cfg, overrides) if overrides else cfg


def _out(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(to_ini(cfg))
    return out


def _members(directory) -> list[nn.ModelParams]:
    paths = sorted(Path(directory).glob("member*.ckpt"), key=lambda p: int(p.stem[6:]))
    if not paths:
        raise FileNotFoundError(f"no member*.ckpt checkpoints in {directory}")
    return [nn.load_checkpoint(p) for p in paths]


def _packages(directory) -> list[PoisonPackage]:
    d = Path(directory)
    if (d / "manifest.json").exists():
        return [load_package(d)]
    if (d / "packages").is_dir():
        pkgs = pipeline.packages_from_dir(d)
    else:
        pkgs = pipeline.packages_from_dir(d.parent, d.name)
    if not pkgs:
        raise FileNotFoundError(f"no poison packages under {directory}")
    return pkgs


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    out = _out(cfg)
    train, val = pipeline.load_data(cfg)
    traces = pipeline.pretrain(cfg, train, val, args.threads)
    (out / "checkpoints").mkdir(exist_ok=True)
    for k, t in enumerate(traces):
        nn.save_checkpoint(out / "checkpoints" / f"member{k}.ckpt", t.params)
        t.write_csv(out / f"pretrain_member{k}.csv")
        print(f"member {k}: val acc {t.val_acc[-1]:.4f}" if t.val_acc else f"member {k}: 0 epochs")
    return 0


def cmd_brew(args) -> int:
    cfg = _config(args)
    out = _out(cfg)
    train, val = pipeline.load_data(cfg)
    members = _members(args.checkpoints or Path(cfg.out) / "checkpoints")
    cases = pipeline.make_cases(cfg, train, val)
    pkgs = pipeline.brew_cases(cfg, members[:cfg.brew.ensemble], train, val, cases, args.threads)
    for i, pkg in enumerate(pkgs):
        rep = save_package(out / "packages" / f"case{i}", pkg, train)
        print(f"case {i}: {pkg.case.target_class} -> {pkg.case.adv_class}  "
              f"B {pkg.initial_losses[pkg.chosen]:.4f} -> {pkg.final_losses[pkg.chosen]:.4f}  "
              f"quantization fixes {rep['quantization_fixes']}")
    return 0


def cmd_train_victim(args) -> int:
    cfg = _config(args)
    out = _out(cfg)
    train, val = pipeline.load_data(cfg)
    spec = pipeline.model_spec(cfg, train)
    pkg = _packages(args.package)[0]
    data = apply_poison(train, pkg.case.poison_ids, pkg.delta)
    tcfg = replace(cfg.train, seed=args.victim_seed)
    dp = cfg.dp if cfg.dp.enabled else None
    t_rows = val.positions(pkg.case.target_ids)
    mon = analysis.AlignmentMonitor(spec, val.images[t_rows], np.full(len(t_rows), pkg.case.adv_class),
                                    np.full(len(t_rows), pkg.case.target_class))
    trace = train_victim(data, spec, tcfg, dp, [mon], val)
    trace.write_csv(out / f"victim_{args.victim_seed}.csv")
    nn.save_checkpoint(out / f"victim_{args.victim_seed}.ckpt", trace.params)
    pred = nn.predict(trace.params, val.images[t_rows])
    acc = f"{trace.val_acc[-1]:.4f}" if trace.val_acc else "n/a (0 epochs)"
    print(f"target prediction {pred.tolist()} (adv class {pkg.case.adv_class}), val acc {acc}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    out = _out(cfg)
    train, val = pipeline.load_data(cfg)
    spec = pipeline.model_spec(cfg, train)
    pkgs = _packages(args.packages or Path(cfg.out) / "packages")
    vcfg = pipeline.victim_config(cfg)
    dp = cfg.dp if cfg.dp.enabled else None
    rep = analysis.evaluate_case_suite(pkgs, train, val, spec, vcfg, cfg.eval.victims, dp, args.threads,
                                       cfg.eval.monitor, null_attack=args.null)
    tag = "null_" if args.null else ""
    rep.write_csv(out / f"{tag}runs.csv")
    rep.write_alignment(out / f"{tag}alignment.csv")
    (out / f"{tag}eval_summary.json").write_text(json.dumps(rep.summary(), indent=2, sort_keys=True) + "\n")
    print(f"avg poison success {100 * rep.avg_success:.2f}% (+- {100 * rep.std_error:.2f}), "
          f"val acc {rep.mean_val_acc:.4f}")
    return 0


def cmd_defend(args) -> int:
    cfg = _config(args)
    out = _out(cfg)
    train, val = pipeline.load_data(cfg)
    spec = pipeline.model_spec(cfg, train)
    pkgs = _packages(args.packages or Path(cfg.out) / "packages")
    if args.kind == "filter":
        rows = []
        vcfg = pipeline.victim_config(cfg)
        for i, pkg in enumerate(pkgs):
            data = apply_poison(train, pkg.case.poison_ids, pkg.delta)
            tcfg = replace(vcfg, seed=analysis.victim_seed(vcfg.seed, i, 0))
            params = train_victim(data, spec, tcfg).params
            feats = nn.feature_matrix(params, data.images)
            for frac in cfg.eval.filter_fractions:
                r = analysis.feature_filter_defense(data, None, pkg.case.poison_ids, frac, features=feats)
                rows.append((i, r))
                print(f"case {i} fraction {frac:.2f}: poisons removed {r.poisons_removed}/{r.poisons} "
                      f"(random {r.random_poisons_removed:.1f}), clean removed {r.clean_removed}/{r.clean} "
                      f"(random {r.random_clean_removed:.1f})")
        analysis.write_filter_csv(out / "filter.csv", rows)
        return 0
    counter = None
    if args.counter:
        members = _members(args.checkpoints or Path(cfg.out) / "checkpoints")
        cases = [p.case for p in pkgs]

        def counter(sigma):
            from .trainer import DPConfig
            bcfg = replace(cfg.brew, dp_counter=DPConfig(cfg.eval.dp_clip, sigma, True))
            return pipeline.brew_cases(cfg, members[:cfg.brew.ensemble], train, val, cases, args.threads, bcfg)
    points = analysis.dp_defense_sweep(pkgs, train, val, spec, pipeline.victim_config(cfg), cfg.eval.dp_sigmas,
                                       cfg.eval.victims, cfg.eval.dp_clip, args.threads, counter)
    analysis.write_dp_curve(out / "dp_curve.csv", points)
    for p in points:
        print(f"sigma {p.sigma:g}{' (counter)' if p.counter else ''}: success {100 * p.avg_success:.2f}% "
              f"val acc {p.val_acc:.4f}")
    return 0


def cmd_ablate(args) -> int:
    axes, base_path = pipeline.read_grid(args.grid)
    if base_path and not args.config:
        args.config = str(Path(args.grid).parent / base_path)
    cfg = _config(args)
    out = _out(cfg)
    rows = pipeline.ablation_grid(cfg, axes, args.threads, out / "ablation.csv")
    for r in rows:
        cell = ", ".join(f"{k}={r[k]}" for k in axes)
        print(f"{cell}: {r['status']} success {r['avg_success']!r}")
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(args.points, args.seed or 0, args.only)
    print(gradcheck.format_report(results))
    return 0 if all(r.passed for r in results) else 1


def cmd_run(args) -> int:
    cfg = _config(args)
    res = pipeline.run_experiment(cfg, args.threads, cfg.out)
    s = res.summary()
    print(f"poisoned: {100 * s['poisoned']['avg_poison_success']:.2f}% "
          f"(+- {100 * s['poisoned']['std_error']:.2f}), val acc {s['poisoned']['mean_val_acc']:.4f}")
    if "null" in s:
        print(f"null:     {100 * s['null']['avg_poison_success']:.2f}%, val acc {s['null']['mean_val_acc']:.4f}")
    if args.defenses:
        rows, points = pipeline.run_defenses(res, args.threads, cfg.out)
        for frac in cfg.eval.filter_fractions:
            sel = [r for _, r in rows if r.fraction == frac]
            print(f"filter {frac:.2f}: poisons removed {sum(r.poisons_removed for r in sel)}/"
                  f"{sum(r.poisons for r in sel)} (random {sum(r.random_poisons_removed for r in sel):.1f})")
        for p in points:
            print(f"dp sigma {p.sigma:g}: success {100 * p.avg_success:.2f}%, val acc {p.val_acc:.4f}")
    return 0


def cmd_data(args) -> int:
    if args.action == "synth":
        ds = synth_dataset(args.classes, args.per_class, args.size, args.seed or 0, snr=args.snr,
                           modes=args.modes, mode_weight=args.mode_weight, texture=args.texture,
                           split=args.split)
        if ds.image_shape != (32, 32, 3):
            raise ValueError("the CIFAR binary format holds 32x32x3 images; use --size 32")
        write_cifar_binary(args.path, quantize(ds.images), ds.labels)
        print(f"wrote {len(ds)} records to {args.path}")
        return 0
    ds = load_cifar_binary(args.path)
    counts = np.bincount(ds.labels, minlength=10)
    print(f"{len(ds)} records, shape {ds.image_shape}, per-class counts {counts.tolist()}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI experiment config")
    common.add_argument("--seed", type=int, help="override the experiment seed")
    common.add_argument("--threads", type=int, default=1, help="worker processes (results do not depend on it)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override, repeatable")

    p = argparse.ArgumentParser(prog="poisonbrew", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="train clean ensemble members").set_defaults(fn=cmd_pretrain)
    s = sub.add_parser("brew", parents=[common], help="brew poisons for every case")
    s.add_argument("--checkpoints", help="directory of member*.ckpt (default OUT/checkpoints)")
    s.set_defaults(fn=cmd_brew)
    s = sub.add_parser("train-victim", parents=[common], help="train one victim on a poisoned dataset")
    s.add_argument("--package", required=True)
    s.add_argument("--victim-seed", type=int, default=0)
    s.set_defaults(fn=cmd_train_victim)
    s = sub.add_parser("evaluate", parents=[common], help="n cases x m victims success rate")
    s.add_argument("--packages", help="package directory or OUT (default OUT/packages)")
    s.add_argument("--null", action="store_true", help="evaluate the eps = 0 null attack under the same seeds")
    s.set_defaults(fn=cmd_evaluate)
    s = sub.add_parser("defend", parents=[common], help="feature-space filtering or DP-SGD sweep")
    s.add_argument("kind", choices=("filter", "dp"))
    s.add_argument("--packages")
    s.add_argument("--checkpoints")
    s.add_argument("--counter", action="store_true", help="attacker re-brews with matching DP noise")
    s.set_defaults(fn=cmd_defend)
    s = sub.add_parser("ablate", parents=[common], help="cartesian sweep from a grid manifest")
    s.add_argument("grid")
    s.set_defaults(fn=cmd_ablate)
    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check suite")
    s.add_argument("--points", type=int, default=20)
    s.add_argument("--only", nargs="*")
    s.set_defaults(fn=cmd_gradcheck)
    s = sub.add_parser("run", parents=[common], help="pretrain -> brew -> evaluate")
    s.add_argument("--defenses", action="store_true", help="also run feature filtering and the DP sweep")
    s.set_defaults(fn=cmd_run)
    s = sub.add_parser("data", parents=[common], help="dataset tooling")
    s.add_argument("action", choices=("synth", "inspect"))
    s.add_argument("path")
    s.add_argument("--classes", type=int, default=10)
    s.add_argument("--per-class", type=int, default=100)
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--snr", type=float, default=1.5)
    s.add_argument("--modes", type=int, default=1)
    s.add_argument("--mode-weight", type=float, default=0.0)
    s.add_argument("--texture", type=float, default=0.0)
    s.add_argument("--split", default="train", choices=("train", "validation"))
    s.set_defaults(fn=cmd_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError, ValueError) as err:
        print(f"poisonbrew {args.command}: error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
