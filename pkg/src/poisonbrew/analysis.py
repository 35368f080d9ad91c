"""Measurement machinery: avg. poison success over cases x victims, gradient
alignment during victim training, the adversarial-descent step-size bound,
feature-space outlier filtering and the DP-SGD defense sweep."""
from __future__ import annotations

import csv
import math
import multiprocessing as mp
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import autograd as ag
from . import nn
from .autograd import Tensor
from .brewer import PoisonPackage
from .datapipe import Dataset, apply_poison
from .rng import derive_seed, stream
from .trainer import DPConfig, TrainConfig, TrainingDiverged, train_victim

BOUND_BETA = 0.9


# ---------------------------------------------------------------- alignment

def _flat_grad(spec: nn.ModelSpec, flat: np.ndarray, images: np.ndarray, labels: np.ndarray) -> np.ndarray:
    layout = spec.layout()
    ws = [Tensor(p, requires_grad=True) for p in layout.split(flat)]
    loss = ag.cross_entropy(nn.forward(spec, ws, Tensor(images)), labels, reduction="sum")
    return ag.backward(loss, ws, layout).values


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.sqrt(a @ a)), float(np.sqrt(b @ b))
    if na == 0.0 or nb == 0.0:
        raise ZeroDivisionError("cosine of a zero vector")
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))


@dataclass
class BoundTrace:
    """Per step: beta * cos * |grad L_adv| / |grad L| against the proxy alpha_k * L ~ 1."""

    values: list[float] = field(default_factory=list)
    proxy: float = 1.0

    @property
    def satisfied(self) -> list[bool]:
        return [v > self.proxy for v in self.values]


class AlignmentMonitor:
    """Training hook: cosine between each minibatch gradient and the target's
    adversarial-label gradient (and, separately, its original-label gradient),
    averaged per epoch."""

    def __init__(self, spec: nn.ModelSpec, target_images: np.ndarray, adv_labels, orig_labels,
                 beta: float = BOUND_BETA):
        self.spec = spec
        self.targets = np.asarray(target_images)
        self.adv = np.asarray(adv_labels, dtype=np.int64)
        self.orig = np.asarray(orig_labels, dtype=np.int64)
        self.beta = beta
        self.adv_series: list[float] = []
        self.orig_series: list[float] = []
        self.bound = BoundTrace()
        self.skipped = 0
        self._adv: list[float] = []
        self._orig: list[float] = []

    def on_batch(self, epoch: int, flat: np.ndarray, batch_grad: np.ndarray, lr: float) -> None:
        g_adv = _flat_grad(self.spec, flat, self.targets, self.adv)
        g_orig = _flat_grad(self.spec, flat, self.targets, self.orig)
        try:
            c_adv = cosine(g_adv, batch_grad)
            c_orig = cosine(g_orig, batch_grad)
        except ZeroDivisionError:
            self.skipped += 1
            return
        self._adv.append(c_adv)
        self._orig.append(c_orig)
        ratio = float(np.sqrt(g_adv @ g_adv) / np.sqrt(batch_grad @ batch_grad))
        self.bound.values.append(self.beta * c_adv * ratio)

    def on_epoch_end(self, epoch: int) -> None:
        self.adv_series.append(float(np.mean(self._adv)) if self._adv else float("nan"))
        self.orig_series.append(float(np.mean(self._orig)) if self._orig else float("nan"))
        self._adv, self._orig = [], []

    def export(self) -> dict[str, list[float]]:
        return {"align_adv": list(self.adv_series), "align_orig": list(self.orig_series)}


def alignment_monitor(spec, target_images, adv_labels, orig_labels) -> AlignmentMonitor:
    return AlignmentMonitor(spec, target_images, adv_labels, orig_labels)


# ----------------------------------------------------------- case evaluation

@dataclass
class VictimRun:
    case: int
    victim: int
    seed: int
    success: float            # fraction of targets classified as y_adv (nan if diverged)
    val_acc: float
    status: str = "ok"
    align_adv: list[float] = field(default_factory=list)
    align_orig: list[float] = field(default_factory=list)
    target_pred: list[int] = field(default_factory=list)
    params: nn.ModelParams | None = field(default=None, compare=False, repr=False)


@dataclass
class EvalReport:
    runs: list[VictimRun]
    n_cases: int
    n_victims: int

    def case_success(self) -> list[float]:
        out = []
        for c in range(self.n_cases):
            vals = [r.success for r in self.runs if r.case == c and not math.isnan(r.success)]
            out.append(float(np.mean(vals)) if vals else float("nan"))
        return out

    @property
    def avg_success(self) -> float:
        vals = [v for v in self.case_success() if not math.isnan(v)]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def std_error(self) -> float:
        """Standard error over case-level averages (not over individual runs)."""
        vals = [v for v in self.case_success() if not math.isnan(v)]
        if len(vals) < 2:
            return 0.0
        return float(np.std(vals, ddof=1) / math.sqrt(len(vals)))

    @property
    def mean_val_acc(self) -> float:
        vals = [r.val_acc for r in self.runs if not math.isnan(r.val_acc)]
        return float(np.mean(vals)) if vals else float("nan")

    def summary(self) -> dict:
        return {"avg_poison_success": self.avg_success, "std_error": self.std_error,
                "case_success": self.case_success(), "mean_val_acc": self.mean_val_acc,
                "n_cases": self.n_cases, "n_victims": self.n_victims,
                "diverged": sum(r.status != "ok" for r in self.runs)}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["case", "victim", "seed", "success", "val_acc", "status", "target_pred"])
            for r in self.runs:
                w.writerow([r.case, r.victim, r.seed, repr(r.success), repr(r.val_acc), r.status,
                            " ".join(str(p) for p in r.target_pred)])
            w.writerow(["summary", "", "", repr(self.avg_success), repr(self.mean_val_acc),
                        f"se={self.std_error!r}", ""])

    def write_alignment(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["case", "victim", "epoch", "align_adv", "align_orig"])
            for r in self.runs:
                for e, (a, o) in enumerate(zip(r.align_adv, r.align_orig)):
                    w.writerow([r.case, r.victim, e, repr(a), repr(o)])


def victim_seed(base_seed: int, case_index: int, victim_index: int) -> int:
    """Victim seeds depend only on (base seed, case, victim) so attacks are compared seed-matched."""
    return derive_seed(base_seed, "victim", case_index, victim_index) % (2**31)


def _victim_job(args) -> VictimRun:
    (ci, vi, seed, train, val, poison_ids, delta, targets, adv_class, orig_class,
     spec, config, dp, monitor, keep_params) = args
    data = apply_poison(train, poison_ids, delta) if len(poison_ids) else train
    cfg = TrainConfig(**{**config.__dict__, "seed": seed})
    hooks = []
    mon = None
    if monitor:
        mon = AlignmentMonitor(spec, targets, np.full(len(targets), adv_class), np.full(len(targets), orig_class))
        hooks.append(mon)
    try:
        with _single_thread():
            trace = train_victim(data, spec, cfg, dp, hooks, None)
            pred = nn.predict(trace.params, targets)
            acc = float(np.mean(nn.predict(trace.params, val.images) == val.labels)) if len(val) else float("nan")
    except TrainingDiverged:
        return VictimRun(ci, vi, seed, float("nan"), float("nan"), "diverged")
    return VictimRun(ci, vi, seed, float(np.mean(pred == adv_class)), acc, "ok",
                     list(mon.adv_series) if mon else [], list(mon.orig_series) if mon else [],
                     [int(p) for p in pred], trace.params if keep_params else None)


class _single_thread:
    """Pin BLAS to one thread so results do not depend on the worker count."""

    def __enter__(self):
        self._ctx = threadpool_limits(1)
        return self

    def __exit__(self, *exc):
        self._ctx.unregister()
        return False


def run_jobs(fn: Callable, jobs: Sequence, threads: int = 1) -> list:
    """Map ``fn`` over ``jobs`` in order; with threads > 1, across worker processes."""
    if threads <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads, mp_context=mp.get_context("fork")) as pool:
        return list(pool.map(fn, jobs))


def evaluate_case_suite(packages: Sequence[PoisonPackage], train: Dataset, validation: Dataset,
                        spec: nn.ModelSpec, config: TrainConfig, victims: int, dp: DPConfig | None = None,
                        threads: int = 1, monitor: bool = False, null_attack: bool = False,
                        keep_params: bool = False) -> EvalReport:
    """Train ``victims`` fresh models per poisoned dataset and aggregate target success.

    With ``null_attack`` the perturbations are dropped (eps = 0 under the same seeds).
    Clean validation accuracy excludes the case's target images. ``keep_params``
    retains each victim's final parameters on its run (for defenses that inspect them).
    """
    jobs = []
    for ci, pkg in enumerate(packages):
        case = pkg.case
        t_rows = validation.positions(case.target_ids)
        keep = np.setdiff1d(np.arange(len(validation)), t_rows)
        val = validation.subset(keep)
        targets = validation.images[t_rows]
        delta = np.zeros_like(pkg.delta) if null_attack else pkg.delta
        for vi in range(victims):
            seed = victim_seed(config.seed, ci, vi)
            jobs.append((ci, vi, seed, train, val, case.poison_ids, delta, targets, case.adv_class,
                         case.target_class, spec, config, dp, monitor, keep_params))
    runs = run_jobs(_victim_job, jobs, threads)
    return EvalReport(sorted(runs, key=lambda r: (r.case, r.victim)), len(packages), victims)


# ------------------------------------------------- adversarial descent toy

@dataclass
class Prop1Report:
    violations: int
    premise_steps: int       # steps where a positive admissible step size existed
    vacuous_steps: int       # steps where the bound forced alpha = 0
    below_resolution: int    # guaranteed decrease smaller than float resolution; not judged
    instances: int

    @property
    def premise_never_satisfied(self) -> bool:
        return self.premise_steps == 0


def _quad(theta, centre, mat):
    d = theta - centre
    return 0.5 * float(d @ mat @ d), mat @ d


def descent_run(A: np.ndarray, b: np.ndarray, B: np.ndarray, a: np.ndarray, theta0: np.ndarray,
                gen: np.random.Generator, beta: float = BOUND_BETA, steps: int = 50,
                fraction: float | None = None):
    """Gradient descent on L = 1/2|theta-b|_A^2 with step sizes obeying
    alpha*Lip < beta * cos * |grad L_adv| / |grad L|, checking that
    L_adv = 1/2|theta-a|_B^2 decreases at every admissible step.

    Returns (violations, premise_steps, vacuous_steps, below_resolution).
    """
    lip = float(np.linalg.eigvalsh(B).max())
    theta = theta0.copy()
    viol = prem = vac = small = 0
    for _ in range(steps):
        _, g = _quad(theta, b, A)
        f_adv, g_adv = _quad(theta, a, B)
        ng, na = float(np.sqrt(g @ g)), float(np.sqrt(g_adv @ g_adv))
        if ng == 0.0 or na == 0.0:
            break
        cos = float(g @ g_adv) / (ng * na)
        bound = beta * cos * na / ng / lip
        if bound <= 0.0:
            vac += 1
            break  # alpha forced to 0: the iterate cannot move
        u = gen.uniform(0.05, 1.0) if fraction is None else fraction
        alpha = u * bound
        prem += 1
        theta_next = theta - alpha * g
        f_next, _ = _quad(theta_next, a, B)
        # descent-lemma margin: alpha * <g_adv, g> - alpha^2 * Lip/2 * |g|^2 > 0
        margin = alpha * float(g @ g_adv) - 0.5 * lip * alpha ** 2 * ng ** 2
        if margin <= 64 * np.finfo(float).eps * max(abs(f_adv), 1.0):
            small += 1
        elif not f_next < f_adv:
            viol += 1
        theta = theta_next
    return viol, prem, vac, small


def _random_spd(gen: np.random.Generator, dim: int) -> np.ndarray:
    q, _ = np.linalg.qr(gen.normal(size=(dim, dim)))
    return (q * gen.uniform(0.1, 10.0, size=dim)) @ q.T


def prop1_toy_verifier(dimension: int = 10, instances: int = 100, seed: int = 0,
                       beta: float = BOUND_BETA, steps: int = 50) -> Prop1Report:
    """Random quadratic pairs; counts steps where the adversarial loss fails to decrease
    although the step size satisfied the bound. Any violation is an implementation error."""
    gen = stream(seed, "prop1")
    tot = [0, 0, 0, 0]
    for _ in range(instances):
        A, B = _random_spd(gen, dimension), _random_spd(gen, dimension)
        a, b = gen.normal(size=dimension), gen.normal(size=dimension)
        theta0 = gen.normal(scale=3.0, size=dimension)
        res = descent_run(A, b, B, a, theta0, gen, beta, steps)
        tot = [t + r for t, r in zip(tot, res)]
    return Prop1Report(tot[0], tot[1], tot[2], tot[3], instances)


# ---------------------------------------------------------------- filtering

@dataclass
class FilterReport:
    fraction: float
    poisons: int
    clean: int                  # clean examples in the poison class
    poisons_removed: int
    clean_removed: int
    random_poisons_removed: float
    random_clean_removed: float

    @property
    def poison_removal_rate(self) -> float:
        return self.poisons_removed / self.poisons if self.poisons else float("nan")


def feature_filter_defense(dataset: Dataset, params: nn.ModelParams | None, poison_ids: Sequence[int],
                           fraction: float, features: np.ndarray | None = None) -> FilterReport:
    """Per class, drop the ``fraction`` of examples farthest from the class centroid in
    penultimate-feature space; count removed poisons and clean examples of the poison class."""
    feats = nn.feature_matrix(params, dataset.images) if features is None else np.asarray(features)
    rows = set(dataset.positions(poison_ids).tolist())
    is_poison = np.array([i in rows for i in range(len(dataset))])
    removed = np.zeros(len(dataset), dtype=bool)
    for c in range(dataset.classes):
        members = np.flatnonzero(dataset.labels == c)
        if len(members) == 0:
            continue
        centroid = feats[members].mean(axis=0)
        dist = np.sqrt(((feats[members] - centroid) ** 2).sum(axis=1))
        k = int(math.floor(fraction * len(members) + 0.5))
        order = np.argsort(-dist, kind="stable")
        removed[members[order[:k]]] = True
    if is_poison.any():
        pclass = int(dataset.labels[is_poison][0])
    else:
        pclass = -1
    in_class = dataset.labels == pclass
    n_p = int(is_poison.sum())
    n_c = int((in_class & ~is_poison).sum())
    return FilterReport(fraction, n_p, n_c, int((removed & is_poison).sum()),
                        int((removed & in_class & ~is_poison).sum()), fraction * n_p, fraction * n_c)


# ----------------------------------------------------------------- DP sweep

@dataclass
class DPPoint:
    sigma: float
    avg_success: float
    std_error: float
    val_acc: float
    counter: bool = False


def dp_defense_sweep(packages: Sequence[PoisonPackage], train: Dataset, validation: Dataset,
                     spec: nn.ModelSpec, config: TrainConfig, sigmas: Sequence[float], victims: int,
                     clip: float = 1.0, threads: int = 1,
                     counter_packages: Callable[[float], Sequence[PoisonPackage]] | None = None) -> list[DPPoint]:
    """Evaluate the packages under batch-level DP-SGD for each noise level.

    sigma = 0 is the undefended baseline (DP disabled, identical seeds). With
    ``counter_packages`` the attacker re-brews with matching clip + noise.
    """
    points = []
    for sigma in sigmas:
        dp = None if sigma == 0 else DPConfig(clip=clip, sigma=float(sigma), enabled=True)
        rep = evaluate_case_suite(packages, train, validation, spec, config, victims, dp, threads)
        points.append(DPPoint(float(sigma), rep.avg_success, rep.std_error, rep.mean_val_acc))
        if counter_packages is not None and sigma > 0:
            rep = evaluate_case_suite(counter_packages(sigma), train, validation, spec, config, victims, dp, threads)
            points.append(DPPoint(float(sigma), rep.avg_success, rep.std_error, rep.mean_val_acc, True))
    return points


def write_dp_curve(path, points: Sequence[DPPoint]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sigma", "counter", "avg_success", "std_error", "val_acc"])
        for p in points:
            w.writerow([repr(p.sigma), int(p.counter), repr(p.avg_success), repr(p.std_error), repr(p.val_acc)])


def write_filter_csv(path, rows: Sequence[tuple[int, FilterReport]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["case", "fraction", "poisons", "clean", "poisons_removed", "clean_removed",
                    "random_poisons_removed", "random_clean_removed"])
        for case, r in rows:
            w.writerow([case, repr(r.fraction), r.poisons, r.clean, r.poisons_removed, r.clean_removed,
                        repr(r.random_poisons_removed), repr(r.random_clean_removed)])
