"""Poison brewing by gradient matching.

The attacker perturbs P training images of the adversarial class so that the
(mean) training gradient of the poisons points along the gradient of the
target's adversarial loss. Perturbations are optimized with signed Adam under
an l-infinity bound, with restarts, model ensembles and differentiable
flip/crop augmentation. Feature-collision and bullseye objectives run through
the same outer loop for comparison.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from . import nn
from .autograd import Tensor
from .datapipe import (AugmentParams, Dataset, PoisonCase, augment_differentiable, default_pad,
                   quantize, sample_augment)
from .rng import stream
from .trainer import DPConfig

OBJECTIVES = ("cosine", "euclidean", "feature-collision", "bullseye")


class DegenerateGradient(ValueError):
    pass


class ConstraintViolation(AssertionError):
    pass


@dataclass(frozen=True)
class ThreatModel:
    eps_pixels: float = 16.0   # l-infinity bound in 0-255 pixel units
    budget: float = 0.01       # P / N
    targets: int = 1

    def __post_init__(self):
        if self.eps_pixels < 0:
            raise ValueError("eps must be >= 0")
        if not 0.0 < self.budget <= 1.0:
            raise ValueError("budget must lie in (0, 1]")
        if self.targets < 1:
            raise ValueError("need at least one target")

    @property
    def eps(self) -> float:
        return self.eps_pixels / 255.0


@dataclass(frozen=True)
class BrewConfig:
    restarts: int = 8
    steps: int = 250
    tau: float = 0.1           # step size as a fraction of eps
    ensemble: int = 1
    objective: str = "cosine"
    augment: bool = True
    pbatch: int = 128
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    decay: bool = True
    dp_counter: DPConfig = field(default_factory=DPConfig)

    def __post_init__(self):
        if self.restarts < 1 or self.steps < 0:
            raise ValueError("restarts >= 1 and steps >= 0 required")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.ensemble < 1 or self.pbatch < 1:
            raise ValueError("ensemble and pbatch must be >= 1")

    def step_size(self, eps: float, step: int) -> float:
        """tau*eps, multiplied by 0.1 after ceil(3M/8), ceil(5M/8) and ceil(7M/8) steps."""
        size = self.tau * eps
        if self.decay:
            m = self.steps
            drops = sum(1 for f in (3, 5, 7) if step >= math.ceil(f * m / 8))
            size *= 0.1 ** drops
        return size


@dataclass
class MatchResult:
    delta: np.ndarray                 # (P, H, W, C) chosen perturbation
    final_losses: list[float]         # B per restart after optimisation
    initial_losses: list[float]       # B per restart at the random start
    chosen: int
    deltas: list[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def final_loss(self) -> float:
        return self.final_losses[self.chosen]

    @property
    def initial_loss(self) -> float:
        return self.initial_losses[self.chosen]


# ------------------------------------------------------------------ pieces

@dataclass
class _Problem:
    """Everything the objective needs, resolved to arrays."""

    spec: nn.ModelSpec
    members: list[nn.ModelParams]
    base: np.ndarray            # clean poison images (P, H, W, C)
    labels: np.ndarray          # poison labels (= adv class)
    target_images: np.ndarray
    adv_labels: np.ndarray
    target_grads: list[list[np.ndarray]] = field(default_factory=list)
    target_feats: list[np.ndarray] = field(default_factory=list)


def case_arrays(train: Dataset, validation: Dataset, case: PoisonCase):
    rows = train.positions(case.poison_ids)
    base = train.images[rows]
    labels = train.labels[rows]
    if np.any(labels != case.adv_class):
        raise ValueError("poison images must carry the adversarial label")
    t_rows = validation.positions(case.target_ids)
    targets = validation.images[t_rows]
    adv = np.full(len(t_rows), case.adv_class, dtype=np.int64)
    return base, labels, targets, adv


def target_gradient(members: Sequence[nn.ModelParams], target_images: np.ndarray,
                    adv_labels: np.ndarray) -> list[np.ndarray]:
    """Per member: gradient of the summed adversarial loss over all targets (flat)."""
    out = []
    for m in members:
        ws = m.leaves(requires_grad=True)
        loss = ag.cross_entropy(nn.forward(m.spec, ws, Tensor(target_images)), adv_labels, reduction="sum")
        out.append(ag.backward(loss, ws, m.layout).values)
    return out


def _prepare(members: Sequence[nn.ModelParams], base, labels, target_images, adv_labels, objective) -> _Problem:
    members = list(members)
    prob = _Problem(members[0].spec, members, np.asarray(base), np.asarray(labels, dtype=np.int64),
                    np.asarray(target_images), np.asarray(adv_labels, dtype=np.int64))
    if objective in ("cosine", "euclidean"):
        prob.target_grads = [m.layout.split(g) for m, g in zip(members, target_gradient(members, target_images, adv_labels))]
    else:
        prob.target_feats = [nn.feature_matrix(m, target_images).mean(axis=0) for m in members]
    return prob


def _gradient_loss(kind: str, spec, ws, poisons: Tensor, labels, target_parts, dp_noise, dp: DPConfig | None):
    with ag.enable_grad():
        loss = ag.cross_entropy(nn.forward(spec, ws, poisons), labels)
        pgrads = ag.grad(loss, ws, create_graph=True)
    if dp is not None:
        pnorm = ag.sqrt(sum(ag.dot(g, g) for g in pgrads))
        if pnorm.data > dp.clip:
            scale = ag.div(dp.clip, pnorm)
            pgrads = [ag.mul(g, scale) for g in pgrads]
        pgrads = [ag.add(g, n) for g, n in zip(pgrads, dp_noise)]
    if kind == "euclidean":
        return sum(ag.sum(ag.power(ag.sub(p, t), 2.0)) for p, t in zip(pgrads, target_parts))
    tnorm = math.sqrt(sum(float(np.dot(t.reshape(-1), t.reshape(-1))) for t in target_parts))
    psq = sum(ag.dot(p, p) for p in pgrads)
    if tnorm == 0.0:
        raise DegenerateGradient("target gradient has zero norm; cosine undefined")
    if float(psq.data) == 0.0:
        raise DegenerateGradient("poison gradient has zero norm; cosine undefined")
    inner = sum(ag.dot(p, t) for p, t in zip(pgrads, target_parts))
    return ag.sub(1.0, ag.div(inner, ag.mul(ag.sqrt(psq), tnorm)))


def _feature_loss(kind: str, spec, ws, poisons: Tensor, target_feat: np.ndarray):
    with ag.enable_grad():
        feats = nn.features(spec, ws, poisons)
    diff_target = Tensor(target_feat[None, :])
    if kind == "feature-collision":
        d = ag.sub(feats, diff_target)
        return ag.mul(ag.sum(ag.mul(d, d)), 1.0 / feats.shape[0])
    centroid = ag.mean(feats, axis=0, keepdims=True)
    d = ag.sub(centroid, diff_target)
    return ag.sum(ag.mul(d, d))


def _objective(prob: _Problem, kind: str, delta: Tensor, rows: np.ndarray,
               augments: Sequence[AugmentParams] | None, dp: DPConfig | None = None,
               noise_gen: np.random.Generator | None = None) -> Tensor:
    """B for the poison rows ``rows``, averaged over ensemble members."""
    with ag.enable_grad():
        idx = rows if len(rows) != len(prob.base) else None
        d = delta if idx is None else ag.gather(delta, _row_index(delta.shape, rows))
        poisons = ag.add(Tensor(prob.base[rows]), d)
        if augments is not None:
            poisons = augment_differentiable(poisons, [augments[i] for i in rows])
        labels = prob.labels[rows]
        total = None
        for k, member in enumerate(prob.members):
            ws = member.leaves(requires_grad=True)
            if kind in ("cosine", "euclidean"):
                noise = None
                if dp is not None:
                    noise = [Tensor(noise_gen.normal(0.0, dp.sigma * dp.clip, size=s)) if dp.sigma > 0
                             else Tensor(np.zeros(s)) for s in member.layout.shapes]
                b = _gradient_loss(kind, prob.spec, ws, poisons, labels, prob.target_grads[k], noise, dp)
            else:
                b = _feature_loss(kind, prob.spec, ws, poisons, prob.target_feats[k])
            total = b if total is None else ag.add(total, b)
        return ag.mul(total, 1.0 / len(prob.members))


def _row_index(shape: tuple[int, ...], rows: np.ndarray) -> np.ndarray:
    per = int(np.prod(shape[1:]))
    base = (rows[:, None] * per + np.arange(per)[None, :]).reshape((len(rows), *shape[1:]))
    return base[..., None]


def _minibatches(p: int, size: int) -> list[np.ndarray]:
    return [np.arange(s, min(s + size, p)) for s in range(0, p, size)]


def _loss_and_grad(prob: _Problem, cfg: BrewConfig, delta: np.ndarray,
                   augments, noise_gen) -> tuple[float, np.ndarray]:
    dp = cfg.dp_counter if cfg.dp_counter.enabled else None
    batches = _minibatches(len(delta), cfg.pbatch)
    total, grad_acc = 0.0, np.zeros_like(delta)
    for rows in batches:
        d = Tensor(delta, requires_grad=True)
        b = _objective(prob, cfg.objective, d, rows, augments, dp, noise_gen)
        if cfg.objective in ("cosine", "euclidean"):
            g = ag.grad_wrt_inputs(b, d)
        else:
            g = ag.grad(b, [d])[0]
        total += float(b.data)
        grad_acc += g.data
    return total / len(batches), grad_acc / len(batches)


def _evaluate(prob: _Problem, kind: str, delta: np.ndarray, pbatch: int) -> float:
    batches = _minibatches(len(delta), pbatch)
    vals = []
    for rows in batches:
        vals.append(float(_objective(prob, kind, Tensor(delta), rows, None).data))
    return float(np.mean(vals))


# -------------------------------------------------------------- public ops

def matching_loss(delta: np.ndarray, members: Sequence[nn.ModelParams], train: Dataset,
                  validation: Dataset, case: PoisonCase, objective: str = "cosine",
                  augments: Sequence[AugmentParams] | None = None) -> float:
    """B(delta) over the full poison set (single batch), averaged over members."""
    base, labels, targets, adv = case_arrays(train, validation, case)
    prob = _prepare(members, base, labels, targets, adv, objective)
    return float(_objective(prob, objective, Tensor(delta), np.arange(len(base)), augments).data)


def matching_loss_arrays(delta: np.ndarray, members: Sequence[nn.ModelParams], base, labels,
                         target_images, adv_labels, objective: str = "cosine",
                         augments: Sequence[AugmentParams] | None = None, with_grad: bool = False):
    """Array-level form of :func:`matching_loss`; optionally also returns dB/ddelta."""
    prob = _prepare(members, base, labels, target_images, adv_labels, objective)
    d = Tensor(np.asarray(delta, dtype=np.float64), requires_grad=with_grad)
    b = _objective(prob, objective, d, np.arange(len(prob.base)), augments)
    if not with_grad:
        return float(b.data)
    g = ag.grad_wrt_inputs(b, d) if objective in ("cosine", "euclidean") else ag.grad(b, [d])[0]
    return float(b.data), g.data


def matching_objective(members: Sequence[nn.ModelParams], base, labels, target_images, adv_labels,
                       objective: str = "cosine"):
    """Return ``f(delta: Tensor) -> Tensor`` for gradient checking."""
    prob = _prepare(members, base, labels, target_images, adv_labels, objective)
    rows = np.arange(len(prob.base))
    return lambda d: _objective(prob, objective, d, rows, None)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, x: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(x), np.zeros_like(x), 0)


def signed_adam_step(delta: np.ndarray, grad: np.ndarray, state: AdamState, step_size: float,
                     beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> np.ndarray:
    """One signed Adam step: every coordinate with a nonzero Adam direction moves by exactly ``step_size``."""
    state.t += 1
    state.m = beta1 * state.m + (1 - beta1) * grad
    state.v = beta2 * state.v + (1 - beta2) * grad * grad
    mhat = state.m / (1 - beta1 ** state.t)
    vhat = state.v / (1 - beta2 ** state.t)
    direction = mhat / (np.sqrt(vhat) + eps)
    return delta - step_size * np.sign(direction)


def project(delta: np.ndarray, base: np.ndarray, eps: float) -> np.ndarray:
    """Clamp to the eps-ball, then keep base + delta inside [0, 1]."""
    d = np.clip(delta, -eps, eps)
    return np.clip(d, -base, 1.0 - base)


def _check_feasible(delta: np.ndarray, base: np.ndarray, eps: float, where: str) -> None:
    if np.abs(delta).max(initial=0.0) > eps:
        raise ConstraintViolation(f"{where}: |delta|_inf = {np.abs(delta).max()} exceeds eps = {eps}")
    x = base + delta
    if x.min(initial=0.0) < 0.0 or x.max(initial=1.0) > 1.0:
        raise ConstraintViolation(f"{where}: poisoned pixels leave [0, 1]")


def _run_restart(prob: _Problem, threat: ThreatModel, cfg: BrewConfig, seed: int, r: int,
                 monitor=None) -> tuple[np.ndarray, float, float]:
    eps = threat.eps
    gen = stream(seed, "brew", "restart", r)
    delta = project(gen.uniform(-eps, eps, size=prob.base.shape), prob.base, eps)
    _check_feasible(delta, prob.base, eps, f"restart {r} init")
    b0 = _evaluate(prob, cfg.objective, delta, cfg.pbatch)
    state = AdamState.zeros_like(delta)
    pad = default_pad(prob.base.shape[1])
    for k in range(cfg.steps):
        augments = sample_augment(stream(seed, "brew", "augment", r, k), len(delta), pad) if cfg.augment else None
        noise_gen = stream(seed, "brew", "dp-noise", r, k)
        b, g = _loss_and_grad(prob, cfg, delta, augments, noise_gen)
        delta = signed_adam_step(delta, g, state, cfg.step_size(eps, k), cfg.beta1, cfg.beta2, cfg.adam_eps)
        delta = project(delta, prob.base, eps)
        _check_feasible(delta, prob.base, eps, f"restart {r} step {k}")
        if monitor is not None:
            monitor(r, k, b)
    b1 = _evaluate(prob, cfg.objective, delta, cfg.pbatch) if cfg.steps else b0
    return delta, b0, b1


def brew_arrays(members: Sequence[nn.ModelParams], base, labels, target_images, adv_labels,
                threat: ThreatModel, cfg: BrewConfig, seed: int, monitor=None) -> MatchResult:
    members = list(members)
    if len(members) < 1:
        raise ValueError("need at least one pretrained model")
    prob = _prepare(members, base, labels, target_images, adv_labels, cfg.objective)
    if threat.eps == 0.0:
        zero = np.zeros_like(prob.base)
        b = _evaluate(prob, cfg.objective, zero, cfg.pbatch)
        return MatchResult(zero, [b] * cfg.restarts, [b] * cfg.restarts, 0, [zero] * cfg.restarts)
    deltas, b0s, b1s, errors = [], [], [], []
    for r in range(cfg.restarts):
        try:
            d, b0, b1 = _run_restart(prob, threat, cfg, seed, r, monitor)
        except DegenerateGradient as err:
            errors.append(f"restart {r}: {err}")
            d, b0, b1 = np.zeros_like(prob.base), math.inf, math.inf
        deltas.append(d)
        b0s.append(b0)
        b1s.append(b1)
    if len(errors) == cfg.restarts:
        raise DegenerateGradient("all restarts failed: " + "; ".join(errors))
    chosen = int(np.argmin(b1s))  # first minimum on ties
    return MatchResult(deltas[chosen], b1s, b0s, chosen, deltas)


def brew(members: Sequence[nn.ModelParams], train: Dataset, validation: Dataset, case: PoisonCase,
         threat: ThreatModel, cfg: BrewConfig, seed: int | None = None, monitor=None) -> MatchResult:
    """Optimise poison perturbations for ``case`` (restarts x steps of signed Adam)."""
    base, labels, targets, adv = case_arrays(train, validation, case)
    if len(targets) != threat.targets:
        raise ValueError(f"case has {len(targets)} targets, threat model expects {threat.targets}")
    return brew_arrays(members, base, labels, targets, adv, threat, cfg,
                       case.seed if seed is None else seed, monitor)


# ----------------------------------------------------------------- packages

@dataclass
class PoisonPackage:
    case: PoisonCase
    threat: ThreatModel
    config: BrewConfig
    delta: np.ndarray
    final_losses: list[float]
    initial_losses: list[float]
    chosen: int

    @classmethod
    def from_result(cls, case, threat, config, result: MatchResult) -> "PoisonPackage":
        return cls(case, threat, config, result.delta, list(result.final_losses),
                   list(result.initial_losses), result.chosen)


def _config_dict(cfg: BrewConfig) -> dict:
    d = asdict(cfg)
    return d


def save_package(directory, pkg: PoisonPackage, train: Dataset | None = None) -> dict:
    """Write manifest.json + delta.npy; with ``train``, also 8-bit poisoned images.

    Returns a small report including how many quantized pixels had to be
    pulled back inside the integer eps bound.
    """
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "case": pkg.case.to_dict(),
        "threat": asdict(pkg.threat),
        "brew": _config_dict(pkg.config),
        "final_losses": [float(b) for b in pkg.final_losses],
        "initial_losses": [float(b) for b in pkg.initial_losses],
        "chosen": int(pkg.chosen),
    }
    report = {"quantization_fixes": 0}
    np.save(out / "delta.npy", np.ascontiguousarray(pkg.delta, dtype="<f8"))
    if train is not None:
        images, fixes = export_quantized(train, pkg)
        np.save(out / "poisons_u8.npy", images)
        np.save(out / "poison_labels.npy", np.full(len(images), pkg.case.adv_class, dtype=np.int64))
        report["quantization_fixes"] = fixes
        manifest["quantization_fixes"] = fixes
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return report


def export_quantized(train: Dataset, pkg: PoisonPackage) -> tuple[np.ndarray, int]:
    """Round-to-nearest 8-bit poisoned images, re-verified against eps in integer pixel units."""
    rows = train.positions(pkg.case.poison_ids)
    clean = quantize(train.images[rows]).astype(np.int64)
    q = quantize(train.images[rows] + pkg.delta).astype(np.int64)
    bound = int(math.floor(pkg.threat.eps_pixels + 1e-9))
    fixed = np.clip(q, clean - bound, clean + bound)
    return np.clip(fixed, 0, 255).astype(np.uint8), int(np.count_nonzero(fixed != q))


def load_package(directory) -> PoisonPackage:
    d = Path(directory)
    m = json.loads((d / "manifest.json").read_text())
    brew_cfg = dict(m["brew"])
    brew_cfg["dp_counter"] = DPConfig(**brew_cfg["dp_counter"])
    return PoisonPackage(PoisonCase.from_dict(m["case"]), ThreatModel(**m["threat"]), BrewConfig(**brew_cfg),
                         np.load(d / "delta.npy"), m["final_losses"], m["initial_losses"], m["chosen"])
