"""Finite-difference check suite over every primitive and the double-backprop path.

Each check maps a flat float64 vector to a scalar through one op (contracted
with a fixed random cotangent), and is evaluated at several random points.
Second-order checks differentiate a gradient built with ``create_graph=True``.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Callable

import numpy as np

from . import autograd as ag
from . import nn
from .autograd import Tensor
from .brewer import matching_objective
from .datapipe import AugmentParams, augment_differentiable
from .rng import stream

TOLERANCE = 1e-4
STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    points: int
    max_rel_error: float
    kinks: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


@dataclass
class _Check:
    name: str
    size: int
    build: Callable[[np.random.Generator], Callable[[Tensor], Tensor]]
    sample: Callable[[np.random.Generator, int], np.ndarray] | None = None
    coords: int | None = None     # check a random subset of coordinates for large inputs


def _normal(gen, n):
    return gen.normal(size=n)


def _positive(gen, n):
    return gen.uniform(0.5, 2.0, size=n)


def _unary(name, op, shape=(3, 4), sample=None):
    def build(gen):
        with ag.no_grad():
            out = op(Tensor(np.ones(shape))).shape
        w = gen.normal(size=out)
        return lambda x: ag.sum(ag.mul(op(ag.reshape(x, shape)), w))
    return _Check(name, int(np.prod(shape)), build, sample)


def _binary(name, op, sa, sb, sample=None):
    na = int(np.prod(sa))

    def build(gen):
        out = np.broadcast_shapes(sa, sb) if name != "matmul" else (sa[0], sb[1])
        w = gen.normal(size=out)

        def f(x):
            a = ag.reshape(_slice(x, 0, na), sa)
            b = ag.reshape(_slice(x, na, x.size), sb)
            return ag.sum(ag.mul(op(a, b), w))
        return f
    return _Check(name, na + int(np.prod(sb)), build, sample)


def _slice(x: Tensor, lo: int, hi: int) -> Tensor:
    idx = np.arange(lo, hi)[:, None]
    return ag.gather(x, idx)


def _second_order(name, scalar_fn, size, sample=None):
    """Check d/dx <grad_x f(x), v> (a Hessian-vector product) through double backprop."""
    def build(gen):
        v = gen.normal(size=size)
        inner = scalar_fn(gen)

        def f(x):
            # value-only evaluations (finite differences) still need an inner graph
            leaf = x if x.requires_grad else Tensor(x.data, requires_grad=True)
            with ag.enable_grad():
                (g,) = ag.grad(inner(leaf), [leaf], create_graph=True)
            return ag.sum(ag.mul(g, v))
        return f
    return _Check(name, size, build, sample)


def _conv_spec():
    return nn.ModelSpec(kind="convnet", widths=(2, 3, 2, 2, 3), input_shape=(9, 9, 2), classes=3,
                        width_scale=Fraction(1))


def _checks() -> list[_Check]:
    c: list[_Check] = [
        _unary("neg", ag.neg),
        _unary("exp", ag.exp),
        _unary("log", ag.log, sample=_positive),
        _unary("sqrt", ag.sqrt, sample=_positive),
        _unary("power", lambda a: ag.power(a, 3.0)),
        _unary("power_frac", lambda a: ag.power(a, -1.5), sample=_positive),
        _unary("relu", ag.relu),
        _unary("transpose", lambda a: ag.transpose(a)),
        _unary("reshape", lambda a: ag.reshape(a, (2, 6))),
        _unary("sum_axis", lambda a: ag.sum(a, axis=1, keepdims=True)),
        _unary("mean_axis", lambda a: ag.mean(a, axis=0)),
        _unary("broadcast_to", lambda a: ag.broadcast_to(ag.reshape(a, (1, 3, 4)), (2, 3, 4))),
        _unary("sum_to", lambda a: ag.sum_to(a, (1, 4))),
        _unary("logsumexp", ag.logsumexp),
        _unary("softmax", ag.softmax),
        _unary("norm", lambda a: ag.norm(a)),
        _binary("add_bcast", ag.add, (3, 4), (4,)),
        _binary("sub_bcast", ag.sub, (3, 1), (3, 4)),
        _binary("mul_bcast", ag.mul, (3, 4), (1, 4)),
        _binary("div", ag.div, (3, 4), (3, 4), sample=_positive),
        _binary("matmul", ag.matmul, (3, 4), (4, 2)),
        _binary("dot", lambda a, b: ag.dot(a, b), (6,), (6,)),
        _binary("cosine_similarity", lambda a, b: ag.cosine_similarity(a, b), (6,), (6,)),
    ]

    labels = np.array([0, 2, 1, 2])

    def ce(reduction):
        def build(gen):
            return lambda x: ag.cross_entropy(ag.reshape(x, (4, 3)), labels, reduction)
        return build
    c.append(_Check("cross_entropy_mean", 12, ce("mean")))
    c.append(_Check("cross_entropy_sum", 12, ce("sum")))

    def im2col_b(gen):
        w = gen.normal(size=(2 * 4 * 4, 9 * 3))
        return lambda x: ag.sum(ag.mul(ag.im2col(ag.reshape(x, (2, 4, 4, 3)), 3, 1), w))
    c.append(_Check("im2col", 96, im2col_b))

    def col2im_b(gen):
        w = gen.normal(size=(1, 4, 4, 2))
        return lambda x: ag.sum(ag.mul(ag.col2im(ag.reshape(x, (16, 18)), (1, 4, 4, 2), 3, 1), w))
    c.append(_Check("col2im", 288, col2im_b, coords=60))

    def gather_b(gen):
        idx = gen.integers(0, 10, size=(7, 3))
        wt = gen.normal(size=(7, 3))
        w = gen.normal(size=7)
        return lambda x: ag.sum(ag.mul(ag.gather(x, idx, wt), w))
    c.append(_Check("gather", 10, gather_b))

    def scatter_b(gen):
        idx = gen.integers(0, 5, size=(6, 2))
        wt = gen.normal(size=(6, 2))
        w = gen.normal(size=5)
        return lambda x: ag.sum(ag.mul(ag.scatter(x, idx, wt, (5,)), w))
    c.append(_Check("scatter", 6, scatter_b))

    def conv_b(gen):
        w = gen.normal(size=(2, 4, 4, 3))
        return lambda x: ag.sum(ag.mul(nn.conv2d(ag.reshape(_slice(x, 0, 64), (2, 4, 4, 2)),
                                                 ag.reshape(_slice(x, 64, 118), (3, 3, 2, 3)),
                                                 ag.reshape(_slice(x, 118, 121), (3,))), w))
    c.append(_Check("conv2d", 121, conv_b))

    def pool_b(gen):
        w = gen.normal(size=(2, 2, 2, 2))
        return lambda x: ag.sum(ag.mul(nn.maxpool(ag.reshape(x, (2, 6, 6, 2)), 3), w))
    c.append(_Check("maxpool", 144, pool_b))

    def aug_b(gen):
        params = [AugmentParams(True, 1.5, -0.25, pad=2), AugmentParams(False, -1, 2, pad=2)]
        w = gen.normal(size=(2, 5, 5, 2))
        return lambda x: ag.sum(ag.mul(augment_differentiable(ag.reshape(x, (2, 5, 5, 2)), params), w))
    c.append(_Check("augment_bilinear", 100, aug_b, sample=lambda g, n: g.uniform(0.05, 0.95, n)))

    spec = _conv_spec()
    n_par = spec.param_count()

    def net_params_b(gen):
        x = gen.uniform(0, 1, size=(2, *spec.input_shape))
        y = np.array([0, 2])
        layout = spec.layout()
        return lambda p: ag.cross_entropy(nn.forward(spec, [ag.reshape(_slice(p, o, o + s), sh) for o, s, sh in
                                                            zip(layout.offsets, layout.sizes, layout.shapes)],
                                                     Tensor(x)), y)
    c.append(_Check("convnet_params", n_par, net_params_b, sample=lambda g, n: g.normal(scale=0.5, size=n),
                    coords=40))

    def net_input_b(gen):
        params = nn.build(spec, int(gen.integers(1 << 30)))
        y = np.array([1])
        return lambda x: ag.cross_entropy(nn.logits(params, ag.reshape(x, (1, *spec.input_shape))), y)
    c.append(_Check("convnet_input", int(np.prod(spec.input_shape)), net_input_b,
                    sample=lambda g, n: g.uniform(0, 1, n), coords=40))

    # second order: gradients of gradients
    for name, op, sample in [("exp", ag.exp, None), ("log", ag.log, _positive), ("sqrt", ag.sqrt, _positive),
                             ("softmax", ag.softmax, None), ("logsumexp", ag.logsumexp, None),
                             ("div", lambda a: ag.div(1.0, a), _positive),
                             ("power", lambda a: ag.power(a, 2.5), _positive)]:
        def inner(gen, op=op):
            w = gen.normal(size=(3, 4))
            return lambda x: ag.sum(ag.mul(op(ag.reshape(x, (3, 4))), w))
        c.append(_second_order(f"hvp_{name}", inner, 12, sample))

    def ce_inner(gen):
        return lambda x: ag.cross_entropy(ag.reshape(x, (4, 3)), labels, "sum")
    c.append(_second_order("hvp_cross_entropy", ce_inner, 12))

    def cos_inner(gen):
        b = gen.normal(size=6)
        return lambda x: ag.cosine_similarity(x, b)
    c.append(_second_order("hvp_cosine", cos_inner, 6))

    # the brewing path: d/d delta of 1 - cos(grad_theta L_adv, grad_theta L(x + delta))
    def match_b(gen, objective="cosine"):
        mspec = _conv_spec()
        params = nn.build(mspec, int(gen.integers(1 << 30)))
        base = gen.uniform(0.1, 0.9, size=(2, *mspec.input_shape))
        target = gen.uniform(0.1, 0.9, size=(1, *mspec.input_shape))
        f = matching_objective([params], base, np.array([1, 1]), target, np.array([1]), objective)
        return lambda d: f(ag.reshape(d, base.shape))
    size = 2 * int(np.prod(_conv_spec().input_shape))
    small = lambda g, n: g.uniform(-0.05, 0.05, n)  # noqa: E731
    c.append(_Check("double_backprop_cosine", size, match_b, sample=small, coords=40))
    c.append(_Check("double_backprop_euclidean", size, lambda g: match_b(g, "euclidean"), sample=small, coords=40))

    def mlp_match_b(gen):
        mspec = nn.ModelSpec.mlp([3, 5, 4])
        params = nn.build(mspec, int(gen.integers(1 << 30)))
        base = gen.normal(size=(3, 3))
        f = matching_objective([params], base, np.array([2, 2, 2]), gen.normal(size=(1, 3)), np.array([2]))
        return lambda d: f(ag.reshape(d, base.shape))
    c.append(_Check("double_backprop_mlp", 9, mlp_match_b))
    return c


def check_names() -> list[str]:
    return [c.name for c in _checks()]


def run_check(check: _Check, points: int, seed: int, step: float = STEP) -> CheckResult:
    worst, kinks = 0.0, 0
    for p in range(points):
        gen = stream(seed, "gradcheck", check.name, p)
        fn = check.build(gen)
        x = (check.sample or _normal)(gen, check.size)
        coords = None
        if check.coords is not None and check.coords < check.size:
            coords = np.sort(gen.choice(check.size, size=check.coords, replace=False))
        rep = ag.finite_diff_check(fn, x, step=step, coords=coords)
        worst = max(worst, rep.max_rel_error)
        kinks += len(rep.kinks)
    return CheckResult(check.name, points, worst, kinks)


def run_suite(points: int = 20, seed: int = 0, names=None) -> list[CheckResult]:
    checks = _checks()
    if names:
        unknown = set(names) - {c.name for c in checks}
        if unknown:
            raise ValueError(f"unknown checks: {sorted(unknown)}")
        checks = [c for c in checks if c.name in names]
    return [run_check(c, points, seed) for c in checks]


def format_report(results) -> str:
    lines = [f"{'check':30s} {'points':>6s} {'max rel err':>12s} {'kinks':>5s}  status"]
    for r in results:
        lines.append(f"{r.name:30s} {r.points:6d} {r.max_rel_error:12.3e} {r.kinks:5d}  "
                     f"{'ok' if r.passed else 'FAIL'}")
    fails = sum(not r.passed for r in results)
    lines.append(f"{len(results)} checks, {fails} failures")
    return "\n".join(lines)
