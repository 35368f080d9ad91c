"""Reverse-mode automatic differentiation on float64 numpy arrays.

Every primitive records a backward rule written in terms of other primitives,
so running :func:`grad` with ``create_graph=True`` records the backward pass
itself and the resulting gradients can be differentiated again (double
backprop). This is the mechanism the gradient-matching objective needs: the
poison loss is a function of parameter gradients, differentiated w.r.t. the
input perturbation.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Graph", "Layout", "GradientVector", "FDReport",
    "NonFiniteError", "GraphConsumedError",
    "no_grad", "enable_grad", "is_grad_enabled",
    "grad", "backward", "grad_wrt_inputs", "finite_diff_check",
    "add", "sub", "mul", "div", "neg", "power", "exp", "log", "sqrt",
    "matmul", "transpose", "reshape", "sum", "mean", "broadcast_to", "sum_to",
    "relu", "im2col", "col2im", "gather", "scatter", "softmax",
    "logsumexp", "cross_entropy", "dot", "norm", "cosine_similarity",
]


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class GraphConsumedError(RuntimeError):
    """Raised when backward is run twice through a released graph."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def _grad_mode(enabled: bool):
    prev = is_grad_enabled()
    _state.enabled = enabled
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    return _grad_mode(False)


def enable_grad():
    return _grad_mode(True)


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite value produced by node '{op}' (shape {data.shape})")


class Tensor:
    """Dense float64 array with an optional autograd history."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "_op",
                 "_replay", "_consumed", "_higher")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "leaf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op = "leaf"
        self._replay = None
        self._consumed = False
        # True when the value depends on a gradient recorded in create_graph mode
        self._higher = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str, replay) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    out._op = op
    out._replay = None
    out._consumed = False
    out._higher = False
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out._replay = replay
        out._higher = any(p._higher for p in parents)
    return out


def _apply(op: str, fwd: Callable, parents: tuple[Tensor, ...], backward) -> Tensor:
    return _node(fwd(*(p.data for p in parents)), parents, backward, op, fwd)


# ---------------------------------------------------------------- elementwise

def _unbroadcast_axes(shape: tuple[int, ...], target: tuple[int, ...]):
    lead = len(shape) - len(target)
    axes = list(range(lead))
    for i, t in enumerate(target):
        if t == 1 and shape[lead + i] != 1:
            axes.append(lead + i)
    return tuple(axes)


def sum_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum ``x`` down to ``shape`` (the adjoint of broadcasting)."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    axes = _unbroadcast_axes(x.shape, shape)
    src = x.shape

    def fwd(a):
        return np.sum(a, axis=axes, keepdims=True).reshape(shape) if axes else a.reshape(shape)

    def bwd(g, needs):
        return (broadcast_to(g, src),)

    return _apply("sum_to", fwd, (x,), bwd)


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    src = x.shape

    def fwd(a):
        return np.broadcast_to(a, shape)

    def bwd(g, needs):
        return (sum_to(g, src),)

    return _apply("broadcast_to", fwd, (x,), bwd)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g, needs):
        return (sum_to(g, a.shape) if needs[0] else None,
                sum_to(g, b.shape) if needs[1] else None)

    return _apply("add", np.add, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g, needs):
        return (sum_to(g, a.shape) if needs[0] else None,
                sum_to(neg(g), b.shape) if needs[1] else None)

    return _apply("sub", np.subtract, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g, needs):
        return (sum_to(mul(g, b), a.shape) if needs[0] else None,
                sum_to(mul(g, a), b.shape) if needs[1] else None)

    return _apply("mul", np.multiply, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g, needs):
        ga = sum_to(div(g, b), a.shape) if needs[0] else None
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape) if needs[1] else None
        return ga, gb

    return _apply("div", np.divide, (a, b), bwd)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _apply("neg", np.negative, (a,), lambda g, needs: (neg(g),))


def power(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    c = float(exponent)

    def fwd(x):
        return np.power(x, c)

    def bwd(g, needs):
        if c == 1.0:
            return (g,)
        return (mul(g, mul(c, power(a, c - 1.0))),)

    return _apply(f"pow[{c:g}]", fwd, (a,), bwd)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out: list[Tensor] = []

    def bwd(g, needs):
        return (mul(g, out[0]),)

    res = _apply("exp", np.exp, (a,), bwd)
    out.append(res)
    return res


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _apply("log", np.log, (a,), lambda g, needs: (div(g, a),))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out: list[Tensor] = []

    def bwd(g, needs):
        return (div(g, mul(2.0, out[0])),)

    res = _apply("sqrt", np.sqrt, (a,), bwd)
    out.append(res)
    return res


def relu(a) -> Tensor:
    """max(a, 0) with derivative 0 at exactly 0."""
    a = _as_tensor(a)
    mask = Tensor((a.data > 0).astype(np.float64))

    def fwd(x):
        return x * (x > 0)

    return _apply("relu", fwd, (a,), lambda g, needs: (mul(g, mask),))


# ------------------------------------------------------------------- linear

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bwd(g, needs):
        return (matmul(g, transpose(b)) if needs[0] else None,
                matmul(transpose(a), g) if needs[1] else None)

    return _apply("matmul", np.matmul, (a, b), bwd)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))

    def fwd(x):
        return np.transpose(x, axes)

    return _apply("transpose", fwd, (a,), lambda g, needs: (transpose(g, inv),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    src = a.shape
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size and -1 not in shape:
        raise ValueError(f"cannot reshape {src} into {shape}")

    def fwd(x):
        return x.reshape(shape)

    return _apply("reshape", fwd, (a,), lambda g, needs: (reshape(g, src),))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    src = a.shape

    def fwd(x):
        return np.asarray(np.sum(x, axis=axis, keepdims=keepdims))

    def bwd(g, needs):
        if axis is None:
            kshape = (1,) * len(src)
        else:
            ax = (axis,) if isinstance(axis, int) else tuple(axis)
            ax = tuple(i % len(src) for i in ax)
            kshape = tuple(1 if i in ax else s for i, s in enumerate(src))
        return (broadcast_to(reshape(g, kshape), src),)

    return _apply("sum", fwd, (a,), bwd)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.size
    else:
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in ax]))
    return mul(sum(a, axis, keepdims), 1.0 / n)


def dot(a, b) -> Tensor:
    return sum(mul(a, b))


def norm(a) -> Tensor:
    return sqrt(dot(a, a))


def cosine_similarity(a, b) -> Tensor:
    return div(dot(a, b), mul(norm(a), norm(b)))


# -------------------------------------------------------- convolution pieces

def _im2col_np(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    cols = np.empty((n, ho, wo, k, k, c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i:i + ho, j:j + wo, :]
    return cols.reshape(n * ho * wo, k * k * c)


def _col2im_np(cols: np.ndarray, shape: tuple[int, ...], k: int, pad: int) -> np.ndarray:
    n, h, w, c = shape
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    cols = cols.reshape(n, ho, wo, k, k, c)
    xp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, i:i + ho, j:j + wo, :] += cols[:, :, :, i, j, :]
    return xp[:, pad:pad + h, pad:pad + w, :] if pad else xp


def im2col(x, k: int, pad: int) -> Tensor:
    """NHWC patches, stride 1, zero padding: (N*Ho*Wo, k*k*C)."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"im2col expects NHWC input, got shape {x.shape}")
    shape = x.shape

    def fwd(a):
        return _im2col_np(a, k, pad)

    return _apply("im2col", fwd, (x,), lambda g, needs: (col2im(g, shape, k, pad),))


def col2im(cols, shape: tuple[int, ...], k: int, pad: int) -> Tensor:
    """Adjoint of :func:`im2col`."""
    cols = _as_tensor(cols)
    shape = tuple(shape)

    def fwd(a):
        return _col2im_np(a, shape, k, pad)

    return _apply("col2im", fwd, (cols,), lambda g, needs: (im2col(g, k, pad),))


def gather(x, index: np.ndarray, weight: np.ndarray | None = None) -> Tensor:
    """Sparse linear map: ``out[m] = sum_j weight[m, j] * x.flat[index[m, j]]``.

    ``index`` has shape ``out_shape + (J,)``. Used for max pooling (J=1) and
    bilinear resampling (J=4). Entries with weight 0 may point anywhere valid.
    """
    x = _as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if weight is None:
        weight = np.ones(index.shape, dtype=np.float64)
    src = x.shape

    def fwd(a):
        flat = a.reshape(-1)
        if index.shape[-1] == 1:
            return flat[index[..., 0]] * weight[..., 0]
        return np.einsum("...j,...j->...", flat[index], weight)

    return _apply("gather", fwd, (x,), lambda g, needs: (scatter(g, index, weight, src),))


def scatter(g, index: np.ndarray, weight: np.ndarray, shape: tuple[int, ...]) -> Tensor:
    """Adjoint of :func:`gather`, summing contributions in a fixed order."""
    g = _as_tensor(g)
    size = int(np.prod(shape))

    def fwd(a):
        vals = (weight * a[..., None]).reshape(-1)
        return np.bincount(index.reshape(-1), weights=vals, minlength=size).reshape(shape)

    return _apply("scatter", fwd, (g,), lambda gg, needs: (gather(gg, index, weight),))


# ------------------------------------------------------------------- losses

def logsumexp(x, axis: int = -1) -> Tensor:
    """Row log-sum-exp with a constant max shift (exact gradient, stable)."""
    x = _as_tensor(x)
    shift = Tensor(np.max(x.data, axis=axis, keepdims=True))
    return add(log(sum(exp(sub(x, shift)), axis=axis, keepdims=True)), shift)


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shift = Tensor(np.max(x.data, axis=axis, keepdims=True))
    e = exp(sub(x, shift))
    return div(e, sum(e, axis=axis, keepdims=True))


def cross_entropy(logits, labels: np.ndarray, reduction: str = "mean") -> Tensor:
    """Fused softmax cross-entropy; ``reduction`` is 'mean' or 'sum'."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"cross_entropy shape mismatch: logits {logits.shape}, labels {labels.shape}")
    n, c = logits.shape
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError("label out of range")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    scale = 1.0 / n if reduction == "mean" else 1.0

    def fwd(z):
        m = np.max(z, axis=1, keepdims=True)
        lse = np.log(np.sum(np.exp(z - m), axis=1)) + m[:, 0]
        return np.asarray(np.sum(lse - z[np.arange(n), labels]) * scale)

    def bwd(g, needs):
        return (mul(mul(g, scale), sub(softmax(logits, axis=1), Tensor(onehot))),)

    return _apply("cross_entropy", fwd, (logits,), bwd)


# ---------------------------------------------------------- differentiation

def _topo(output: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output: Tensor, inputs: Sequence[Tensor], create_graph: bool = False,
         retain_graph: bool | None = None, grad_output: Tensor | None = None) -> list[Tensor]:
    """Gradients of scalar ``output`` w.r.t. ``inputs``.

    Unreachable inputs get a zero gradient. With ``create_graph`` the
    backward pass is recorded, so the returned tensors are differentiable.
    """
    if grad_output is None and output.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    retain = create_graph if retain_graph is None else retain_graph
    order = _topo(output)
    wanted = {id(t) for t in inputs}
    # prune: only propagate into nodes with a path to a requested input
    reach: dict[int, bool] = {}
    for node in order:
        reach[id(node)] = id(node) in wanted or any(reach.get(id(p), False) for p in node._parents)

    grads: dict[int, Tensor] = {}
    if output.requires_grad:
        grads[id(output)] = Tensor(np.ones_like(output.data)) if grad_output is None else grad_output
    with _grad_mode(create_graph):
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            if node._consumed:
                raise GraphConsumedError(f"graph through node '{node._op}' was already released; "
                                         "pass retain_graph=True to backward twice")
            needs = tuple(p.requires_grad and reach[id(p)] for p in node._parents)
            if not any(needs):
                continue
            pgrads = node._backward(g, needs)
            if id(node) not in wanted:
                del grads[id(node)]
            for p, pg, need in zip(node._parents, pgrads, needs):
                if not need or pg is None:
                    continue
                if create_graph:
                    pg._higher = True
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)
            if not retain:
                node._consumed = True
    out = []
    for t in inputs:
        g = grads.get(id(t))
        out.append(Tensor(np.zeros_like(t.data)) if g is None else g)
    return out


@dataclass(frozen=True)
class Layout:
    """Maps named parameter tensors onto contiguous slices of a flat vector."""

    names: tuple[str, ...]
    shapes: tuple[tuple[int, ...], ...]

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(int(np.prod(s, dtype=np.int64)) for s in self.shapes)

    @property
    def offsets(self) -> tuple[int, ...]:
        return tuple(int(o) for o in np.concatenate([[0], np.cumsum(self.sizes)[:-1]])) if self.shapes else ()

    @property
    def total(self) -> int:
        return int(np.sum(self.sizes))

    def slices(self) -> list[slice]:
        return [slice(o, o + s) for o, s in zip(self.offsets, self.sizes)]

    def split(self, flat: np.ndarray) -> list[np.ndarray]:
        if flat.shape != (self.total,):
            raise ValueError(f"flat vector has shape {flat.shape}, layout expects ({self.total},)")
        return [flat[s].reshape(shape) for s, shape in zip(self.slices(), self.shapes)]

    def flatten(self, parts: Iterable[np.ndarray]) -> np.ndarray:
        parts = list(parts)
        if len(parts) != len(self.shapes):
            raise ValueError("part count does not match layout")
        for p, shape in zip(parts, self.shapes):
            if p.shape != shape:
                raise ValueError(f"part shape {p.shape} does not match layout {shape}")
        return np.concatenate([p.reshape(-1) for p in parts]) if parts else np.zeros(0)


@dataclass
class GradientVector:
    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        if self.values.shape != (self.layout.total,):
            raise ValueError("gradient length does not match layout")

    def parts(self) -> list[np.ndarray]:
        return self.layout.split(self.values)


def backward(output: Tensor, params: Sequence[Tensor], layout: Layout,
             retain_graph: bool = False) -> GradientVector:
    """Flat gradient of a scalar w.r.t. parameter leaves laid out by ``layout``."""
    grads = grad(output, params, create_graph=False, retain_graph=retain_graph)
    return GradientVector(layout.flatten(g.data for g in grads), layout)


def grad_wrt_inputs(scalar: Tensor, inputs: Sequence[Tensor] | Tensor):
    """Differentiate a scalar built from create_graph gradients w.r.t. inputs."""
    if not scalar._higher:
        raise ValueError("scalar was not built from gradients recorded with create_graph=True")
    single = isinstance(inputs, Tensor)
    res = grad(scalar, [inputs] if single else list(inputs))
    return res[0] if single else res


class Graph:
    """Topologically ordered record of the computation producing ``output``."""

    def __init__(self, output: Tensor):
        self.nodes = _topo(output)
        self.output = output

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n._replay is None]

    def ops(self) -> list[str]:
        return [n._op for n in self.nodes]

    def replay(self, leaf_values: dict[int, np.ndarray] | None = None) -> np.ndarray:
        """Recompute the forward pass from leaf values (by ``id``); bit-exact on the originals."""
        leaf_values = leaf_values or {}
        vals: dict[int, np.ndarray] = {}
        for n in self.nodes:
            if n._replay is None:
                vals[id(n)] = leaf_values.get(id(n), n.data)
            else:
                vals[id(n)] = n._replay(*(vals[id(p)] for p in n._parents))
        return vals[id(self.output)]


# ------------------------------------------------------------ gradient check

@dataclass
class FDReport:
    max_rel_error: float
    rel_errors: np.ndarray
    coords: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    kinks: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def passed(self, tol: float = 1e-4) -> bool:
        return bool(self.max_rel_error < tol)


def finite_diff_check(fn: Callable[[Tensor], Tensor], point: np.ndarray, step: float = 1e-5,
                      coords: np.ndarray | None = None, analytic: np.ndarray | None = None,
                      kink_tol: float = 1e-2) -> FDReport:
    """Compare autograd (or a supplied gradient) with central differences.

    Coordinates whose one-sided slopes disagree by more than ``kink_tol``
    (relative) sit on a kink; they are reported and excluded from the error.
    """
    point = np.array(point, dtype=np.float64)
    if analytic is None:
        x = Tensor(point, requires_grad=True)
        analytic = grad(fn(x), [x])[0].data
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    flat = point.reshape(-1)
    coords = np.arange(flat.size) if coords is None else np.asarray(coords, dtype=np.int64)

    def f(v: np.ndarray) -> float:
        with no_grad():
            return float(fn(Tensor(v.reshape(point.shape))).data)

    f0 = f(flat)
    floor = 1e-6 * max(1.0, abs(f0))
    numeric = np.empty(coords.size)
    errors = np.empty(coords.size)
    kinks = []
    for i, c in enumerate(coords):
        up, dn = flat.copy(), flat.copy()
        up[c] += step
        dn[c] -= step
        fu, fd = f(up), f(dn)
        numeric[i] = (fu - fd) / (2 * step)
        fwd, bwd = (fu - f0) / step, (f0 - fd) / step
        if abs(fwd - bwd) > kink_tol * max(abs(fwd), abs(bwd), floor / step):
            kinks.append(int(c))
            errors[i] = 0.0
            continue
        a = analytic[c]
        errors[i] = abs(a - numeric[i]) / max(abs(a), abs(numeric[i]), floor)
    return FDReport(float(errors.max(initial=0.0)), errors, coords, analytic[coords], numeric,
                    np.asarray(kinks, dtype=np.int64))
