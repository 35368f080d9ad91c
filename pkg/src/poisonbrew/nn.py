"""Model zoo: the 5-conv + linear ConvNet (optionally width-scaled) and a small MLP."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Layout, Tensor
from .rng import stream

CONVNET_WIDTHS = (64, 128, 128, 256, 256)


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description.

    For ``kind="mlp"`` ``widths`` are the hidden widths and inputs of any
    ``input_shape`` are flattened; for ``kind="convnet"`` they are the five conv widths
    before width scaling and ``input_shape`` is ``(H, W, C)``.
    """

    kind: str = "convnet"
    widths: tuple[int, ...] = CONVNET_WIDTHS
    kernel: int = 3
    pool: int = 3
    input_shape: tuple[int, ...] = (32, 32, 3)
    classes: int = 10
    width_scale: Fraction = Fraction(1)
    # fixed input standardisation (x - mean) / std applied before the first layer
    input_mean: float = 0.5
    input_std: float = 0.25
    # weight init bound sqrt(init_gain / fan_in); 6 is He-uniform, 1 the classic fan-in rule
    init_gain: float = 6.0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "width_scale", Fraction(self.width_scale))
        self.validate()

    @classmethod
    def mlp(cls, sizes: Sequence[int]) -> "ModelSpec":
        """``sizes`` = [inputs, hidden..., classes], e.g. ``[2, 4, 2]``."""
        sizes = list(sizes)
        return cls(kind="mlp", widths=tuple(sizes[1:-1]), input_shape=(sizes[0],),
                   classes=sizes[-1], width_scale=Fraction(1), input_mean=0.0, input_std=1.0)

    @classmethod
    def convnet(cls, width_scale=Fraction(1), input_shape=(32, 32, 3), classes: int = 10) -> "ModelSpec":
        return cls(kind="convnet", widths=CONVNET_WIDTHS, input_shape=tuple(input_shape),
                   classes=classes, width_scale=Fraction(width_scale))

    @property
    def layer_widths(self) -> tuple[int, ...]:
        if self.kind == "mlp":
            return self.widths
        return tuple(max(1, math.ceil(w * self.width_scale)) for w in self.widths)

    def spatial_sizes(self) -> list[tuple[int, int]]:
        """Spatial size after each conv layer (post pooling where applied)."""
        h, w = self.input_shape[:2]
        out = []
        n = len(self.widths)
        for i in range(n):
            if i >= n - 2:
                h, w = h // self.pool, w // self.pool
            out.append((h, w))
        return out

    @property
    def input_size(self) -> int:
        return math.prod(self.input_shape)

    @property
    def feature_width(self) -> int:
        if self.kind == "mlp":
            return self.widths[-1] if self.widths else self.input_size
        h, w = self.spatial_sizes()[-1]
        return self.layer_widths[-1] * h * w

    def validate(self) -> None:
        if self.kind not in ("mlp", "convnet"):
            raise ValueError(f"unknown architecture kind {self.kind!r}")
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if self.input_std <= 0:
            raise ValueError("input_std must be positive")
        if self.init_gain <= 0:
            raise ValueError("init_gain must be positive")
        if self.width_scale <= 0:
            raise ValueError("width_scale must be positive")
        if any(w < 1 for w in self.widths):
            raise ValueError("layer widths must be positive")
        if self.kind == "mlp":
            if not self.input_shape or self.input_size < 1:
                raise ValueError("mlp input_shape must be non-empty and positive")
            return
        if len(self.input_shape) != 3:
            raise ValueError("convnet input_shape must be (H, W, C)")
        if self.kernel % 2 != 1:
            raise ValueError("kernel must be odd (same padding)")
        if len(self.widths) < 2:
            raise ValueError("convnet needs at least two conv layers")
        h, w = self.spatial_sizes()[-1]
        if h < 1 or w < 1:
            raise ValueError(f"pooled spatial size reaches zero for input {self.input_shape}")

    def layout(self) -> Layout:
        names, shapes = [], []
        if self.kind == "mlp":
            sizes = [self.input_size, *self.widths, self.classes]
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
                names += [f"fc{i}.weight", f"fc{i}.bias"]
                shapes += [(a, b), (b,)]
            return Layout(tuple(names), tuple(shapes))
        cin = self.input_shape[2]
        for i, cout in enumerate(self.layer_widths):
            names += [f"conv{i}.weight", f"conv{i}.bias"]
            shapes += [(self.kernel, self.kernel, cin, cout), (cout,)]
            cin = cout
        names += ["fc.weight", "fc.bias"]
        shapes += [(self.feature_width, self.classes), (self.classes,)]
        return Layout(tuple(names), tuple(shapes))

    def param_count(self) -> int:
        return self.layout().total

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["input_shape"] = list(self.input_shape)
        d["width_scale"] = str(self.width_scale)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        d["input_shape"] = tuple(d["input_shape"])
        d["width_scale"] = Fraction(d["width_scale"])
        return cls(**d)


@dataclass(frozen=True)
class ModelParams:
    spec: ModelSpec
    flat: np.ndarray
    seed: int = 0
    layout: Layout = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        layout = self.spec.layout()
        flat = np.array(self.flat, dtype=np.float64)
        if flat.shape != (layout.total,):
            raise ValueError(f"parameter vector has {flat.size} entries, spec needs {layout.total}")
        flat.setflags(write=False)
        object.__setattr__(self, "flat", flat)
        object.__setattr__(self, "layout", layout)

    def parts(self) -> list[np.ndarray]:
        return self.layout.split(self.flat)

    def leaves(self, requires_grad: bool = True) -> list[Tensor]:
        return [Tensor(p, requires_grad=requires_grad) for p in self.parts()]

    def replace(self, flat: np.ndarray) -> "ModelParams":
        return ModelParams(self.spec, flat, self.seed)


def build(spec: ModelSpec, seed: int) -> ModelParams:
    """Fan-in scaled uniform init: weights U(+-sqrt(gain/fan_in)), biases U(+-sqrt(1/fan_in))."""
    layout = spec.layout()
    gen = stream(seed, "init")
    parts = []
    for name, shape in zip(layout.names, layout.shapes):
        wshape = layout.shapes[layout.names.index(name.replace(".bias", ".weight"))]
        fan_in = int(np.prod(wshape[:-1]))
        gain = spec.init_gain if name.endswith(".weight") else 1.0
        bound = math.sqrt(gain / fan_in)
        parts.append(gen.uniform(-bound, bound, size=shape))
    return ModelParams(spec, layout.flatten(parts), seed)


# ------------------------------------------------------------------ forward

def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Stride-1 'same' convolution, NHWC input, weights (k, k, Cin, Cout)."""
    k, _, cin, cout = w.shape
    n, h, wd, c = x.shape
    if c != cin:
        raise ValueError(f"conv input has {c} channels, weights expect {cin}")
    cols = ag.im2col(x, k, k // 2)
    out = ag.add(ag.matmul(cols, ag.reshape(w, (k * k * cin, cout))), b)
    return ag.reshape(out, (n, h, wd, cout))


def maxpool(x: Tensor, size: int) -> Tensor:
    """Non-overlapping max pooling (stride = size, floor mode); ties go to the lowest index."""
    n, h, w, c = x.shape
    ho, wo = h // size, w // size
    win = x.data[:, :ho * size, :wo * size, :].reshape(n, ho, size, wo, size, c)
    win = win.transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, size * size)
    arg = np.argmax(win, axis=-1)
    di, dj = np.divmod(arg, size)
    nn_, hh, ww, cc = np.indices((n, ho, wo, c), sparse=True)
    flat = ((nn_ * h + hh * size + di) * w + ww * size + dj) * c + cc
    return ag.gather(x, flat[..., None])


def _check_batch(spec: ModelSpec, x: Tensor) -> None:
    if tuple(x.shape[1:]) != spec.input_shape:
        raise ValueError(f"batch shape {x.shape} does not match model input {spec.input_shape}")


def features(spec: ModelSpec, weights: Sequence[Tensor], x: Tensor) -> Tensor:
    """Penultimate representation (input to the final linear layer), flattened."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    _check_batch(spec, x)
    n = x.shape[0]
    if spec.input_mean != 0.0 or spec.input_std != 1.0:
        x = ag.mul(ag.sub(x, spec.input_mean), 1.0 / spec.input_std)
    if spec.kind == "mlp":
        h = ag.reshape(x, (n, spec.input_size)) if x.ndim != 2 else x
        for i in range(len(spec.widths)):
            h = ag.relu(ag.add(ag.matmul(h, weights[2 * i]), weights[2 * i + 1]))
        return h
    h = x
    nconv = len(spec.widths)
    for i in range(nconv):
        h = ag.relu(conv2d(h, weights[2 * i], weights[2 * i + 1]))
        if i >= nconv - 2:
            h = maxpool(h, spec.pool)
    return ag.reshape(h, (n, spec.feature_width))


def forward(spec: ModelSpec, weights: Sequence[Tensor], x: Tensor) -> Tensor:
    feats = features(spec, weights, x)
    return ag.add(ag.matmul(feats, weights[-2]), weights[-1])


def _weights(params) -> list[Tensor]:
    if isinstance(params, ModelParams):
        return params.leaves(requires_grad=False)
    return list(params)


def logits(params: ModelParams, batch) -> Tensor:
    return forward(params.spec, _weights(params), batch)


def penultimate_features(params: ModelParams, batch) -> Tensor:
    return features(params.spec, _weights(params), batch)


def predict(params: ModelParams, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Argmax class per example, evaluated without recording a graph."""
    out = []
    ws = params.leaves(requires_grad=False)
    with ag.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(np.argmax(forward(params.spec, ws, Tensor(images[i:i + batch_size])).data, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def feature_matrix(params: ModelParams, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    ws = params.leaves(requires_grad=False)
    out = []
    with ag.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(features(params.spec, ws, Tensor(images[i:i + batch_size])).data)
    return np.concatenate(out) if out else np.zeros((0, params.spec.feature_width))


# --------------------------------------------------------------- checkpoints

_MAGIC = b"PBCKPT1\n"


def save_checkpoint(path, params: ModelParams) -> None:
    header = {"spec": params.spec.to_dict(), "seed": int(params.seed), "count": int(params.flat.size)}
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(params.flat.astype("<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    end = raw.index(b"\n", len(_MAGIC))
    header = json.loads(raw[len(_MAGIC):end])
    body = raw[end + 1:]
    if len(body) != 8 * header["count"]:
        raise ValueError(f"{path}: expected {header['count']} parameters, found {len(body) / 8:g}")
    flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return ModelParams(ModelSpec.from_dict(header["spec"]), flat, header["seed"])
