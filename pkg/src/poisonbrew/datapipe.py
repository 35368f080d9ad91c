"""Datasets, poison-target case sampling and image augmentation."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .rng import derive_seed, stream

CIFAR_RECORD = 3073
CIFAR_SHAPE = (32, 32, 3)


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (N, H, W, C), values in [0, 1]
    labels: np.ndarray  # (N,) int64
    ids: np.ndarray     # (N,) canonical ordering ids, unique
    classes: int
    split: str = "train"

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        ids = np.asarray(self.ids, dtype=np.int64)
        if images.ndim != 4 or len(images) != len(labels) or len(labels) != len(ids):
            raise ValueError("images, labels and ids must align (images NHWC)")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise ValueError("pixel values outside [0, 1]")
        if labels.size and (labels.min() < 0 or labels.max() >= self.classes):
            raise ValueError("label outside [0, classes)")
        if len(np.unique(ids)) != len(ids):
            raise ValueError("ordering ids are not unique")
        if self.split not in ("train", "validation"):
            raise ValueError(f"unknown split {self.split!r}")
        for arr in (images, labels, ids):
            arr.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def positions(self, ids: Sequence[int]) -> np.ndarray:
        """Row positions of the given ordering ids."""
        lookup = {int(i): k for k, i in enumerate(self.ids)}
        try:
            return np.array([lookup[int(i)] for i in ids], dtype=np.int64)
        except KeyError as err:
            raise KeyError(f"id {err.args[0]} not in {self.split} split") from None

    def subset(self, rows: np.ndarray) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(self.images[rows], self.labels[rows], self.ids[rows], self.classes, self.split)

    def cap_per_class(self, cap: int) -> "Dataset":
        """Keep the first ``cap`` examples of each class in canonical order."""
        keep = np.concatenate([np.flatnonzero(self.labels == c)[:cap] for c in range(self.classes)])
        return self.subset(np.sort(keep))

    def with_images(self, images: np.ndarray) -> "Dataset":
        return Dataset(images, self.labels, self.ids, self.classes, self.split)


def apply_poison(dataset: Dataset, poison_ids: Sequence[int], delta: np.ndarray) -> Dataset:
    """Return a copy of ``dataset`` with ``delta`` added to the poison rows."""
    rows = dataset.positions(poison_ids)
    images = dataset.images.copy()
    images[rows] = np.clip(images[rows] + delta, 0.0, 1.0)
    return dataset.with_images(images)


# ----------------------------------------------------------------- CIFAR-10

def load_cifar_binary(path, split: str = "train", id_offset: int = 0) -> Dataset:
    """Read a CIFAR-10 binary batch (label byte + 3072 channel-planar pixel bytes per record)."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        raise ValueError(f"{path}: length {raw.size} is not a multiple of {CIFAR_RECORD} (truncated file?)")
    rec = raw.reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() >= 10:
        raise ValueError(f"{path}: label byte {labels.max()} >= 10")
    pixels = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    ids = np.arange(len(labels), dtype=np.int64) + id_offset
    return Dataset(pixels / 255.0, labels, ids, 10, split)


def quantize(images: np.ndarray) -> np.ndarray:
    """Round-to-nearest 8-bit quantization of [0, 1] images."""
    return np.clip(np.rint(np.asarray(images) * 255.0), 0, 255).astype(np.uint8)


def write_cifar_binary(path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images)
    if images.shape[1:] != CIFAR_SHAPE:
        raise ValueError(f"CIFAR records hold 32x32x3 images, got {images.shape[1:]}")
    q = images if images.dtype == np.uint8 else quantize(images)
    planar = q.transpose(0, 3, 1, 2).reshape(len(q), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], planar], axis=1)
    rec.tofile(path)


def load_cifar_dir(root, per_class: int | None = None, val_per_class: int | None = None):
    """Train/validation datasets from the standard ``cifar-10-batches-bin`` directory."""
    root = Path(root)
    parts = [load_cifar_binary(root / f"data_batch_{i}.bin") for i in range(1, 6)]
    images = np.concatenate([p.images for p in parts])
    labels = np.concatenate([p.labels for p in parts])
    train = Dataset(images, labels, np.arange(len(labels)), 10, "train")
    val = load_cifar_binary(root / "test_batch.bin", split="validation")
    if per_class:
        train = train.cap_per_class(per_class)
    if val_per_class:
        val = val.cap_per_class(val_per_class)
    return train, val


# ---------------------------------------------------------------- synthetic

def _prototypes(classes: int, size: int, channels: int, seed: int, blobs: int) -> np.ndarray:
    gen = stream(seed, "synth", "prototypes")
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    protos = np.zeros((classes, size, size, channels))
    for c in range(classes):
        for _ in range(blobs):
            cy, cx = gen.uniform(0.15, 0.85, size=2)
            width = gen.uniform(0.12, 0.3)
            colour = gen.normal(size=channels)
            bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
            protos[c] += bump[..., None] * colour
        protos[c] /= np.abs(protos[c]).max()
    return protos


def smooth_field(white: np.ndarray, cutoff: float) -> np.ndarray:
    """Low-pass NHWC white noise with a Gaussian spectral filter, rescaled to unit std per image."""
    h, w = white.shape[1:3]
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    gain = np.exp(-(fy ** 2 + fx ** 2) / (2 * cutoff ** 2))
    spec = np.fft.rfft2(white, axes=(1, 2)) * gain[None, :, :, None]
    out = np.fft.irfft2(spec, s=(h, w), axes=(1, 2))
    out = out - out.mean(axis=(1, 2, 3), keepdims=True)
    return out / np.maximum(out.std(axis=(1, 2, 3), keepdims=True), 1e-12)


def synth_dataset(classes: int, per_class: int, image_size: int, seed: int, snr: float = 1.0,
                  split: str = "train", channels: int = 3, blobs: int = 3, modes: int = 1,
                  mode_weight: float = 0.0, texture: float = 0.0, texture_cutoff: float = 0.15) -> Dataset:
    """Class-conditional Gaussian-blob images, quantized to the 8-bit grid.

    Each class owns a fixed smooth colour pattern (shared between splits);
    an example is ``0.5 + 0.25 * snr * pattern + noise`` with unit-scale
    per-pixel noise of std 0.1 plus a random global brightness shift.
    With ``modes > 1`` every example also carries one of ``modes`` class-specific
    sub-patterns scaled by ``mode_weight``, so each class is a small mixture.
    ``texture`` adds a per-example smooth random field of that standard
    deviation (Gaussian low-pass at ``texture_cutoff`` cycles per pixel), giving
    every image large-scale features of its own.
    """
    if modes < 1 or mode_weight < 0:
        raise ValueError("modes >= 1 and mode_weight >= 0 required")
    protos = _prototypes(classes, image_size, channels, seed, blobs)
    gen = stream(seed, "synth", split)
    labels = np.repeat(np.arange(classes), per_class)
    order = gen.permutation(len(labels))
    labels = labels[order]
    noise = gen.normal(scale=0.1, size=(len(labels), image_size, image_size, channels))
    shift = gen.normal(scale=0.05, size=(len(labels), 1, 1, 1))
    pattern = protos[labels]
    if modes > 1 and mode_weight > 0:
        sub = _prototypes(classes * modes, image_size, channels, derive_seed(seed, "modes"), blobs)
        k = stream(seed, "synth", split, "modes").integers(modes, size=len(labels))
        pattern = pattern + mode_weight * sub[labels * modes + k]
    images = 0.5 + 0.25 * snr * pattern + noise + shift
    if texture > 0:
        field = stream(seed, "synth", split, "texture").normal(size=noise.shape)
        images = images + texture * smooth_field(field, texture_cutoff)
    images = quantize(np.clip(images, 0.0, 1.0)) / 255.0
    return Dataset(images, labels, np.arange(len(labels)), classes, split)


# ------------------------------------------------------------- poison cases

@dataclass(frozen=True)
class PoisonCase:
    target_ids: tuple[int, ...]      # validation-split ids
    target_class: int                # original label y_t
    adv_class: int                   # y_adv
    poison_ids: tuple[int, ...]      # training-split ids, all labelled y_adv
    seed: int

    @property
    def targets(self) -> int:
        return len(self.target_ids)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "target_class": self.target_class, "adv_class": self.adv_class,
                "target_ids": list(self.target_ids), "poison_ids": list(self.poison_ids)}

    @classmethod
    def from_dict(cls, d: dict) -> "PoisonCase":
        return cls(tuple(int(i) for i in d["target_ids"]), int(d["target_class"]), int(d["adv_class"]),
                   tuple(int(i) for i in d["poison_ids"]), int(d["seed"]))


def poison_count(budget: float, n: int) -> int:
    return int(math.floor(budget * n + 1e-9))


def sample_case(train: Dataset, validation: Dataset, budget: float, targets: int, seed: int) -> PoisonCase:
    """Random target class, random poison class, random target(s), random poison images."""
    if validation.split != "validation" or train.split != "train":
        raise ValueError("targets come from the validation split, poisons from the training split")
    p = poison_count(budget, len(train))
    if p < 1:
        raise ValueError(f"budget {budget} of N={len(train)} yields no poisons")
    gen = stream(seed, "case")
    target_class = int(gen.integers(train.classes))
    adv_class = int((target_class + 1 + gen.integers(train.classes - 1)) % train.classes)
    pool_t = np.flatnonzero(validation.labels == target_class)
    pool_p = np.flatnonzero(train.labels == adv_class)
    if len(pool_t) < targets:
        raise ValueError(f"class {target_class} has only {len(pool_t)} validation images for {targets} targets")
    if len(pool_p) < p:
        raise ValueError(f"class {adv_class} has only {len(pool_p)} training images, budget needs {p}")
    t_rows = np.sort(gen.choice(pool_t, size=targets, replace=False))
    p_rows = np.sort(gen.choice(pool_p, size=p, replace=False))
    return PoisonCase(tuple(int(i) for i in validation.ids[t_rows]), target_class, adv_class,
                      tuple(int(i) for i in train.ids[p_rows]), int(seed))


def write_manifest(path, case: PoisonCase, extra: dict | None = None) -> None:
    doc = case.to_dict()
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> PoisonCase:
    return PoisonCase.from_dict(json.loads(Path(path).read_text()))


# ------------------------------------------------------------- augmentation

@dataclass(frozen=True)
class AugmentParams:
    """Horizontal flip, then translation by (dx, dy) with zero fill.

    Equivalent to cropping the zero-padded image at ``crop_origin``:
    ``out[i, j] = flipped[i + dy, j + dx]``.
    """

    flip: bool = False
    dx: int = 0
    dy: int = 0
    pad: int = 4

    def __post_init__(self):
        if abs(self.dx) > self.pad or abs(self.dy) > self.pad:
            raise ValueError(f"shift ({self.dx}, {self.dy}) exceeds padding {self.pad}")

    @property
    def crop_origin(self) -> tuple[int, int]:
        return self.pad + self.dy, self.pad + self.dx

    @property
    def is_identity(self) -> bool:
        return not self.flip and self.dx == 0 and self.dy == 0


def default_pad(image_size: int) -> int:
    """4 pixels for 32x32 images, scaled proportionally otherwise."""
    return max(1, round(image_size / 8))


def sample_augment(gen: np.random.Generator, n: int, pad: int) -> list[AugmentParams]:
    flips = gen.random(n) < 0.5
    shifts = gen.integers(-pad, pad + 1, size=(n, 2))
    return [AugmentParams(bool(f), int(s[0]), int(s[1]), pad) for f, s in zip(flips, shifts)]


def _bilinear_index(shape: tuple[int, ...], params: Sequence[AugmentParams]):
    n, h, w, c = shape
    ii, jj = np.mgrid[0:h, 0:w].astype(np.float64)
    idx = np.zeros((n, h, w, c, 4), dtype=np.int64)
    wts = np.zeros((n, h, w, c, 4))
    chan = np.arange(c)
    for k, prm in enumerate(params):
        sy = ii + prm.dy
        sx = jj + prm.dx
        if prm.flip:
            sx = (w - 1) - sx
        y0, x0 = np.floor(sy), np.floor(sx)
        fy, fx = sy - y0, sx - x0
        corners = ((y0, x0, (1 - fy) * (1 - fx)), (y0, x0 + 1, (1 - fy) * fx),
                   (y0 + 1, x0, fy * (1 - fx)), (y0 + 1, x0 + 1, fy * fx))
        for q, (yy, xx, ww) in enumerate(corners):
            inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            pix = np.where(inside, (k * h + yy) * w + xx, 0).astype(np.int64)
            idx[k, :, :, :, q] = pix[..., None] * c + chan
            wts[k, :, :, :, q] = np.where(inside, ww, 0.0)[..., None]
    return idx, wts


def augment_differentiable(images, params: Sequence[AugmentParams] | AugmentParams) -> Tensor:
    """Flip + shift realised as bilinear grid resampling (differentiable in the pixels).

    Accepts a single HWC image or an NHWC batch with one params entry per image.
    """
    images = images if isinstance(images, Tensor) else Tensor(images)
    single = images.ndim == 3
    if isinstance(params, AugmentParams):
        params = [params]
    x = ag.reshape(images, (1, *images.shape)) if single else images
    if len(params) != x.shape[0]:
        raise ValueError(f"{len(params)} augmentation draws for {x.shape[0]} images")
    if all(p.is_identity for p in params):
        return images
    idx, wts = _bilinear_index(x.shape, params)
    out = ag.gather(x, idx, wts)
    return ag.reshape(out, images.shape) if single else out


def augment_standard(image: np.ndarray, params: AugmentParams) -> np.ndarray:
    """Victim-side flip + padded crop on raw arrays (HWC or NHWC with shared params)."""
    img = np.asarray(image)
    h, w = img.shape[-3], img.shape[-2]
    if params.flip:
        img = img[..., :, ::-1, :]
    p = params.pad
    padw = [(0, 0)] * (img.ndim - 3) + [(p, p), (p, p), (0, 0)]
    padded = np.pad(img, padw)
    oy, ox = params.crop_origin
    return np.ascontiguousarray(padded[..., oy:oy + h, ox:ox + w, :])


def augment_batch(images: np.ndarray, params: Sequence[AugmentParams]) -> np.ndarray:
    n, h, w, _ = images.shape
    pad = max(p.pad for p in params)
    padded = np.pad(images, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    out = np.empty_like(images)
    for k, prm in enumerate(params):
        src = padded[k, :, ::-1, :] if prm.flip else padded[k]
        oy, ox = pad + prm.dy, pad + prm.dx
        out[k] = src[oy:oy + h, ox:ox + w, :]
    return out
