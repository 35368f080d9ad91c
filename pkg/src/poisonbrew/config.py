"""Experiment configuration: nested dataclasses written to and parsed from INI text.

Every section maps to one dataclass; nested dataclasses (``brew.dp_counter``)
flatten to dotted keys. Unknown keys and unparsable values raise
``ConfigError`` naming the field path.
"""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, is_dataclass, replace
from fractions import Fraction
from pathlib import Path
from typing import Any

from .brewer import BrewConfig, ThreatModel
from .trainer import DPConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    source: str = "synth"          # "synth" or "cifar"
    cifar_dir: str = ""
    per_class: int = 500           # training images per class (cap for CIFAR)
    val_per_class: int = 50
    image_size: int = 16
    classes: int = 10
    snr: float = 0.6
    modes: int = 8
    mode_weight: float = 1.0
    texture: float = 0.0           # std of the per-image smooth random field
    texture_cutoff: float = 0.15   # its low-pass cutoff, cycles per pixel

    def __post_init__(self):
        if self.source not in ("synth", "cifar"):
            raise ValueError("dataset.source must be 'synth' or 'cifar'")
        if self.per_class < 1 or self.val_per_class < 1:
            raise ValueError("per-class counts must be positive")


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "convnet"
    width_scale: Fraction = Fraction(1, 8)
    hidden: tuple[int, ...] = (32,)   # mlp only
    init_gain: float = 6.0

    def __post_init__(self):
        object.__setattr__(self, "width_scale", Fraction(self.width_scale))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


@dataclass(frozen=True)
class EvalConfig:
    cases: int = 5
    victims: int = 4
    monitor: bool = True           # record alignment series during victim training
    null_attack: bool = True       # also evaluate eps = 0 under identical seeds
    filter_fractions: tuple[float, ...] = (0.1, 0.2)
    dp_sigmas: tuple[float, ...] = (0.0, 0.01, 0.05)
    dp_clip: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "filter_fractions", tuple(float(f) for f in self.filter_fractions))
        object.__setattr__(self, "dp_sigmas", tuple(float(s) for s in self.dp_sigmas))
        if self.cases < 1 or self.victims < 1:
            raise ValueError("eval.cases and eval.victims must be positive")


def _desk_brew() -> BrewConfig:
    return BrewConfig(restarts=4, steps=100)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    threat: ThreatModel = field(default_factory=ThreatModel)
    brew: BrewConfig = field(default_factory=_desk_brew)
    train: TrainConfig = field(default_factory=TrainConfig)
    dp: DPConfig = field(default_factory=DPConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


SECTIONS = ("dataset", "model", "threat", "brew", "train", "dp", "eval")


# ------------------------------------------------------------ value codecs

def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, Fraction):
        return str(value)
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return str(value)


def _parse(text: str, like: Any, path: str) -> Any:
    text = text.strip()
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, Fraction):
            return Fraction(text)
        if isinstance(like, tuple):
            if not text:
                return ()
            proto = like[0] if like else 0.0
            return tuple(_parse(part, proto, path) for part in text.split(","))
        return text
    except (ValueError, ZeroDivisionError) as err:
        raise ConfigError(f"{path}: cannot parse {text!r} as {type(like).__name__}") from err


def _flatten(obj, prefix: str = "") -> dict[str, Any]:
    out = {}
    for f in fields(obj):
        value = getattr(obj, f.name)
        if is_dataclass(value):
            out.update(_flatten(value, f"{prefix}{f.name}."))
        else:
            out[f"{prefix}{f.name}"] = value
    return out


def _rebuild(obj, values: dict[str, Any], path: str):
    """Return ``obj`` with dotted-key ``values`` applied (recursing into nested dataclasses)."""
    names = {f.name for f in fields(obj)}
    direct, nested = {}, {}
    for key, v in values.items():
        head, _, rest = key.partition(".")
        if head not in names:
            raise ConfigError(f"{path}{key}: unknown field")
        if rest:
            nested.setdefault(head, {})[rest] = v
        else:
            direct[head] = v
    for head, sub in nested.items():
        child = getattr(obj, head)
        if not is_dataclass(child):
            raise ConfigError(f"{path}{head}: not a section")
        direct[head] = _rebuild(child, sub, f"{path}{head}.")
    try:
        return replace(obj, **direct)
    except (ValueError, TypeError) as err:
        raise ConfigError(f"{path.rstrip('.') or 'config'}: {err}") from err


def with_overrides(cfg: ExperimentConfig, overrides: dict[str, Any]) -> ExperimentConfig:
    """Apply dotted overrides, e.g. ``{"brew.steps": 50, "threat.eps_pixels": 8}``.

    String values are parsed against the type of the current value.
    """
    flat = _flatten(cfg)
    typed = {}
    for key, v in overrides.items():
        if key not in flat:
            raise ConfigError(f"{key}: unknown field")
        typed[key] = _parse(v, flat[key], key) if isinstance(v, str) and not isinstance(flat[key], str) else v
    return _rebuild(cfg, typed, "")


# -------------------------------------------------------------- INI files

def to_ini(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser["experiment"] = {"seed": _format(cfg.seed), "out": cfg.out}
    for name in SECTIONS:
        parser[name] = {k: _format(v) for k, v in _flatten(getattr(cfg, name)).items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def from_ini(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse INI text; missing keys keep the values of ``base`` (the defaults)."""
    cfg = base or ExperimentConfig()
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as err:
        raise ConfigError(f"malformed config: {err}") from err
    overrides: dict[str, Any] = {}
    for section in parser.sections():
        if section != "experiment" and section not in SECTIONS:
            raise ConfigError(f"{section}: unknown section")
        prefix = "" if section == "experiment" else f"{section}."
        for key, value in parser[section].items():
            overrides[prefix + key] = value
    flat = _flatten(cfg)
    for key in overrides:
        if key not in flat:
            raise ConfigError(f"{key}: unknown field")
    return with_overrides(cfg, overrides)


def load_config(path) -> ExperimentConfig:
    return from_ini(Path(path).read_text())


def save_config(path, cfg: ExperimentConfig) -> None:
    Path(path).write_text(to_ini(cfg))


def as_dict(cfg: ExperimentConfig) -> dict[str, Any]:
    """JSON-friendly flat view (Fractions and tuples rendered as in the INI file)."""
    return {k: (_format(v) if isinstance(v, (Fraction, tuple)) else v) for k, v in _flatten(cfg).items()}


__all__ = ["ConfigError", "DatasetConfig", "ModelConfig", "EvalConfig", "ExperimentConfig",
           "to_ini", "from_ini", "load_config", "save_config", "with_overrides", "as_dict"]
