"""Gradient-matching data poisoning on a small numpy autodiff stack.

Submodules: ``autograd``, ``nn``, ``datapipe``, ``trainer``, ``brewer``,
``analysis``, ``pipeline``, ``config`` and the ``cli`` entry point.
"""
from . import analysis, autograd, brewer, config, datapipe, gradcheck, nn, pipeline, rng, trainer
from .brewer import BrewConfig, PoisonPackage, ThreatModel, brew, project
from .config import ExperimentConfig, load_config
from .datapipe import Dataset, PoisonCase, sample_case, synth_dataset
from .nn import ModelSpec
from .trainer import DPConfig, TrainConfig, train_victim

__version__ = "0.1.0"

__all__ = [
    "analysis", "autograd", "brewer", "config", "datapipe", "gradcheck", "nn", "pipeline", "rng", "trainer",
    "BrewConfig", "DPConfig", "Dataset", "ExperimentConfig", "ModelSpec", "PoisonCase", "PoisonPackage",
    "ThreatModel", "TrainConfig", "brew", "load_config", "project", "sample_case", "synth_dataset", "train_victim",
]
