"""Disentangle Seg - class-incremental semantic segmentation with language prototypes.

A desk-scale library for learning new pixel classes step by step without
revisiting old data: class embeddings come from learnable prompts passed
through a frozen text encoder, a patch transformer produces dense features,
and losses keep the class embeddings arranged like their text templates
while pushing the background away from newly added classes.

Key Features:
- Prompt-conditioned class and background embeddings
- Patch-transformer segmenter with a fusion decoder
- Stability, plasticity, dense and background contrastive losses
- Continual protocol with pseudo-labels and frozen old prompts
- Synthetic shapes corpus, metrics and CSV reports
- Versioned checkpoints and a command-line interface

Example:
    >>> from disentangle_seg import ExperimentConfig, generate_corpus, run_experiment
    >>> from disentangle_seg.config import shapes_config
    >>> cfg = ExperimentConfig().with_overrides(["protocol.epochs=2"])
    >>> corpus = generate_corpus(shapes_config(cfg), 40, 12, 0, "corpus")
    >>> results = run_experiment(cfg, corpus, "run1")
    >>> print(results[-1].report.groups["all"])
"""

from .checkpoint import load_checkpoint, restore, save_checkpoint
from .config import ExperimentConfig, build_model
from .data_synth import Corpus, SampleRecord, ShapesConfig, generate_corpus, load_sample
from .exceptions import (
    CheckpointFormatError,
    CommandNotFoundError,
    ConfigKeyError,
    ConfigValueError,
    DisentangleSegError,
    DomainError,
    InvalidCommandError,
    UnknownScopeError,
    MetricsError,
    PromptLookupError,
    SampleFormatError,
    StateError,
)
from .experiment import run_ablation, run_experiment
from .metrics import ConfusionMatrix, MetricReport, confusion, harmonic, miou
from .mixins import TokenCacheMixin
from .protocol import (
    ClassPartition,
    ContinualState,
    ContinualTrainer,
    PseudoLabelConfig,
    TrainingConfig,
    partition_dataset,
    pseudo_label,
    snapshot,
)
from .segmenter import Segmenter

__version__ = "0.1.0"

__all__ = [
    "ClassPartition",
    "ConfusionMatrix",
    "ContinualState",
    "ContinualTrainer",
    "Corpus",
    "ExperimentConfig",
    "MetricReport",
    "PseudoLabelConfig",
    "SampleRecord",
    "Segmenter",
    "ShapesConfig",
    "TokenCacheMixin",
    "TrainingConfig",
    "build_model",
    "confusion",
    "generate_corpus",
    "harmonic",
    "load_checkpoint",
    "load_sample",
    "miou",
    "partition_dataset",
    "pseudo_label",
    "restore",
    "run_ablation",
    "run_experiment",
    "save_checkpoint",
    "snapshot",
    "CheckpointFormatError",
    "CommandNotFoundError",
    "ConfigKeyError",
    "ConfigValueError",
    "DisentangleSegError",
    "DomainError",
    "InvalidCommandError",
    "UnknownScopeError",
    "MetricsError",
    "PromptLookupError",
    "SampleFormatError",
    "StateError",
]
