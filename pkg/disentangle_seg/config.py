"""Flat experiment configuration and the builders that consume it.

Keys are namespaced ``section.name`` and declared once in :data:`OPTIONS`
with a parser, a default and a one-line description. Files hold
``key = value`` lines; ``#`` starts a comment.
"""

import logging
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional, Union

import torch

from .backbone import BackboneConfig
from .core_ops import HuberConfig
from .data_synth import ShapesConfig
from .exceptions import ConfigKeyError, ConfigValueError, DisentangleSegError
from .losses import LpdConfig
from .protocol import ClassPartition, PseudoLabelConfig, TrainingConfig
from .seeding import derive_seed
from .segmenter import Segmenter
from .text_bank import load_descriptions

logger = logging.getLogger(__name__)

TRUE_WORDS = ("true", "1", "yes", "on")
FALSE_WORDS = ("false", "0", "no", "off")


def parse_bool(text: str) -> bool:
    word = text.strip().lower()
    if word in TRUE_WORDS:
        return True
    if word in FALSE_WORDS:
        return False
    raise ValueError(f"expected one of {TRUE_WORDS + FALSE_WORDS}")


def parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(",") if part.strip())


def parse_words(text: str) -> tuple[str, ...]:
    return tuple(part.strip() for part in text.split(",") if part.strip())


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list, frozenset)):
        return ",".join(str(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class Option:
    parse: Callable[[str], Any]
    default: str
    doc: str


OPTIONS: dict[str, Option] = {
    "preset": Option(str, "desk", "named set of defaults applied before the file"),
    "seed": Option(int, "0", "master seed; data, init and shuffle seeds derive from it"),
    "data.num_classes": Option(int, "6", "foreground classes in the corpus"),
    "data.image_size": Option(int, "64", "rendered image side in pixels"),
    "data.shapes_min": Option(int, "1", "fewest shapes per image"),
    "data.shapes_max": Option(int, "3", "most shapes per image"),
    "data.noise": Option(float, "0.05", "per-pixel noise, as a fraction of 255"),
    "data.hue_spacing": Option(float, "1.0", "share of the hue circle spread over classes"),
    "data.n_train": Option(int, "200", "training images"),
    "data.n_test": Option(int, "60", "test images"),
    "backbone.image_size": Option(int, "64", "training and evaluation resolution"),
    "backbone.patch_size": Option(int, "8", "patch side in pixels"),
    "backbone.depth": Option(int, "4", "transformer blocks"),
    "backbone.dim": Option(int, "64", "shared embedding width"),
    "backbone.heads": Option(int, "4", "attention heads"),
    "backbone.mlp_ratio": Option(int, "4", "feed-forward expansion"),
    "backbone.fuse_layers": Option(parse_ints, "2,3,4", "1-based blocks fused into patch features"),
    "backbone.last_layer_mode": Option(str, "vv_no_ffn_no_residual", "surgery on the last block"),
    "backbone.adapter": Option(parse_bool, "true", "convolutional patch adapter"),
    "backbone.trainable": Option(parse_words, "prompts,adapter,encoder", "trainable components"),
    "decoder.layers": Option(int, "2", "fusion decoder blocks"),
    "decoder.heads": Option(int, "4", "fusion decoder heads"),
    "decoder.zero_init": Option(parse_bool, "true", "decoder starts as the identity"),
    "text.context_length": Option(int, "8", "rows of every learnable context"),
    "text.num_background": Option(int, "4", "background prototypes with the manifold on"),
    "text.context_std": Option(float, "0.02", "std of fresh class contexts"),
    "text.descriptions": Option(str, "", "template description file; empty uses the packaged one"),
    "lpd.alpha": Option(float, "1.0", "plasticity weight"),
    "lpd.beta": Option(float, "0.2", "dense distillation weight"),
    "lpd.temperature": Option(float, "2.0", "softmax temperature of the dense term"),
    "lpd.k": Option(int, "0", "edges penalised by plasticity; 0 uses the step size"),
    "lpd.plasticity_form": Option(str, "as_printed", "as_printed (1 - cos) or orthogonal (cos^2)"),
    "lpd.huber_delta": Option(float, "1.0", "Huber threshold of the stability term"),
    "lpd.normalize_distance": Option(parse_bool, "true", "divide distances by their mean"),
    "protocol.split": Option(str, "4-2", "base-increment split"),
    "protocol.mode": Option(str, "overlapped", "disjoint, overlapped or joint"),
    "protocol.epochs": Option(int, "20", "epochs per step"),
    "protocol.batch_size": Option(int, "8", "training batch size"),
    "protocol.lr": Option(float, "1e-3", "base learning rate"),
    "protocol.incremental_lr_scale": Option(float, "0.1", "rate multiplier for steps after the first"),
    "protocol.encoder_lr_scale": Option(float, "0.3", "encoder rate relative to the step rate"),
    "protocol.weight_decay": Option(float, "0.01", "AdamW weight decay"),
    "protocol.pseudo_tau": Option(float, "0.7", "pseudo-label confidence threshold"),
    "protocol.lambda_lpd": Option(float, "1.0", "weight of the prototype losses"),
    "protocol.lambda_bkg": Option(float, "0.1", "weight of the background contrastive loss"),
    "method.prompt": Option(parse_bool, "true", "train class and background prompts"),
    "method.lpd": Option(parse_bool, "true", "prototype disentanglement losses"),
    "method.manifold": Option(parse_bool, "true", "several background prototypes"),
    "method.mbd": Option(parse_bool, "true", "background contrastive loss"),
    "method.pseudo_label": Option(parse_bool, "true", "pseudo-labels from the previous model"),
    "eval.batch_size": Option(int, "16", "evaluation batch size"),
    "train.progress": Option(parse_bool, "false", "show tqdm progress bars"),
}

PRESETS: dict[str, dict[str, str]] = {
    "desk": {},
    "voc": {
        "protocol.lr": "3e-6",
        "protocol.batch_size": "8",
        "protocol.epochs": "64",
        "protocol.incremental_lr_scale": "0.1",
        "backbone.image_size": "512",
        "backbone.patch_size": "16",
        "backbone.depth": "12",
        "backbone.dim": "512",
        "backbone.heads": "8",
        "backbone.fuse_layers": "4,6,8,12",
        "decoder.heads": "8",
        "protocol.split": "15-1",
        "data.num_classes": "20",
    },
}
PRESETS["ade"] = {
    **PRESETS["voc"],
    "protocol.incremental_lr_scale": "0.5",
    "protocol.split": "100-50",
    "data.num_classes": "150",
}


class ExperimentConfig(Mapping[str, Any]):
    """Immutable mapping of every option to its parsed value."""

    def __init__(self, raw: Optional[Mapping[str, str]] = None) -> None:
        raw = dict(raw or {})
        for key in raw:
            if key not in OPTIONS:
                raise ConfigKeyError(key)
        preset = raw.get("preset", OPTIONS["preset"].default)
        if preset not in PRESETS:
            raise ConfigValueError("preset", preset, f"expected one of {sorted(PRESETS)}")
        merged = {key: opt.default for key, opt in OPTIONS.items()}
        merged.update(PRESETS[preset])
        merged.update(raw)
        self._raw = merged
        self._values = {key: self._parse(key, text) for key, text in merged.items()}

    @staticmethod
    def _parse(key: str, text: str) -> Any:
        try:
            return OPTIONS[key].parse(text)
        except ValueError as exc:
            raise ConfigValueError(key, text, str(exc)) from None

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "ExperimentConfig":
        raw: dict[str, str] = {}
        for number, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigValueError(source, line, f"line {number} is not 'key = value'")
            raw[key.strip()] = value.strip()
        return cls(raw)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "ExperimentConfig":
        path = Path(path)
        return cls.from_text(path.read_text(encoding="utf-8"), str(path))

    def with_overrides(self, assignments: Iterable[str]) -> "ExperimentConfig":
        """Apply ``key=value`` strings on top of this config."""
        raw = self.explicit()
        for item in assignments:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigValueError("--set", item, "expected key=value")
            raw[key.strip()] = value.strip()
        return ExperimentConfig(raw)

    def with_values(self, **values: Any) -> "ExperimentConfig":
        """Override with Python values; ``method_lpd=False`` sets ``method.lpd``."""
        raw = self.explicit()
        for name, value in values.items():
            raw[name.replace("_", ".", 1)] = _format(value)
        return ExperimentConfig(raw)

    def explicit(self) -> dict[str, str]:
        """Raw text of every key, preset values resolved."""
        return dict(self._raw)

    def resolved(self) -> str:
        return "".join(f"{key} = {self._raw[key]}\n" for key in sorted(self._raw))

    def sub_seed(self, name: str) -> int:
        return derive_seed(self["seed"], name)

    def __getitem__(self, key: str) -> Any:
        try:
            return self._values[key]
        except KeyError:
            raise ConfigKeyError(key) from None

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)


def _build(key: str, factory: Callable[[], Any]) -> Any:
    try:
        return factory()
    except DisentangleSegError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigValueError(key, "", str(exc)) from None


def backbone_config(cfg: ExperimentConfig) -> BackboneConfig:
    return _build(
        "backbone",
        lambda: BackboneConfig(
            image_size=cfg["backbone.image_size"],
            patch_size=cfg["backbone.patch_size"],
            depth=cfg["backbone.depth"],
            dim=cfg["backbone.dim"],
            heads=cfg["backbone.heads"],
            mlp_ratio=cfg["backbone.mlp_ratio"],
            fuse_layers=cfg["backbone.fuse_layers"],
            last_layer_mode=cfg["backbone.last_layer_mode"],
            adapter_enabled=cfg["backbone.adapter"],
            trainable_set=frozenset(cfg["backbone.trainable"]),
        ),
    )


def lpd_config(cfg: ExperimentConfig) -> LpdConfig:
    return LpdConfig(
        alpha=cfg["lpd.alpha"],
        beta=cfg["lpd.beta"],
        temperature=cfg["lpd.temperature"],
        k=cfg["lpd.k"],
        plasticity_form=cfg["lpd.plasticity_form"],
        huber_delta=cfg["lpd.huber_delta"],
        normalize_distance=cfg["lpd.normalize_distance"],
    )


def huber_config(cfg: ExperimentConfig) -> HuberConfig:
    return HuberConfig(cfg["lpd.huber_delta"])


def pseudo_label_config(cfg: ExperimentConfig) -> PseudoLabelConfig:
    return PseudoLabelConfig(cfg["protocol.pseudo_tau"])


def shapes_config(cfg: ExperimentConfig) -> ShapesConfig:
    return ShapesConfig(
        num_classes=cfg["data.num_classes"],
        image_size=cfg["data.image_size"],
        shapes_min=cfg["data.shapes_min"],
        shapes_max=cfg["data.shapes_max"],
        noise=cfg["data.noise"],
        hue_spacing=cfg["data.hue_spacing"],
        assignment_seed=cfg.sub_seed("data"),
    )


def training_config(cfg: ExperimentConfig) -> TrainingConfig:
    return TrainingConfig(
        epochs=cfg["protocol.epochs"],
        batch_size=cfg["protocol.batch_size"],
        lr=cfg["protocol.lr"],
        incremental_lr_scale=cfg["protocol.incremental_lr_scale"],
        encoder_lr_scale=cfg["protocol.encoder_lr_scale"],
        weight_decay=cfg["protocol.weight_decay"],
        lambda_lpd=cfg["protocol.lambda_lpd"],
        lambda_bkg=cfg["protocol.lambda_bkg"],
        eval_batch_size=cfg["eval.batch_size"],
        image_size=cfg["backbone.image_size"],
        trainable=frozenset(cfg["backbone.trainable"]),
        use_prompt=cfg["method.prompt"],
        use_lpd=cfg["method.lpd"],
        use_mbd=cfg["method.mbd"],
        use_pseudo_label=cfg["method.pseudo_label"],
        progress=cfg["train.progress"],
        shuffle_seed=cfg.sub_seed("shuffle"),
    )


def class_partition(cfg: ExperimentConfig, num_classes: Optional[int] = None) -> ClassPartition:
    return ClassPartition.from_split(
        cfg["protocol.split"],
        num_classes or cfg["data.num_classes"],
        cfg["protocol.mode"],
    )


def num_background(cfg: ExperimentConfig) -> int:
    """Background prototypes; a single one when the manifold is off."""
    return cfg["text.num_background"] if cfg["method.manifold"] else 1


def build_model(cfg: ExperimentConfig, class_names: Mapping[int, str]) -> Segmenter:
    """Fresh segmenter with torch seeded from the ``init`` sub-seed."""
    path = cfg["text.descriptions"] or None
    torch.manual_seed(cfg.sub_seed("init"))
    return Segmenter.build(
        class_names,
        backbone_config(cfg),
        seed=cfg.sub_seed("init"),
        decoder_layers=cfg["decoder.layers"],
        decoder_heads=cfg["decoder.heads"],
        decoder_zero_init=cfg["decoder.zero_init"],
        context_length=cfg["text.context_length"],
        num_background=num_background(cfg),
        context_std=cfg["text.context_std"],
        descriptions=load_descriptions(path),
    )
