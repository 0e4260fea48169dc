"""Synthetic segmentation corpus of coloured shapes, plus manifest I/O.

Every class owns one shape kind and one hue. Images are drawn with Pillow
on a low-frequency textured background; the label map is drawn with the
same calls, so occlusion is identical in both. Each image derives its own
seed from the corpus seed, which makes a corpus a pure function of
``(config, counts, seed)``.
"""

import colorsys
import logging
import shutil
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
from PIL import Image, ImageDraw

from .exceptions import DomainError, SampleFormatError
from .seeding import derive_seed

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.tsv"
CLASSES_NAME = "classes.tsv"
IGNORE_LABEL = 255
SPLITS = ("train", "test")
SHAPE_KINDS = ("ellipse", "square", "triangle", "pentagon", "hexagon", "diamond")
HUE_NAMES = (
    "red", "orange", "yellow", "lime", "green", "teal",
    "cyan", "azure", "blue", "violet", "magenta", "pink",
)  # fmt: skip
MAX_ATTEMPTS = 32


@dataclass(frozen=True)
class ShapesConfig:
    """Corpus appearance; ``hue_spacing < 1`` squeezes hues together."""

    num_classes: int = 6
    image_size: int = 64
    shapes_min: int = 1
    shapes_max: int = 3
    noise: float = 0.05
    hue_spacing: float = 1.0
    assignment_seed: int = 0

    def __post_init__(self) -> None:
        if not 2 <= self.num_classes < IGNORE_LABEL:
            raise DomainError("num_classes", f"must lie in [2, 254], got {self.num_classes}")
        if self.image_size < 16:
            raise DomainError("image_size", f"must be at least 16, got {self.image_size}")
        if not 1 <= self.shapes_min <= self.shapes_max:
            raise DomainError("shapes_min", "need 1 <= shapes_min <= shapes_max")
        if not 0 < self.hue_spacing <= 1:
            raise DomainError("hue_spacing", f"must lie in (0, 1], got {self.hue_spacing}")
        if self.noise < 0:
            raise DomainError("noise", f"must be non-negative, got {self.noise}")


@dataclass(frozen=True)
class ClassStyle:
    kind: str
    hue: float

    @property
    def rgb(self) -> tuple[int, int, int]:
        r, g, b = colorsys.hsv_to_rgb(self.hue, 0.85, 0.9)
        return int(r * 255), int(g * 255), int(b * 255)

    @property
    def hue_name(self) -> str:
        return HUE_NAMES[int(round(self.hue * len(HUE_NAMES))) % len(HUE_NAMES)]


@dataclass(frozen=True)
class ShapeSpec:
    class_id: int
    kind: str
    cx: int
    cy: int
    radius: int
    rotation: float = 0.0


@dataclass(frozen=True)
class SampleRecord:
    """One manifest line; paths are relative to the corpus root."""

    image_path: str
    label_path: str
    classes: tuple[int, ...]
    split: str
    seed: Optional[int] = None

    def to_line(self) -> str:
        classes = ",".join(str(c) for c in self.classes)
        return f"{self.image_path}\t{self.label_path}\t{classes}\t{self.split}"

    @classmethod
    def from_line(cls, line: str, source: str = MANIFEST_NAME) -> "SampleRecord":
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 4:
            raise SampleFormatError(source, f"expected 4 tab-separated fields in {line!r}")
        image, label, classes, split = parts
        if split not in SPLITS:
            raise SampleFormatError(source, f"unknown split {split!r}")
        try:
            ids = tuple(int(c) for c in classes.split(",") if c)
        except ValueError:
            raise SampleFormatError(source, f"bad class list {classes!r}") from None
        return cls(image, label, ids, split)


@dataclass
class Corpus:
    root: Path
    records: list[SampleRecord]
    class_names: dict[int, str] = field(default_factory=dict)

    def split(self, name: str) -> list[SampleRecord]:
        return [r for r in self.records if r.split == name]

    @classmethod
    def load(cls, root: Union[str, Path]) -> "Corpus":
        root = Path(root)
        return cls(root, read_manifest(root), read_class_names(root))


def class_styles(cfg: ShapesConfig) -> dict[int, ClassStyle]:
    """Shape kind and hue per class id ``1..N``."""
    rng = np.random.default_rng(derive_seed(cfg.assignment_seed, "styles"))
    kinds = [SHAPE_KINDS[i] for i in rng.permutation(len(SHAPE_KINDS))]
    offset = float(rng.random())
    styles = {}
    for c in range(1, cfg.num_classes + 1):
        hue = (offset + (c - 1) * cfg.hue_spacing / cfg.num_classes) % 1.0
        styles[c] = ClassStyle(kinds[(c - 1) % len(kinds)], hue)
    return styles


def class_names(cfg: ShapesConfig) -> dict[int, str]:
    """Readable unique names such as ``"teal hexagon"``."""
    names: dict[int, str] = {}
    for c, style in class_styles(cfg).items():
        name = f"{style.hue_name} {style.kind}"
        if name in names.values():
            name = f"{name} {c}"
        names[c] = name
    return names


def draw_shape(draw: ImageDraw.ImageDraw, spec: ShapeSpec, fill) -> None:
    x, y, r = spec.cx, spec.cy, spec.radius
    if spec.kind == "ellipse":
        draw.ellipse([x - r, y - int(r * 0.7), x + r, y + int(r * 0.7)], fill=fill)
    elif spec.kind == "square":
        draw.rectangle([x - r, y - r, x + r, y + r], fill=fill)
    elif spec.kind == "diamond":
        w = int(r * 0.6)
        draw.polygon([(x, y - r), (x + w, y), (x, y + r), (x - w, y)], fill=fill)
    else:
        sides = {"triangle": 3, "pentagon": 5, "hexagon": 6}[spec.kind]
        draw.regular_polygon((x, y, r), sides, rotation=spec.rotation, fill=fill)


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.random((size // 8 + 1, size // 8 + 1))
    grey = 0.35 + 0.3 * coarse
    img = Image.fromarray((grey * 255).astype(np.uint8), mode="L")
    img = img.resize((size, size), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float64)
    return np.repeat(arr[:, :, None], 3, axis=2)


def render(
    specs: Iterable[ShapeSpec],
    cfg: ShapesConfig,
    rng: np.random.Generator,
    styles: Optional[Mapping[int, ClassStyle]] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Rasterise ``specs`` in order; returns ``(H, W, 3)`` uint8 and ``(H, W)`` labels."""
    styles = styles or class_styles(cfg)
    size = cfg.image_size
    canvas = Image.fromarray(_texture(rng, size).astype(np.uint8), mode="RGB")
    labels = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(canvas)
    label_draw = ImageDraw.Draw(labels)
    for spec in specs:
        base = np.array(styles[spec.class_id].rgb, dtype=np.float64)
        jitter = rng.normal(0.0, 12.0, size=3)
        color = tuple(int(v) for v in np.clip(base + jitter, 0, 255))
        draw_shape(draw, spec, color)
        draw_shape(label_draw, spec, spec.class_id)
    pixels = np.asarray(canvas, dtype=np.float64)
    if cfg.noise > 0:
        pixels = pixels + rng.normal(0.0, cfg.noise * 255.0, size=pixels.shape)
    image = np.clip(np.rint(pixels), 0, 255).astype(np.uint8)
    return image, np.asarray(labels, dtype=np.uint8).copy()


def sample_specs(
    rng: np.random.Generator, cfg: ShapesConfig, styles: Mapping[int, ClassStyle]
) -> list[ShapeSpec]:
    size = cfg.image_size
    count = int(rng.integers(cfg.shapes_min, cfg.shapes_max + 1))
    specs = []
    for _ in range(count):
        c = int(rng.integers(1, cfg.num_classes + 1))
        r = int(rng.integers(max(size // 10, 3), size // 4 + 1))
        cx, cy = (int(v) for v in rng.integers(r, size - r, size=2))
        rotation = float(rng.uniform(0.0, 360.0))
        specs.append(ShapeSpec(c, styles[c].kind, cx, cy, r, rotation))
    return specs


def scan_classes(labels: np.ndarray) -> tuple[int, ...]:
    """Distinct foreground ids of a label map."""
    values = np.unique(labels)
    return tuple(int(v) for v in values if v not in (0, IGNORE_LABEL))


def _save_png(array: np.ndarray, path: Path, mode: str) -> None:
    Image.fromarray(array, mode=mode).save(path, format="PNG")


def generate_corpus(
    cfg: ShapesConfig,
    n_train: int,
    n_test: int,
    seed: int,
    out_dir: Union[str, Path],
) -> Corpus:
    """Render, save and index a corpus under ``out_dir``."""
    root = Path(out_dir)
    styles = class_styles(cfg)
    records = []
    for split, count in (("train", n_train), ("test", n_test)):
        (root / split).mkdir(parents=True, exist_ok=True)
        for i in range(count):
            image_seed = derive_seed(seed, split, i)
            rng = np.random.default_rng(image_seed)
            for _ in range(MAX_ATTEMPTS):
                image, labels = render(sample_specs(rng, cfg, styles), cfg, rng, styles)
                classes = scan_classes(labels)
                if classes:
                    break
            else:
                raise DomainError("cfg", f"no foreground survived for {split} image {i}")
            image_path = f"{split}/image_{i:05d}.png"
            label_path = f"{split}/label_{i:05d}.png"
            _save_png(image, root / image_path, "RGB")
            _save_png(labels, root / label_path, "L")
            records.append(SampleRecord(image_path, label_path, classes, split, image_seed))
    names = class_names(cfg)
    write_manifest(root, records)
    write_class_names(root, names)
    logger.info("wrote %d train / %d test samples to %s", n_train, n_test, root)
    return Corpus(root, records, names)


def write_manifest(root: Union[str, Path], records: Iterable[SampleRecord]) -> Path:
    path = Path(root) / MANIFEST_NAME
    text = "".join(r.to_line() + "\n" for r in records)
    path.write_text(text, encoding="utf-8")
    return path


def read_manifest(root: Union[str, Path]) -> list[SampleRecord]:
    path = Path(root) / MANIFEST_NAME
    if not path.exists():
        raise SampleFormatError(str(path), "manifest not found")
    lines = path.read_text(encoding="utf-8").splitlines()
    return [SampleRecord.from_line(ln, str(path)) for ln in lines if ln.strip()]


def write_class_names(root: Union[str, Path], names: Mapping[int, str]) -> Path:
    path = Path(root) / CLASSES_NAME
    text = "".join(f"{c}\t{names[c]}\n" for c in sorted(names))
    path.write_text(text, encoding="utf-8")
    return path


def read_class_names(root: Union[str, Path]) -> dict[int, str]:
    path = Path(root) / CLASSES_NAME
    if not path.exists():
        raise SampleFormatError(str(path), "class list not found")
    names = {}
    for ln in path.read_text(encoding="utf-8").splitlines():
        if not ln.strip():
            continue
        class_id, _, name = ln.partition("\t")
        names[int(class_id)] = name
    return names


def load_sample(
    record: SampleRecord, root: Union[str, Path], size: Optional[int] = None
) -> tuple[torch.Tensor, torch.Tensor]:
    """Image ``(3, H, W)`` in [0, 1] and integer labels ``(H, W)``.

    Labels are resized with nearest neighbour so class ids survive.
    """
    root = Path(root)
    image_path = root / record.image_path
    label_path = root / record.label_path
    with Image.open(image_path) as img, Image.open(label_path) as lbl:
        if img.mode != "RGB":
            raise SampleFormatError(str(image_path), f"expected RGB, got {img.mode}")
        if lbl.mode != "L":
            raise SampleFormatError(str(label_path), f"expected 8-bit labels, got {lbl.mode}")
        if img.size != lbl.size:
            raise SampleFormatError(
                str(label_path), f"size {lbl.size} does not match image {img.size}"
            )
        labels = np.asarray(lbl, dtype=np.uint8)
        if scan_classes(labels) != tuple(sorted(record.classes)):
            raise SampleFormatError(
                str(label_path), f"classes {scan_classes(labels)} != manifest {record.classes}"
            )
        if size is not None and img.size != (size, size):
            img = img.resize((size, size), Image.BILINEAR)
            lbl = lbl.resize((size, size), Image.NEAREST)
            labels = np.asarray(lbl, dtype=np.uint8)
        pixels = np.asarray(img, dtype=np.float64) / 255.0
    image = torch.from_numpy(pixels).permute(2, 0, 1).to(torch.get_default_dtype())
    return image.contiguous(), torch.from_numpy(labels.astype(np.int64))


def ingest_pairs(
    pairs: Iterable[tuple[Union[str, Path], Union[str, Path], str]],
    out_dir: Union[str, Path],
    names: Mapping[int, str],
) -> Corpus:
    """Copy pre-converted ``(image, label, split)`` pairs into a corpus."""
    root = Path(out_dir)
    records = []
    counters = {split: 0 for split in SPLITS}
    for image_src, label_src, split in pairs:
        if split not in SPLITS:
            raise SampleFormatError(str(image_src), f"unknown split {split!r}")
        with Image.open(image_src) as img, Image.open(label_src) as lbl:
            if img.mode != "RGB" or lbl.mode != "L":
                raise SampleFormatError(str(image_src), "need an RGB image and 8-bit labels")
            if img.size != lbl.size:
                raise SampleFormatError(str(label_src), "image and label sizes differ")
            classes = scan_classes(np.asarray(lbl, dtype=np.uint8))
        unknown = [c for c in classes if c not in names]
        if unknown:
            raise SampleFormatError(str(label_src), f"class ids {unknown} have no name")
        index = counters[split]
        counters[split] += 1
        (root / split).mkdir(parents=True, exist_ok=True)
        image_path = f"{split}/image_{index:05d}.png"
        label_path = f"{split}/label_{index:05d}.png"
        shutil.copyfile(image_src, root / image_path)
        shutil.copyfile(label_src, root / label_path)
        records.append(SampleRecord(image_path, label_path, classes, split))
    write_manifest(root, records)
    write_class_names(root, names)
    return Corpus(root, records, dict(names))
