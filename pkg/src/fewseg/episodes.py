"""Dataset manifests, fold splits, episodic sampling, and synthetic data.

A manifest is a UTF-8 line-delimited file, one record per line:

    image_path<TAB>mask_path<TAB>class_id<TAB>class_name

Masks are single-channel rasters with 0 = background and 255 = foreground.
Boxes are always re-derived from masks at load time (tight hull), never read
from the manifest. The synthetic generator renders one textured shape per
image over seeded noise, giving exact masks at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import Tensor

from .errors import SamplingError, ValidationError
from .patterns import Box, PatternTag, tight_box


@dataclass(frozen=True)
class ManifestRecord:
    image_path: str
    mask_path: str
    class_id: int
    class_name: str


@dataclass
class DatasetManifest:
    name: str
    records: list[ManifestRecord]
    by_class: dict[int, list[ManifestRecord]] = field(init=False)

    def __post_init__(self):
        self.by_class = {}
        for record in self.records:
            self.by_class.setdefault(record.class_id, []).append(record)

    @property
    def class_ids(self) -> list[int]:
        return sorted(self.by_class)

    def class_name(self, class_id: int) -> str:
        return self.by_class[class_id][0].class_name

    def write(self, path: str | Path) -> Path:
        """Write records; paths under the manifest's directory are stored relative."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        root = path.parent.resolve()

        def portable(p: str) -> str:
            try:
                return Path(p).resolve().relative_to(root).as_posix()
            except ValueError:
                return p

        lines = [
            f"{portable(r.image_path)}\t{portable(r.mask_path)}\t{r.class_id}\t{r.class_name}"
            for r in self.records
        ]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    @classmethod
    def read(cls, path: str | Path) -> "DatasetManifest":
        """Read records; relative paths resolve against the manifest's directory."""
        path = Path(path)
        root = path.parent
        records = []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValidationError(f"{path}:{lineno}: expected 4 tab-separated fields")
            image_path, mask_path = (
                p if Path(p).is_absolute() else str(root.resolve() / p) for p in parts[:2]
            )
            records.append(ManifestRecord(image_path, mask_path, int(parts[2]), parts[3]))
        return cls(name=path.stem, records=records)


@dataclass
class Episode:
    """One query/support task instance; records are loaded lazily."""

    query: ManifestRecord
    supports: list[ManifestRecord]
    class_id: int
    pattern: PatternTag
    fold: int

    def __post_init__(self):
        if self.query in self.supports:
            raise ValidationError("query record must not appear among supports")
        for record in (self.query, *self.supports):
            if record.class_id != self.class_id:
                raise ValidationError("all episode records must share the class id")


def split_folds(class_ids: list[int], fold: int, n_folds: int) -> tuple[list[int], list[int]]:
    """Contiguous-block fold split: returns (base_classes, novel_classes)."""
    if n_folds < 1 or len(class_ids) % n_folds != 0:
        raise ValidationError(f"{len(class_ids)} classes cannot split evenly into {n_folds} folds")
    if not 0 <= fold < n_folds:
        raise ValidationError(f"fold must be in [0, {n_folds}), got {fold}")
    per_fold = len(class_ids) // n_folds
    novel = list(class_ids[fold * per_fold : (fold + 1) * per_fold])
    base = [c for c in class_ids if c not in set(novel)]
    return base, novel


def sample_episode(
    manifest: DatasetManifest,
    classes: list[int],
    k: int,
    rng_seed: int,
    pattern: PatternTag,
    fold: int = 0,
) -> Episode:
    """Uniformly pick a class, then K+1 distinct records (1 query, K supports)."""
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if not classes:
        raise SamplingError("no classes to sample from")
    rng = np.random.default_rng(rng_seed)
    class_id = int(classes[rng.integers(len(classes))])
    pool = manifest.by_class.get(class_id, [])
    if len(pool) < k + 1:
        raise SamplingError(
            f"class {class_id} has {len(pool)} records; k={k} episodes need at least {k + 1}"
        )
    picks = rng.choice(len(pool), size=k + 1, replace=False)
    query = pool[int(picks[0])]
    supports = [pool[int(i)] for i in picks[1:]]
    return Episode(query=query, supports=supports, class_id=class_id, pattern=PatternTag(pattern), fold=fold)


def load_image(path: str | Path, size: int | None = None) -> Tensor:
    """Load an RGB raster as float32 [3, H, W] in [0, 1], optionally resized."""
    img = Image.open(path).convert("RGB")
    if size is not None and img.size != (size, size):
        img = img.resize((size, size), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def load_mask(path: str | Path, size: int | None = None) -> Tensor:
    """Load a 0/255 mask raster as float32 [H, W] with values in {0, 1}."""
    img = Image.open(path).convert("L")
    if size is not None and img.size != (size, size):
        img = img.resize((size, size), Image.NEAREST)
    arr = np.asarray(img, dtype=np.float32)
    return torch.from_numpy((arr > 127).astype(np.float32))


def record_box(record: ManifestRecord, size: int | None = None) -> Box:
    """Tight box derived from the record's mask; never trusted from input."""
    return tight_box(load_mask(record.mask_path, size))


SHAPE_KINDS = ("disk", "square", "triangle", "ring", "cross")
COLOR_BANDS = (
    ("red", (220, 40, 40)),
    ("green", (40, 200, 60)),
    ("blue", (50, 80, 230)),
    ("yellow", (230, 210, 40)),
    ("magenta", (210, 50, 200)),
    ("cyan", (40, 200, 210)),
)
TEXTURES = ("flat", "stripes", "dots")


def synth_generate(
    seed: int,
    n_classes: int,
    n_images_per_class: int,
    image_size: int,
    output_dir: str | Path,
    n_distractors: int = 0,
) -> DatasetManifest:
    """Render a synthetic dataset; each class is a (shape, color, texture) triple.

    Every image carries one labeled foreground instance over seeded background
    noise; the mask is the exact rendered support of that instance, so tight
    boxes are reproducible from the mask alone. With n_distractors > 0, each
    image additionally shows that many unlabeled instances of other classes,
    which makes the guidance actually disambiguate the target at desk scale.
    Fully deterministic in the seed.
    """
    if image_size % 32 != 0:
        raise ValidationError(f"image_size must be divisible by 32, got {image_size}")
    max_classes = len(SHAPE_KINDS) * len(COLOR_BANDS) * len(TEXTURES)
    if not 1 <= n_classes <= max_classes:
        raise ValidationError(f"n_classes must be in [1, {max_classes}]")
    output_dir = Path(output_dir).resolve()
    (output_dir / "images").mkdir(parents=True, exist_ok=True)
    (output_dir / "masks").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    records = []
    for class_id in range(n_classes):
        class_name = _class_name(class_id)
        for idx in range(n_images_per_class):
            image = np.repeat(rng.normal(120.0, 18.0, size=(image_size, image_size, 1)), 3, axis=2)
            image = image.clip(0, 255)
            if n_distractors and n_classes > 1:
                others = [c for c in range(n_classes) if c != class_id]
                for _ in range(n_distractors):
                    other = int(others[rng.integers(len(others))])
                    image, _ = _draw_instance(rng, image, other, image_size)
            image, mask = _draw_instance(rng, image, class_id, image_size)
            image_path = output_dir / "images" / f"c{class_id:03d}_{idx:03d}.png"
            mask_path = output_dir / "masks" / f"c{class_id:03d}_{idx:03d}.png"
            Image.fromarray(image.round().astype(np.uint8), mode="RGB").save(image_path)
            Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(mask_path)
            records.append(ManifestRecord(str(image_path), str(mask_path), class_id, class_name))

    manifest = DatasetManifest(name=output_dir.name, records=records)
    manifest.write(output_dir / "manifest.tsv")
    return manifest


def _class_name(class_id: int) -> str:
    shape = SHAPE_KINDS[class_id % len(SHAPE_KINDS)]
    color_name, _ = COLOR_BANDS[(class_id // len(SHAPE_KINDS)) % len(COLOR_BANDS)]
    texture = TEXTURES[(class_id // (len(SHAPE_KINDS) * len(COLOR_BANDS))) % len(TEXTURES)]
    return f"{texture}_{color_name}_{shape}"


def _draw_instance(rng, image, class_id, size):
    """Paint one instance of a class onto the image; returns (image, mask)."""
    shape = SHAPE_KINDS[class_id % len(SHAPE_KINDS)]
    _, color = COLOR_BANDS[(class_id // len(SHAPE_KINDS)) % len(COLOR_BANDS)]
    texture = TEXTURES[(class_id // (len(SHAPE_KINDS) * len(COLOR_BANDS))) % len(TEXTURES)]

    half = int(rng.integers(size // 8, size // 4))
    cy = int(rng.integers(half + 1, size - half - 1))
    cx = int(rng.integers(half + 1, size - half - 1))
    ys, xs = np.mgrid[0:size, 0:size]
    dy, dx = ys - cy, xs - cx

    if shape == "disk":
        mask = dy**2 + dx**2 <= half**2
    elif shape == "square":
        mask = (np.abs(dy) <= half) & (np.abs(dx) <= half)
    elif shape == "triangle":
        mask = (dy >= -half) & (dy <= half) & (np.abs(dx) <= (dy + half) / 2)
    elif shape == "ring":
        r2 = dy**2 + dx**2
        mask = (r2 <= half**2) & (r2 >= (half // 2) ** 2)
    else:  # cross
        arm = max(1, half // 3)
        mask = ((np.abs(dy) <= arm) & (np.abs(dx) <= half)) | (
            (np.abs(dx) <= arm) & (np.abs(dy) <= half)
        )

    fill = np.array(color, dtype=np.float64)[None, None, :] * np.ones((size, size, 3))
    if texture == "stripes":
        period = max(4, half // 2)
        bands = ((ys // period) % 2 == 0)[..., None]
        fill = fill * np.where(bands, 1.0, 0.55)
    elif texture == "dots":
        period = max(4, half // 2)
        dots = ((ys % period < period // 2) & (xs % period < period // 2))[..., None]
        fill = fill * np.where(dots, 0.55, 1.0)

    return np.where(mask[..., None], fill, image), mask
