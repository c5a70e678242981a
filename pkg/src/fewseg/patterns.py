"""The seven guidance patterns and their normalization into a GuidanceSet.

Raw support material differs per pattern (image, mask, box, class text, or
combinations); normalization reduces all of them to the same internal form:
a support image, a binary support mask, a guidance embedding, and the
pattern tag. Downstream code never branches on the pattern again.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from enum import Enum

import torch
from torch import Tensor

from .encoder import EmbeddingSource, TextEmbedding, VisionLanguageEncoder
from .errors import DegenerateMaskError, ShapeError, ValidationError

Box = tuple[int, int, int, int]  # (x_min, y_min, x_max, y_max), half-open


class PatternTag(str, Enum):
    IMAGE = "image"
    MASK = "mask"
    BOX = "box"
    CLASS_IMAGE = "class_image"
    CLASS_MASK = "class_mask"
    CLASS_BOX = "class_box"
    TEXT = "text"

    @property
    def class_aware(self) -> bool:
        return self in (PatternTag.CLASS_IMAGE, PatternTag.CLASS_MASK, PatternTag.CLASS_BOX, PatternTag.TEXT)

    @property
    def localized(self) -> bool:
        """Whether the pattern carries any spatial annotation."""
        return self in (PatternTag.MASK, PatternTag.CLASS_MASK, PatternTag.BOX, PatternTag.CLASS_BOX)


# Raw-support fields each pattern requires (support image is implied except for text).
REQUIRED_FIELDS: dict[PatternTag, tuple[str, ...]] = {
    PatternTag.IMAGE: ("image",),
    PatternTag.MASK: ("image", "mask"),
    PatternTag.BOX: ("image", "box"),
    PatternTag.CLASS_IMAGE: ("image", "class_name"),
    PatternTag.CLASS_MASK: ("image", "mask", "class_name"),
    PatternTag.CLASS_BOX: ("image", "box", "class_name"),
    PatternTag.TEXT: ("class_name",),
}


@dataclass
class RawSupport:
    """Support material as sampled from a dataset, before normalization."""

    image: Tensor | None = None  # [3, H, W]
    mask: Tensor | None = None  # binary [H, W]
    box: Box | None = None
    class_name: str | None = None


@dataclass
class GuidanceSet:
    """Normalized support representation shared by all patterns."""

    support_image: Tensor  # [3, H, W]
    support_mask: Tensor  # binary [H, W], all-ones when nothing localizes
    guidance_embedding: TextEmbedding
    pattern: PatternTag
    class_name: str | None = None

    @property
    def object_image(self) -> Tensor:
        """Support image masked at full resolution."""
        return self.support_image * self.support_mask.to(self.support_image.dtype)


def box_to_mask(box: Box, dims: tuple[int, int]) -> Tensor:
    """Binary mask of the half-open rectangle [y_min, y_max) x [x_min, x_max)."""
    x_min, y_min, x_max, y_max = box
    h, w = dims
    if not (0 <= x_min < x_max <= w and 0 <= y_min < y_max <= h):
        raise ValidationError(f"box {box} is inverted or outside a {h}x{w} image")
    mask = torch.zeros(h, w)
    mask[y_min:y_max, x_min:x_max] = 1.0
    return mask


def tight_box(mask: Tensor) -> Box:
    """Smallest half-open box containing the mask's foreground."""
    ys, xs = torch.nonzero(mask > 0.5, as_tuple=True)
    if ys.numel() == 0:
        raise ValidationError("cannot compute the box of an empty mask")
    return (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def normalize_guidance(
    pattern: PatternTag,
    raw: RawSupport,
    query_image: Tensor,
    encoder: VisionLanguageEncoder,
) -> GuidanceSet:
    """Turn raw support material into the internal GuidanceSet.

    Text-free patterns pool the support's stage-4 feature under the mask
    (global pool for the image pattern); a mask that vanishes at stride 32
    falls back to the global pool with a warning instead of failing.
    """
    pattern = PatternTag(pattern)
    for field in REQUIRED_FIELDS[pattern]:
        if getattr(raw, field) is None:
            raise ValidationError(f"pattern {pattern.value!r} requires raw support field {field!r}")

    support_image = query_image.clone() if pattern is PatternTag.TEXT else raw.image
    dims = tuple(support_image.shape[-2:])

    if pattern in (PatternTag.MASK, PatternTag.CLASS_MASK):
        mask = raw.mask
        if tuple(mask.shape) != dims:
            raise ShapeError(f"mask dims {tuple(mask.shape)} do not match image dims {dims}")
    elif pattern in (PatternTag.BOX, PatternTag.CLASS_BOX):
        mask = box_to_mask(raw.box, dims)
    else:
        mask = torch.ones(dims)

    if pattern.class_aware:
        embedding = encoder.encode_text(raw.class_name)
    else:
        feature = encoder.encode_image(support_image).stage_features[4]
        pool_mask = None if pattern is PatternTag.IMAGE else mask
        try:
            embedding = encoder.pooled_embedding(feature, pool_mask)
        except DegenerateMaskError:
            warnings.warn(
                f"support mask vanished at feature resolution for pattern {pattern.value!r}; "
                "falling back to global pooling",
                stacklevel=2,
            )
            embedding = encoder.pooled_embedding(feature, None)

    guidance = GuidanceSet(
        support_image=support_image,
        support_mask=mask,
        guidance_embedding=embedding,
        pattern=pattern,
        class_name=raw.class_name,
    )
    expected_source = embedding.source is EmbeddingSource.CLASS_TEXT
    assert expected_source == pattern.class_aware
    return guidance


def kshot_vote(predictions: list[Tensor]) -> Tensor:
    """Pixel-wise majority over K one-shot masks; even-K ties go to foreground."""
    if not predictions:
        raise ValidationError("kshot_vote needs at least one prediction")
    dims = tuple(predictions[0].shape)
    for p in predictions:
        if tuple(p.shape) != dims:
            raise ShapeError("all predictions must share dimensions")
    k = len(predictions)
    votes = torch.stack([p.to(torch.int64) for p in predictions]).sum(dim=0)
    return (2 * votes >= k).to(torch.uint8)
