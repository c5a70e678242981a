"""Encoder contract and the deterministic stub implementation.

The rest of the pipeline consumes three things from an encoder: stage-wise
feature maps (strides 4, 8, 16, 32), layer-wise feature maps for stages 2-4,
and a dense visual embedding aligned with the text embedding space. A real
vision-language backbone provides these externally through the
:class:`VisionLanguageEncoder` protocol; the adapter is expected to expose its
value-path features as a dense per-position embedding (two 1x1 convolutions
replacing the attention-pool value and output projections). The stub below
stands in for it at desk scale: every weight is drawn from a single 64-bit
seed, so all outputs are bit-reproducible across runs.
"""

from __future__ import annotations

import hashlib
import importlib.util
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Protocol, runtime_checkable

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .config import EncoderConfig
from .errors import DegenerateMaskError, ShapeError, ValidationError

STAGES = (1, 2, 3, 4)
LAYERED_STAGES = (2, 3, 4)


class EmbeddingSource(str, Enum):
    CLASS_TEXT = "class_text"
    MASKED_POOL = "masked_pool"
    GLOBAL_POOL = "global_pool"


@dataclass
class TextEmbedding:
    """A guidance vector in the shared vision-language space."""

    vector: Tensor  # [embed_dim]
    source: EmbeddingSource


@dataclass
class FeaturePyramid:
    """Stage features, layer-wise features, and the dense visual embedding.

    Invariants: stage spatial dims halve (ceil) from one stage to the next,
    the dense embedding shares stage-4 dims, and stages 2-4 carry at least
    one layer feature each.
    """

    stage_features: dict[int, Tensor]
    layer_features: dict[tuple[int, int], Tensor]
    dense_embedding: Tensor

    def validate(self) -> "FeaturePyramid":
        for i in STAGES:
            if i not in self.stage_features:
                raise ShapeError(f"missing stage {i} feature")
        for i in (1, 2, 3):
            h, w = self.stage_features[i].shape[-2:]
            hn, wn = self.stage_features[i + 1].shape[-2:]
            if (hn, wn) != (-(-h // 2), -(-w // 2)):
                raise ShapeError(f"stage {i + 1} dims {(hn, wn)} are not ceil-half of stage {i} {(h, w)}")
        if self.dense_embedding.shape[-2:] != self.stage_features[4].shape[-2:]:
            raise ShapeError("dense embedding dims must match stage-4 dims")
        for i in LAYERED_STAGES:
            if self.layers_in_stage(i) < 1:
                raise ShapeError(f"stage {i} must expose at least one layer feature")
        return self

    def layers_in_stage(self, stage: int) -> int:
        return sum(1 for (i, _) in self.layer_features if i == stage)

    def stage_dims(self, stage: int) -> tuple[int, int]:
        h, w = self.stage_features[stage].shape[-2:]
        return h, w


@runtime_checkable
class VisionLanguageEncoder(Protocol):
    """Adapter seam for pretrained backbones; pooled_embedding has a default
    implementation in terms of the dense projection, see StubEncoder."""

    embed_dim: int

    def encode_image(self, image: Tensor) -> FeaturePyramid: ...

    def encode_text(self, class_name: str) -> TextEmbedding: ...

    def pooled_embedding(self, deep_feature: Tensor, mask: Tensor | None = None) -> TextEmbedding: ...


def masked_mean(feature: Tensor, mask: Tensor | None = None) -> Tensor:
    """Mean feature vector over the mask's foreground (all positions if None).

    The mask must already be at feature resolution; use a nearest-neighbor
    downsample beforehand so binarity survives. The result lies inside the
    per-channel convex hull of the selected feature vectors.
    """
    c = feature.shape[0]
    if mask is None:
        return feature.reshape(c, -1).mean(dim=1)
    if mask.shape != feature.shape[-2:]:
        raise ShapeError(f"mask dims {tuple(mask.shape)} do not match feature dims {tuple(feature.shape[-2:])}")
    selected = feature.reshape(c, -1)[:, mask.reshape(-1) > 0.5]
    if selected.shape[1] == 0:
        raise DegenerateMaskError("mask has no foreground pixels at feature resolution")
    return selected.mean(dim=1)


def downsample_mask(mask: Tensor, dims: tuple[int, int]) -> Tensor:
    """Nearest-neighbor resample of a binary mask; preserves {0, 1} values."""
    if tuple(mask.shape[-2:]) == tuple(dims):
        return mask
    out = F.interpolate(mask[None, None].float(), size=dims, mode="nearest")[0, 0]
    return out.to(mask.dtype)


class StubEncoder(nn.Module):
    """Frozen encoder built from fixed-seed 1x1 projections and pooling.

    Stage 1 projects the RGB input and average-pools 4x; each later stage
    projects the previous stage and pools 2x (ceil mode, so 25 -> 13).
    Layer features are extra 1x1 projections of their stage feature, and the
    dense embedding is a 1x1 projection of stage 4 into the text space.
    Keeping everything linear preserves spatial structure, which is what the
    correlation and decoding stages actually exercise.

    All weights are registered as buffers: the encoder exposes no trainable
    parameters, matching the frozen-backbone training contract.
    """

    def __init__(self, config: EncoderConfig | None = None):
        super().__init__()
        self.config = config or EncoderConfig()
        if len(self.config.stage_channels) != 4 or len(self.config.layers_per_stage) != 3:
            raise ValidationError("stage_channels needs 4 entries and layers_per_stage 3")
        if any(n < 1 for n in self.config.layers_per_stage):
            raise ValidationError("every stage needs at least one layer projection")
        self.seed = int(self.config.seed)
        self.embed_dim = int(self.config.embed_dim)
        gen = torch.Generator().manual_seed(self.seed)
        chans = (3, *self.config.stage_channels)
        for i in STAGES:
            self.register_buffer(f"stage_proj_{i}", _random_projection(chans[i], chans[i - 1], gen))
        for stage, n_layers in zip(LAYERED_STAGES, self.config.layers_per_stage):
            c = self.config.stage_channels[stage - 1]
            for layer in range(1, n_layers + 1):
                self.register_buffer(f"layer_proj_{stage}_{layer}", _random_projection(c, c, gen))
        self.register_buffer("embed_proj", _random_projection(self.embed_dim, chans[4], gen))

    @property
    def layers_per_stage(self) -> tuple[int, int, int]:
        return self.config.layers_per_stage

    @property
    def stage_channels(self) -> tuple[int, int, int, int]:
        return self.config.stage_channels

    def encode_image(self, image: Tensor) -> FeaturePyramid:
        if image.ndim != 3 or image.shape[0] != 3:
            raise ShapeError(f"expected a [3, H, W] image, got {tuple(image.shape)}")
        h, w = image.shape[-2:]
        if h % 4 != 0 or w % 4 != 0:
            raise ShapeError(f"image dims must be divisible by the stage-1 stride 4, got {h}x{w}")
        if not torch.isfinite(image).all():
            raise ValidationError("image contains non-finite values")

        stage_features: dict[int, Tensor] = {}
        x = image
        for i in STAGES:
            x = _project(x, getattr(self, f"stage_proj_{i}"))
            pool = 4 if i == 1 else 2
            x = F.avg_pool2d(x[None], kernel_size=pool, stride=pool, ceil_mode=True)[0]
            stage_features[i] = x

        layer_features: dict[tuple[int, int], Tensor] = {}
        for stage, n_layers in zip(LAYERED_STAGES, self.config.layers_per_stage):
            for layer in range(1, n_layers + 1):
                proj = getattr(self, f"layer_proj_{stage}_{layer}")
                layer_features[(stage, layer)] = _project(stage_features[stage], proj)

        dense = _project(stage_features[4], self.embed_proj)
        return FeaturePyramid(stage_features, layer_features, dense).validate()

    def encode_text(self, class_name: str) -> TextEmbedding:
        if not class_name:
            raise ValidationError("class name must be a non-empty string")
        digest = hashlib.sha256(class_name.encode("utf-8")).digest()
        text_seed = (int.from_bytes(digest[:8], "little") ^ (self.seed * 0x9E3779B97F4A7C15)) % 2**63
        gen = torch.Generator().manual_seed(text_seed)
        vec = torch.randn(self.embed_dim, generator=gen, dtype=torch.float64)
        vec = vec / vec.norm()
        return TextEmbedding(vec.to(self.embed_proj.dtype), EmbeddingSource.CLASS_TEXT)

    def pooled_embedding(self, deep_feature: Tensor, mask: Tensor | None = None) -> TextEmbedding:
        """Project the (masked) mean of a stage-4 feature into the text space.

        Raises DegenerateMaskError when the downsampled mask is empty; callers
        that must not fail fall back to the global pool.
        """
        if deep_feature.shape[0] != self.embed_proj.shape[1]:
            raise ShapeError(
                f"pooled_embedding expects {self.embed_proj.shape[1]} channels, got {deep_feature.shape[0]}"
            )
        if mask is not None:
            mask = downsample_mask(mask, deep_feature.shape[-2:])
        pooled = masked_mean(deep_feature, mask)
        vector = self.embed_proj @ pooled
        source = EmbeddingSource.GLOBAL_POOL if mask is None else EmbeddingSource.MASKED_POOL
        return TextEmbedding(vector, source)


def _random_projection(out_channels: int, in_channels: int, gen: torch.Generator) -> Tensor:
    return torch.randn(out_channels, in_channels, generator=gen) / in_channels**0.5


def _project(feature: Tensor, weight: Tensor) -> Tensor:
    return torch.einsum("oc,chw->ohw", weight.to(feature.dtype), feature)


def load_encoder_adapter(path: str | Path, options: dict | None = None):
    """Load an external encoder from a Python file defining build_encoder(options)."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"encoder adapter not found: {path}")
    spec = importlib.util.spec_from_file_location(f"fewseg_adapter_{path.stem}", path)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    if not hasattr(module, "build_encoder"):
        raise ValidationError(f"{path} does not define build_encoder(options)")
    encoder = module.build_encoder(dict(options or {}))
    if not isinstance(encoder, VisionLanguageEncoder):
        raise ValidationError(f"{path}: build_encoder returned an object missing the encoder interface")
    return encoder
