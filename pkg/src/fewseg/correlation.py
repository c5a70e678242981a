"""Cosine correlation construction.

Two flavors feed the aggregation stack: a 2D map between the query's dense
visual embedding and the guidance embedding, and per-layer 4D volumes between
query and support (plus masked-object) features. All entries are
ReLU-clipped cosines, so freshly built volumes live in [0, 1]; learned
refinement downstream may leave that range.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .encoder import FeaturePyramid
from .errors import ShapeError, ValidationError

NORM_FLOOR = 1e-8  # norms are clamped here so zero vectors correlate to 0, not NaN


@dataclass
class Correlation4D:
    """A stacked 4D cost volume between query and support spatial grids."""

    tensor: Tensor  # [L, h, w, h', w']
    stage: int

    def __post_init__(self):
        if self.tensor.ndim != 5:
            raise ShapeError(f"correlation volume must be 5D [L, h, w, h', w'], got {tuple(self.tensor.shape)}")

    @property
    def num_channels(self) -> int:
        return self.tensor.shape[0]

    @property
    def query_dims(self) -> tuple[int, int]:
        return self.tensor.shape[1], self.tensor.shape[2]

    @property
    def support_dims(self) -> tuple[int, int]:
        return self.tensor.shape[3], self.tensor.shape[4]


def _unit_columns(feature: Tensor) -> Tensor:
    """Flatten [c, h, w] to unit-norm columns [c, h*w]; zero columns stay zero."""
    flat = feature.reshape(feature.shape[0], -1)
    return flat / flat.norm(dim=0, keepdim=True).clamp_min(NORM_FLOOR)


def vt_correlation(f_v: Tensor, f_t: Tensor) -> Tensor:
    """ReLU cosine between every dense-embedding position and the text vector.

    Returns a [h, w] map with entries in [0, 1].
    """
    if f_v.ndim != 3 or f_t.ndim != 1:
        raise ShapeError("expected f_v [c, h, w] and f_t [c]")
    if f_v.shape[0] != f_t.shape[0]:
        raise ShapeError(f"channel mismatch: f_v has {f_v.shape[0]}, f_t has {f_t.shape[0]}")
    t_norm = f_t.norm()
    if float(t_norm) == 0.0:
        raise ValidationError("text embedding has zero norm")
    h, w = f_v.shape[-2:]
    cos = (_unit_columns(f_v) * (f_t / t_norm)[:, None]).sum(dim=0)
    return cos.clamp_min(0).reshape(h, w)


def vv_layer_correlation(f_q: Tensor, f_s: Tensor, f_o: Tensor) -> Tensor:
    """Per-layer 4D volume: channel 0 query-vs-support, channel 1 query-vs-object.

    The object feature comes from the support image masked at full resolution,
    so zero columns (masked-out regions) correlate to 0 by convention.
    """
    if not (f_q.ndim == f_s.ndim == f_o.ndim == 3):
        raise ShapeError("expected [c, h, w] feature maps")
    if not (f_q.shape[0] == f_s.shape[0] == f_o.shape[0]):
        raise ShapeError(
            f"channel mismatch: query {f_q.shape[0]}, support {f_s.shape[0]}, object {f_o.shape[0]}"
        )
    if f_s.shape[-2:] != f_o.shape[-2:]:
        raise ShapeError("support and object features must share spatial dims")
    h, w = f_q.shape[-2:]
    hs, ws = f_s.shape[-2:]
    q = _unit_columns(f_q)
    pair = torch.stack(
        [
            (q.T @ _unit_columns(f_s)).clamp_min(0),
            (q.T @ _unit_columns(f_o)).clamp_min(0),
        ]
    )
    return pair.reshape(2, h, w, hs, ws)


def build_correlation_pyramid(
    query: FeaturePyramid, support: FeaturePyramid, object_: FeaturePyramid
) -> dict[int, Correlation4D]:
    """Stack per-layer volumes for stages 2-4, layer order preserved.

    Each stage yields 2 * L_i channels: layer l occupies channels
    (2l-2, 2l-1) as its (support, object) pair.
    """
    volumes: dict[int, Correlation4D] = {}
    for stage in (2, 3, 4):
        n_layers = query.layers_in_stage(stage)
        if not (n_layers == support.layers_in_stage(stage) == object_.layers_in_stage(stage)):
            raise ShapeError(f"stage {stage}: pyramids disagree on layer count")
        per_layer = [
            vv_layer_correlation(
                query.layer_features[(stage, layer)],
                support.layer_features[(stage, layer)],
                object_.layer_features[(stage, layer)],
            )
            for layer in range(1, n_layers + 1)
        ]
        volumes[stage] = Correlation4D(torch.cat(per_layer, dim=0), stage=stage)
    return volumes
