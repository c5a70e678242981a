"""Text injection and multi-scale 4D correlation aggregation.

The text correlation map is broadcast to a 4D volume and concatenated onto
the deepest visual volume (no learned parameters), then a top-down pyramid of
center-pivot 4D convolutions squeezes every stage to 128 channels with a 2x2
support grid. Averaging the trailing support cell turns each volume into an
ordinary 2D query feature map for the decoder.

A center-pivot convolution is the sparse factorization of a full 4D kernel:
one 2D kernel slides over query dims while the support offset is pinned to
the center, the other slides over support dims with the query offset pinned,
and their sum equals a dense 4D convolution whose kernel vanishes everywhere
off those two slices.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .correlation import Correlation4D
from .errors import ContractError, ShapeError

AGGREGATION_STAGES = (2, 3, 4)


def broadcast_vt(vt_map: Tensor, support_dims: tuple[int, int]) -> Correlation4D:
    """Broadcast a [h, w] text correlation map to a single-channel 4D volume."""
    if vt_map.ndim != 2:
        raise ShapeError(f"expected a [h, w] map, got {tuple(vt_map.shape)}")
    hs, ws = support_dims
    volume = vt_map[None, :, :, None, None].expand(1, *vt_map.shape, hs, ws)
    return Correlation4D(volume.contiguous(), stage=4)


def inject(c4: Correlation4D, cvt4: Correlation4D) -> Correlation4D:
    """Concatenate the broadcast text volume after the visual channels."""
    if c4.tensor.shape[1:] != cvt4.tensor.shape[1:]:
        raise ShapeError(
            f"geometry mismatch: visual {tuple(c4.tensor.shape[1:])} vs text {tuple(cvt4.tensor.shape[1:])}"
        )
    return Correlation4D(torch.cat([c4.tensor, cvt4.tensor.to(c4.tensor.dtype)], dim=0), stage=c4.stage)


class CenterPivotConv4d(nn.Module):
    """Sparse 4D convolution: query-pair kernel + support-pair kernel.

    Strides are given per 2D pair. Same-padding on both pairs, so each pair's
    output extent is ceil(input / stride).
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 3,
        query_stride: tuple[int, int] = (1, 1),
        support_stride: tuple[int, int] = (1, 1),
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ContractError(f"kernel size must be odd, got {kernel_size}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.query_stride = tuple(query_stride)
        self.support_stride = tuple(support_stride)
        scale = (2 * in_channels * kernel_size**2) ** -0.5
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.query_kernel = nn.Parameter(torch.randn(*shape, generator=generator) * scale)
        self.support_kernel = nn.Parameter(torch.randn(*shape, generator=generator) * scale)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 5:
            raise ShapeError(f"expected [C, h, w, h', w'], got {tuple(x.shape)}")
        if x.shape[0] != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} input channels, got {x.shape[0]}")
        pad = self.kernel_size // 2
        sq, ss = self.query_stride, self.support_stride

        # Query-pair kernel, evaluated at the strided support-center offsets.
        pruned = x[:, :, :, :: ss[0], :: ss[1]]
        c, h, w, hs2, ws2 = pruned.shape
        flat = pruned.permute(3, 4, 0, 1, 2).reshape(hs2 * ws2, c, h, w)
        out_q = F.conv2d(flat, self.query_kernel.to(x.dtype), stride=sq, padding=pad)
        h2, w2 = out_q.shape[-2:]
        out_q = out_q.reshape(hs2, ws2, self.out_channels, h2, w2).permute(2, 3, 4, 0, 1)

        # Support-pair kernel, evaluated at the strided query-center offsets.
        pruned = x[:, :: sq[0], :: sq[1], :, :]
        c, h2b, w2b, hs, ws = pruned.shape
        flat = pruned.permute(1, 2, 0, 3, 4).reshape(h2b * w2b, c, hs, ws)
        out_s = F.conv2d(flat, self.support_kernel.to(x.dtype), stride=ss, padding=pad)
        hs2b, ws2b = out_s.shape[-2:]
        out_s = out_s.reshape(h2b, w2b, self.out_channels, hs2b, ws2b).permute(2, 0, 1, 3, 4)

        return out_q + out_s


class _ConvBlock(nn.Module):
    """Center-pivot conv followed by group normalization and ReLU."""

    def __init__(self, in_channels, out_channels, kernel_size, support_stride, num_groups, generator):
        super().__init__()
        self.conv = CenterPivotConv4d(
            in_channels,
            out_channels,
            kernel_size,
            query_stride=(1, 1),
            support_stride=support_stride,
            generator=generator,
        )
        self.num_groups = num_groups
        self.norm_weight = nn.Parameter(torch.ones(out_channels))
        self.norm_bias = nn.Parameter(torch.zeros(out_channels))

    def forward(self, x: Tensor) -> Tensor:
        y = self.conv(x)
        y = F.group_norm(
            y[None], self.num_groups, self.norm_weight.to(y.dtype), self.norm_bias.to(y.dtype)
        )[0]
        return F.relu(y)


def _halvings_to_two(dim: int) -> int:
    steps = 0
    while dim > 2:
        dim = -(-dim // 2)
        steps += 1
    return steps


def _upsample_query(volume: Tensor, dims: tuple[int, int]) -> Tensor:
    """Bilinear resize of the query pair, support pair untouched."""
    c, h, w, u, v = volume.shape
    flat = volume.permute(3, 4, 0, 1, 2).reshape(u * v, c, h, w)
    flat = F.interpolate(flat, size=dims, mode="bilinear", align_corners=False)
    return flat.reshape(u, v, c, *dims).permute(2, 3, 4, 0, 1)


class CorrelationAggregator(nn.Module):
    """Top-down pyramid over the stage volumes.

    Per stage, stacked center-pivot blocks reduce the support pair to 2x2
    (stride 2 per reduction step, at least two blocks). Deeper results are
    bilinearly upsampled on the query pair, projected channel-wise, added
    into the next stage, and passed through one stride-1 mixing block before
    compression. Stage 4 is expected to already carry the injected text
    channel.
    """

    def __init__(
        self,
        in_channels: dict[int, int],
        support_dims: dict[int, tuple[int, int]],
        mid_channels: int = 64,
        out_channels: int = 128,
        num_groups: int = 4,
        kernel_size: int = 3,
        seed: int = 0,
    ):
        super().__init__()
        missing = [s for s in AGGREGATION_STAGES if s not in in_channels or s not in support_dims]
        if missing:
            raise ContractError(f"aggregator needs stages {AGGREGATION_STAGES}, missing {missing}")
        self.in_channels = dict(in_channels)
        self.out_channels = out_channels
        gen = torch.Generator().manual_seed(seed)

        self.squeeze = nn.ModuleDict()
        for stage in AGGREGATION_STAGES:
            hs, ws = support_dims[stage]
            steps_h, steps_w = _halvings_to_two(hs), _halvings_to_two(ws)
            n_blocks = max(2, steps_h, steps_w)
            blocks = []
            for b in range(n_blocks):
                c_in = in_channels[stage] if b == 0 else mid_channels
                c_out = out_channels if b == n_blocks - 1 else mid_channels
                stride = (2 if b < steps_h else 1, 2 if b < steps_w else 1)
                blocks.append(_ConvBlock(c_in, c_out, kernel_size, stride, num_groups, gen))
            self.squeeze[str(stage)] = nn.Sequential(*blocks)

        self.merge_weight = nn.ParameterDict()
        self.merge_bias = nn.ParameterDict()
        self.mix = nn.ModuleDict()
        for stage in (3, 2):
            self.merge_weight[str(stage)] = nn.Parameter(
                torch.randn(out_channels, out_channels, generator=gen) / out_channels**0.5
            )
            self.merge_bias[str(stage)] = nn.Parameter(torch.zeros(out_channels))
            self.mix[str(stage)] = _ConvBlock(out_channels, out_channels, kernel_size, (1, 1), num_groups, gen)

    def _project(self, stage: int, volume: Tensor) -> Tensor:
        w = self.merge_weight[str(stage)].to(volume.dtype)
        b = self.merge_bias[str(stage)].to(volume.dtype)
        return torch.einsum("oc,chwuv->ohwuv", w, volume) + b[:, None, None, None, None]

    def forward(self, corr: dict[int, Correlation4D]) -> dict[int, Tensor]:
        missing = [s for s in AGGREGATION_STAGES if s not in corr]
        if missing:
            raise ContractError(f"missing correlation stages {missing}")
        for stage in AGGREGATION_STAGES:
            if corr[stage].num_channels != self.in_channels[stage]:
                raise ShapeError(
                    f"stage {stage}: expected {self.in_channels[stage]} channels "
                    f"(stage 4 must include the injected text channel), got {corr[stage].num_channels}"
                )

        volumes: dict[int, Tensor] = {}
        current = self.squeeze["4"](corr[4].tensor)
        volumes[4] = current
        for stage in (3, 2):
            squeezed = self.squeeze[str(stage)](corr[stage].tensor)
            guided = _upsample_query(current, corr[stage].query_dims)
            if guided.shape[-2:] != squeezed.shape[-2:]:
                guided = guided.expand(*guided.shape[:-2], *squeezed.shape[-2:])
            current = self.mix[str(stage)](squeezed + self._project(stage, guided))
            volumes[stage] = current

        return {stage: vol.mean(dim=(-2, -1)) for stage, vol in volumes.items()}
