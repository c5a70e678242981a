"""Spatial correction of high-level correlation volumes.

Large-stride features localize poorly, so the deepest volumes (stages 3 and
4) are refined before aggregation. A volume [L, h, w, h', w'] is viewed as a
pseudo feature map with batch L, spatial dims (h, w), and h'w' channels. Two
residual corrections follow: a depth-wise convolution over (h, w) sharpens
each support position's response locally, then a layer-normalized MLP across
the h'w' channel axis redistributes mass over support positions globally.
Both residual branches start zero-initialized, so a fresh unit is the
identity map and training departs from the raw cosine volumes.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .correlation import Correlation4D
from .errors import ContractError, ShapeError, ValidationError

CORRECTED_STAGES = (3, 4)


def to_pseudo_feature(volume: Tensor) -> Tensor:
    """Reshape [L, h, w, h', w'] to [L, h'*w', h, w].

    Bijective: entry (l, y, x, y', x') lands at (l, y'*w' + x', y, x).
    """
    if volume.ndim != 5:
        raise ShapeError(f"expected a 5D volume, got {tuple(volume.shape)}")
    L, h, w, hs, ws = volume.shape
    return volume.permute(0, 3, 4, 1, 2).reshape(L, hs * ws, h, w)


def from_pseudo_feature(pseudo: Tensor, support_dims: tuple[int, int]) -> Tensor:
    """Inverse of :func:`to_pseudo_feature`; bit-exact round trip."""
    if pseudo.ndim != 4:
        raise ShapeError(f"expected a 4D pseudo feature, got {tuple(pseudo.shape)}")
    hs, ws = support_dims
    L, c, h, w = pseudo.shape
    if c != hs * ws:
        raise ShapeError(f"pseudo-channel count {c} does not match support dims {support_dims}")
    return pseudo.reshape(L, hs, ws, h, w).permute(0, 3, 4, 1, 2)


class SpatialCorrectionUnit(nn.Module):
    """Local + global residual correction for one stage's volumes.

    A unit is bound to the support grid (h', w') it serves; stages 3 and 4
    get separate units because their channel widths differ.
    """

    def __init__(
        self,
        support_dims: tuple[int, int],
        kernel_size: int = 3,
        mlp_ratio: int = 4,
        seed: int = 0,
    ):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ValidationError(f"depth-wise kernel size must be odd, got {kernel_size}")
        self.support_dims = (int(support_dims[0]), int(support_dims[1]))
        self.kernel_size = kernel_size
        width = self.support_dims[0] * self.support_dims[1]
        hidden = mlp_ratio * width
        gen = torch.Generator().manual_seed(seed)

        self.depthwise_kernel = nn.Parameter(torch.zeros(width, 1, kernel_size, kernel_size))
        self.norm_weight = nn.Parameter(torch.ones(width))
        self.norm_bias = nn.Parameter(torch.zeros(width))
        self.mlp_in_weight = nn.Parameter(torch.randn(hidden, width, generator=gen) / width**0.5)
        self.mlp_in_bias = nn.Parameter(torch.zeros(hidden))
        # Zero-initialized output projection keeps the unit an identity map at start.
        self.mlp_out_weight = nn.Parameter(torch.zeros(width, hidden))
        self.mlp_out_bias = nn.Parameter(torch.zeros(width))

    @property
    def width(self) -> int:
        return self.support_dims[0] * self.support_dims[1]

    def _check_width(self, pseudo: Tensor):
        if pseudo.shape[1] != self.width:
            raise ShapeError(
                f"pseudo-channel count {pseudo.shape[1]} does not match unit width {self.width}"
            )

    def local_correct(self, pseudo: Tensor) -> Tensor:
        """x + DWConv(x): same-padded depth-wise convolution over (h, w)."""
        self._check_width(pseudo)
        kernel = self.depthwise_kernel.to(pseudo.dtype)
        residual = F.conv2d(pseudo, kernel, padding=self.kernel_size // 2, groups=self.width)
        return pseudo + residual

    def global_correct(self, pseudo: Tensor) -> Tensor:
        """x + MLP(LN(x)), applied along the support axis at each (l, y, x)."""
        self._check_width(pseudo)
        x = pseudo.permute(0, 2, 3, 1)  # [L, h, w, h'w']
        y = F.layer_norm(x, (self.width,), self.norm_weight.to(x.dtype), self.norm_bias.to(x.dtype))
        y = F.gelu(y @ self.mlp_in_weight.T.to(x.dtype) + self.mlp_in_bias.to(x.dtype))
        y = y @ self.mlp_out_weight.T.to(x.dtype) + self.mlp_out_bias.to(x.dtype)
        return pseudo + y.permute(0, 3, 1, 2)

    def correct(self, corr: Correlation4D) -> Correlation4D:
        """Refine one stage-3 or stage-4 volume; shape-preserving."""
        if corr.stage not in CORRECTED_STAGES:
            raise ContractError(f"spatial correction applies to stages {CORRECTED_STAGES}, got stage {corr.stage}")
        if corr.support_dims != self.support_dims:
            raise ShapeError(
                f"volume support dims {corr.support_dims} do not match unit dims {self.support_dims}"
            )
        pseudo = to_pseudo_feature(corr.tensor)
        pseudo = self.global_correct(self.local_correct(pseudo))
        return Correlation4D(from_pseudo_feature(pseudo, self.support_dims), stage=corr.stage)

    def forward(self, corr: Correlation4D) -> Correlation4D:
        return self.correct(corr)
