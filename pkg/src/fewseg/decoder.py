"""Cross-modal decoding: guidance-gated dense embedding, then a top-down path.

The embedding interaction unit turns the guidance vector into an
element-level gate over the query's dense visual embedding: the embedding
provides attention queries, the guidance vector provides a single key/value,
and the attention output (after a linear map) multiplies a reduced copy of
the embedding before two cascaded linear layers. The decoder then walks the
aggregated pyramid top-down, upsampling bilinearly, concatenating shallow
query features, and finishing with a two-channel linear head.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ShapeError, ValidationError


class EmbeddingInteraction(nn.Module):
    """Attention-derived gating of the dense query embedding by the guidance."""

    def __init__(
        self,
        embed_dim: int,
        out_dim: int = 128,
        n_heads: int = 4,
        attn_dim: int | None = None,
        seed: int = 0,
    ):
        super().__init__()
        attn_dim = attn_dim or embed_dim
        if attn_dim % n_heads != 0:
            raise ValidationError(f"attention width {attn_dim} must divide into {n_heads} heads")
        self.embed_dim = embed_dim
        self.out_dim = out_dim
        self.n_heads = n_heads
        self.attn_dim = attn_dim
        gen = torch.Generator().manual_seed(seed)

        def linear(n_out, n_in):
            layer = nn.Linear(n_in, n_out)
            with torch.no_grad():
                layer.weight.copy_(torch.randn(n_out, n_in, generator=gen) / math.sqrt(n_in))
                layer.bias.zero_()
            return layer

        self.q_proj = linear(attn_dim, embed_dim)
        self.k_proj = linear(attn_dim, embed_dim)
        self.v_proj = linear(attn_dim, embed_dim)
        self.attn_out = linear(attn_dim, attn_dim)
        self.gate_proj = linear(out_dim, attn_dim)
        self.reduce = linear(out_dim, embed_dim)
        self.out1 = linear(out_dim, out_dim)
        self.out2 = linear(out_dim, out_dim)

    def attention_gate(self, f_v: Tensor, f_t: Tensor) -> Tensor:
        """Per-position gate A_vt, shape [h*w, out_dim].

        With a single key/value the softmax is identically 1, so the gate is
        an affine image of the guidance vector broadcast over positions.
        """
        c, h, w = f_v.shape
        q = self.q_proj(f_v.reshape(c, h * w).T)  # [n, attn]
        k = self.k_proj(f_t)  # [attn]
        v = self.v_proj(f_t)
        n = q.shape[0]
        dh = self.attn_dim // self.n_heads
        q = q.reshape(n, self.n_heads, dh)
        k = k.reshape(self.n_heads, dh)
        v = v.reshape(self.n_heads, dh)
        scores = (q * k).sum(-1, keepdim=True) / math.sqrt(dh)  # [n, heads, 1]
        weights = torch.softmax(scores, dim=-1)  # single key: all ones
        attended = weights * v  # [n, heads, dh]
        attended = self.attn_out(attended.reshape(n, self.attn_dim))
        return self.gate_proj(attended)

    def forward(self, f_v: Tensor, f_t: Tensor) -> Tensor:
        if f_v.ndim != 3 or f_t.ndim != 1:
            raise ShapeError("expected f_v [c, h, w] and f_t [c]")
        if f_v.shape[0] != self.embed_dim or f_t.shape[0] != self.embed_dim:
            raise ShapeError(
                f"channel mismatch: unit built for {self.embed_dim}, "
                f"got f_v {f_v.shape[0]} and f_t {f_t.shape[0]}"
            )
        c, h, w = f_v.shape
        gate = self.attention_gate(f_v, f_t)
        reduced = self.reduce(f_v.reshape(c, h * w).T)
        fused = self.out2(self.out1(reduced * gate))
        return fused.T.reshape(self.out_dim, h, w)


class _ConvBlock2d(nn.Module):
    """Two same-padded 3x3 convolutions, each with group norm and ReLU."""

    def __init__(self, in_channels, out_channels, num_groups, generator):
        super().__init__()
        self.conv1 = _seeded_conv(in_channels, out_channels, generator)
        self.conv2 = _seeded_conv(out_channels, out_channels, generator)
        self.n1 = nn.GroupNorm(num_groups, out_channels)
        self.n2 = nn.GroupNorm(num_groups, out_channels)

    def forward(self, x: Tensor) -> Tensor:
        x = F.relu(self.n1(self.conv1(x[None])))
        x = F.relu(self.n2(self.conv2(x)))
        return x[0]


def _seeded_conv(in_channels, out_channels, generator, kernel_size=3):
    conv = nn.Conv2d(in_channels, out_channels, kernel_size, padding=kernel_size // 2)
    with torch.no_grad():
        fan_in = in_channels * kernel_size**2
        weight = torch.randn(conv.weight.shape, generator=generator) / math.sqrt(fan_in)
        conv.weight.copy_(weight)
        conv.bias.zero_()
    return conv


class CrossModalDecoder(nn.Module):
    """Top-down decoding of fused embedding, aggregated pyramid, and shallow features."""

    def __init__(
        self,
        fused_dim: int = 128,
        agg_dim: int = 128,
        stage1_channels: int = 16,
        stage2_channels: int = 32,
        shallow_dim: int = 32,
        num_groups: int = 4,
        seed: int = 0,
    ):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.shallow1 = _seeded_conv(stage1_channels, shallow_dim, gen, kernel_size=1)
        self.shallow2 = _seeded_conv(stage2_channels, shallow_dim, gen, kernel_size=1)
        self.block4 = _ConvBlock2d(fused_dim + agg_dim, 128, num_groups, gen)
        self.block3 = _ConvBlock2d(128 + agg_dim, 96, num_groups, gen)
        self.block2 = _ConvBlock2d(96 + agg_dim + shallow_dim, 64, num_groups, gen)
        self.block1 = _ConvBlock2d(64 + shallow_dim, 48, num_groups, gen)
        self.head = _seeded_conv(48, 2, gen, kernel_size=1)

    def forward(
        self,
        fused: Tensor,
        aggregated: dict[int, Tensor],
        f_q1: Tensor,
        f_q2: Tensor,
        out_size: tuple[int, int],
    ) -> Tensor:
        for stage in (2, 3, 4):
            if stage not in aggregated:
                raise ShapeError(f"aggregated features missing stage {stage}")
        if fused.shape[-2:] != aggregated[4].shape[-2:]:
            raise ShapeError("fused embedding dims must match stage-4 aggregated dims")
        if f_q2.shape[-2:] != aggregated[2].shape[-2:]:
            raise ShapeError("stage-2 shallow feature dims are inconsistent")

        x = self.block4(torch.cat([fused, aggregated[4]], dim=0))
        x = _upsample(x, aggregated[3].shape[-2:])
        x = self.block3(torch.cat([x, aggregated[3]], dim=0))
        x = _upsample(x, aggregated[2].shape[-2:])
        x = self.block2(torch.cat([x, aggregated[2], self.shallow2(f_q2[None])[0]], dim=0))
        x = _upsample(x, f_q1.shape[-2:])
        x = self.block1(torch.cat([x, self.shallow1(f_q1[None])[0]], dim=0))
        logits = self.head(x[None])[0]
        return _upsample(logits, out_size)


def _upsample(x: Tensor, size) -> Tensor:
    return F.interpolate(x[None], size=tuple(size), mode="bilinear", align_corners=False)[0]


def predict_mask(logits: Tensor) -> Tensor:
    """Per-pixel argmax over the 2-channel head; ties go to background."""
    if logits.ndim != 3 or logits.shape[0] != 2:
        raise ShapeError(f"expected [2, H, W] logits, got {tuple(logits.shape)}")
    return (logits[1] > logits[0]).to(torch.uint8)
