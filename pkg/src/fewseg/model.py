"""End-to-end network: correlation construction through cross-modal decoding.

The encoder is frozen (the stub exposes buffers only); everything trainable
lives in the correction units, the aggregator, the embedding interaction
unit, and the decoder. All tensors are per-episode (no batch dimension);
the trainer accumulates gradients across a batch of episodes.
"""

from __future__ import annotations

import torch
from torch import Tensor, nn

from .aggregation import CorrelationAggregator, broadcast_vt, inject
from .config import EncoderConfig, ModelConfig
from .correction import SpatialCorrectionUnit
from .correlation import build_correlation_pyramid, vt_correlation
from .decoder import CrossModalDecoder, EmbeddingInteraction, predict_mask
from .encoder import StubEncoder, VisionLanguageEncoder
from .errors import ShapeError
from .patterns import GuidanceSet, kshot_vote


def stage_dims(image_size: int) -> dict[int, tuple[int, int]]:
    """Spatial dims per stage for a square input (stride 4, then ceil-halving)."""
    dims = {}
    side = image_size // 4
    for stage in (1, 2, 3, 4):
        dims[stage] = (side, side)
        side = -(-side // 2)
    return dims


class FewShotSegmenter(nn.Module):
    """Query segmentation guided by one normalized support set."""

    def __init__(
        self,
        encoder: VisionLanguageEncoder | None = None,
        image_size: int = 64,
        config: ModelConfig | None = None,
    ):
        super().__init__()
        cfg = config or ModelConfig()
        self.config = cfg
        self.image_size = image_size
        self.encoder = encoder if encoder is not None else StubEncoder(EncoderConfig(seed=cfg.seed))

        dims = stage_dims(image_size)
        layers = self.encoder.layers_per_stage
        corr_channels = {stage: 2 * layers[stage - 2] for stage in (2, 3, 4)}
        corr_channels[4] += 1  # injected text channel

        self.correction3 = SpatialCorrectionUnit(
            dims[3], cfg.correction_kernel_size, cfg.correction_mlp_ratio, seed=cfg.seed + 3
        )
        self.correction4 = SpatialCorrectionUnit(
            dims[4], cfg.correction_kernel_size, cfg.correction_mlp_ratio, seed=cfg.seed + 4
        )
        self.aggregation = CorrelationAggregator(
            in_channels=corr_channels,
            support_dims={s: dims[s] for s in (2, 3, 4)},
            mid_channels=cfg.agg_mid_channels,
            out_channels=cfg.agg_out_channels,
            num_groups=cfg.agg_num_groups,
            seed=cfg.seed + 10,
        )
        self.interaction = EmbeddingInteraction(
            embed_dim=self.encoder.embed_dim,
            out_dim=cfg.interaction_dim,
            n_heads=cfg.interaction_heads,
            seed=cfg.seed + 20,
        )
        self.decoder = CrossModalDecoder(
            fused_dim=cfg.interaction_dim,
            agg_dim=cfg.agg_out_channels,
            stage1_channels=self.encoder.stage_channels[0],
            stage2_channels=self.encoder.stage_channels[1],
            shallow_dim=cfg.decoder_shallow_channels,
            num_groups=cfg.agg_num_groups,
            seed=cfg.seed + 30,
        )

    def forward(self, query_image: Tensor, guidance: GuidanceSet) -> Tensor:
        """Segmentation logits [2, H, W] for one episode."""
        if query_image.shape[-2:] != guidance.support_image.shape[-2:]:
            raise ShapeError("query and support images must share spatial dims")

        # Everything up to the correction units is parameter-free.
        with torch.no_grad():
            query = self.encoder.encode_image(query_image)
            support = self.encoder.encode_image(guidance.support_image)
            object_ = self.encoder.encode_image(guidance.object_image)
            corr = build_correlation_pyramid(query, support, object_)
            cvt = vt_correlation(query.dense_embedding, guidance.guidance_embedding.vector)

        corr[3] = self.correction3.correct(corr[3])
        corr[4] = self.correction4.correct(corr[4])
        corr[4] = inject(corr[4], broadcast_vt(cvt, corr[4].support_dims))

        aggregated = self.aggregation(corr)
        fused = self.interaction(query.dense_embedding, guidance.guidance_embedding.vector)
        return self.decoder(
            fused,
            aggregated,
            query.stage_features[1],
            query.stage_features[2],
            out_size=query_image.shape[-2:],
        )

    @torch.no_grad()
    def predict(self, query_image: Tensor, guidance: GuidanceSet) -> Tensor:
        return predict_mask(self(query_image, guidance))

    @torch.no_grad()
    def predict_kshot(self, query_image: Tensor, guidances: list[GuidanceSet]) -> Tensor:
        """K independent one-shot predictions combined by pixel voting."""
        return kshot_vote([self.predict(query_image, g) for g in guidances])

    def trainable_parameters(self):
        """Parameters the optimizer may touch; the encoder contributes none."""
        encoder_params = (
            {id(p) for p in self.encoder.parameters()} if isinstance(self.encoder, nn.Module) else set()
        )
        return [p for p in self.parameters() if id(p) not in encoder_params]
