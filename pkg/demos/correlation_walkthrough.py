"""Walk through the correlation stack on a toy episode.

Shows each intermediate: the feature pyramid, the per-stage 4D cosine
volumes, spatial correction of the deep stages, text-channel injection, and
the aggregated 2D feature maps the decoder consumes.

Run: python3 demos/correlation_walkthrough.py
"""

import torch

from fewseg import (
    CorrelationAggregator,
    SpatialCorrectionUnit,
    StubEncoder,
    broadcast_vt,
    build_correlation_pyramid,
    inject,
    vt_correlation,
)

torch.manual_seed(0)
encoder = StubEncoder()

# A toy episode: the "support object" is the support image under its mask.
query = torch.rand(3, 64, 64)
support = torch.rand(3, 64, 64)
mask = torch.zeros(64, 64)
mask[16:48, 16:48] = 1.0

q_pyr = encoder.encode_image(query)
s_pyr = encoder.encode_image(support)
o_pyr = encoder.encode_image(support * mask)

print("feature pyramid (query):")
for stage in (1, 2, 3, 4):
    print(f"  stage {stage}: {tuple(q_pyr.stage_features[stage].shape)}")
print(f"  dense embedding: {tuple(q_pyr.dense_embedding.shape)}")

corr = build_correlation_pyramid(q_pyr, s_pyr, o_pyr)
print("\nraw correlation volumes (ReLU cosine, so entries stay in [0, 1]):")
for stage in (2, 3, 4):
    t = corr[stage].tensor
    print(f"  stage {stage}: {tuple(t.shape)}  range [{t.min():.3f}, {t.max():.3f}]")

# The deep stages localize poorly at stride 16/32; correct them in place.
correct3 = SpatialCorrectionUnit(corr[3].support_dims, seed=3)
correct4 = SpatialCorrectionUnit(corr[4].support_dims, seed=4)
corr[3] = correct3.correct(corr[3])
corr[4] = correct4.correct(corr[4])
print("\nafter spatial correction (zero-initialized residuals, identical for now):")
print(f"  stage 4 range [{corr[4].tensor.min():.3f}, {corr[4].tensor.max():.3f}]")

# Inject the guidance correlation as one extra channel of the deepest volume.
f_t = encoder.encode_text("striped_red_disk")
vt_map = vt_correlation(q_pyr.dense_embedding, f_t.vector)
corr[4] = inject(corr[4], broadcast_vt(vt_map, corr[4].support_dims))
print(f"\ntext correlation map {tuple(vt_map.shape)} injected -> stage 4 channels {corr[4].num_channels}")

aggregator = CorrelationAggregator(
    in_channels={s: corr[s].num_channels for s in (2, 3, 4)},
    support_dims={s: corr[s].support_dims for s in (2, 3, 4)},
)
features = aggregator(corr)
print("\naggregated query features (support pair squeezed to 2x2, then averaged):")
for stage in (2, 3, 4):
    print(f"  stage {stage}: {tuple(features[stage].shape)}")
