import pytest
import torch

from fewseg.config import EncoderConfig
from fewseg.encoder import (
    EmbeddingSource,
    StubEncoder,
    downsample_mask,
    load_encoder_adapter,
    masked_mean,
)
from fewseg.errors import DegenerateMaskError, ShapeError, ValidationError


@pytest.fixture(scope="module")
def encoder():
    return StubEncoder(EncoderConfig(seed=7))


class TestEncodeImage:
    def test_zero_image_shape_contract(self, encoder):
        pyr = encoder.encode_image(torch.zeros(3, 64, 64))
        assert {i: pyr.stage_dims(i) for i in (1, 2, 3, 4)} == {
            1: (16, 16), 2: (8, 8), 3: (4, 4), 4: (2, 2)
        }
        assert pyr.dense_embedding.shape[-2:] == (2, 2)
        for t in pyr.stage_features.values():
            assert torch.isfinite(t).all()

    def test_deterministic_bit_identical(self, encoder):
        img = torch.rand(3, 64, 64, generator=torch.Generator().manual_seed(0))
        a, b = encoder.encode_image(img), encoder.encode_image(img)
        assert torch.equal(a.dense_embedding, b.dense_embedding)
        for key in a.layer_features:
            assert torch.equal(a.layer_features[key], b.layer_features[key])

    def test_same_seed_same_weights_across_instances(self):
        img = torch.rand(3, 64, 64, generator=torch.Generator().manual_seed(1))
        a = StubEncoder(EncoderConfig(seed=3)).encode_image(img)
        b = StubEncoder(EncoderConfig(seed=3)).encode_image(img)
        assert torch.equal(a.stage_features[4], b.stage_features[4])

    def test_horizontal_flip_equivariance(self, encoder):
        # Holds exactly for 1x1 projections plus pooling when dims stay even.
        for seed in range(5):
            img = torch.rand(3, 64, 64, generator=torch.Generator().manual_seed(seed))
            plain = encoder.encode_image(img)
            flipped = encoder.encode_image(torch.flip(img, dims=[-1]))
            assert torch.allclose(
                flipped.stage_features[4], torch.flip(plain.stage_features[4], dims=[-1]), atol=1e-6
            )
            assert torch.allclose(
                flipped.dense_embedding, torch.flip(plain.dense_embedding, dims=[-1]), atol=1e-6
            )

    def test_ceil_division_for_canonical_400(self, encoder):
        pyr = encoder.encode_image(torch.zeros(3, 400, 400))
        assert {i: pyr.stage_dims(i) for i in (1, 2, 3, 4)} == {
            1: (100, 100), 2: (50, 50), 3: (25, 25), 4: (13, 13)
        }

    def test_non_divisible_dims_rejected(self, encoder):
        with pytest.raises(ShapeError):
            encoder.encode_image(torch.zeros(3, 65, 64))

    def test_nan_input_rejected(self, encoder):
        img = torch.zeros(3, 64, 64)
        img[0, 0, 0] = float("nan")
        with pytest.raises(ValidationError):
            encoder.encode_image(img)


class TestEncodeText:
    def test_deterministic_per_string(self, encoder):
        assert torch.equal(encoder.encode_text("cat").vector, encoder.encode_text("cat").vector)

    def test_distinct_strings_distinct_vectors(self, encoder):
        a = encoder.encode_text("cat").vector
        b = encoder.encode_text("dog").vector
        assert float((a * b).sum()) < 1.0 - 1e-4

    def test_unit_norm(self, encoder):
        for name in ("cat", "dog", "striped_red_disk"):
            assert float(encoder.encode_text(name).vector.norm()) == pytest.approx(1.0, abs=1e-6)

    def test_source_tag(self, encoder):
        assert encoder.encode_text("cat").source is EmbeddingSource.CLASS_TEXT

    def test_empty_string_rejected(self, encoder):
        with pytest.raises(ValidationError):
            encoder.encode_text("")


class TestPooledEmbedding:
    def test_constant_feature_pools_to_constant(self):
        feature = torch.full((5, 3, 3), 2.5)
        mask = torch.zeros(3, 3)
        mask[1, 1] = 1
        pooled = masked_mean(feature, mask)
        assert torch.allclose(pooled, torch.full((5,), 2.5))

    def test_all_ones_mask_equals_global(self, encoder):
        feature = torch.rand(64, 2, 2, generator=torch.Generator().manual_seed(2))
        with_mask = encoder.pooled_embedding(feature, torch.ones(2, 2))
        without = encoder.pooled_embedding(feature, None)
        assert torch.equal(with_mask.vector, without.vector)
        assert with_mask.source is EmbeddingSource.MASKED_POOL
        assert without.source is EmbeddingSource.GLOBAL_POOL

    def test_single_pixel_mask_selects_that_pixel(self):
        feature = torch.rand(4, 2, 2, generator=torch.Generator().manual_seed(3))
        mask = torch.zeros(2, 2)
        mask[0, 1] = 1
        assert torch.equal(masked_mean(feature, mask), feature[:, 0, 1])

    def test_convex_hull_invariant(self):
        gen = torch.Generator().manual_seed(4)
        for _ in range(10):
            feature = torch.randn(6, 4, 4, generator=gen)
            mask = (torch.rand(4, 4, generator=gen) > 0.5).float()
            if mask.sum() == 0:
                mask[0, 0] = 1
            pooled = masked_mean(feature, mask)
            selected = feature.reshape(6, -1)[:, mask.reshape(-1) > 0.5]
            assert bool((pooled >= selected.min(dim=1).values - 1e-6).all())
            assert bool((pooled <= selected.max(dim=1).values + 1e-6).all())

    def test_empty_downsampled_mask_raises(self, encoder):
        feature = torch.rand(64, 2, 2)
        # One lone pixel away from the nearest-neighbor sample points vanishes.
        mask = torch.zeros(64, 64)
        mask[1, 1] = 1
        with pytest.raises(DegenerateMaskError):
            encoder.pooled_embedding(feature, mask)

    def test_projection_dimension(self, encoder):
        out = encoder.pooled_embedding(torch.rand(64, 2, 2))
        assert out.vector.shape == (64,)

    def test_channel_mismatch_rejected(self, encoder):
        with pytest.raises(ShapeError):
            encoder.pooled_embedding(torch.rand(7, 2, 2))


def test_downsample_mask_preserves_binarity():
    mask = (torch.rand(64, 64, generator=torch.Generator().manual_seed(5)) > 0.5).float()
    down = downsample_mask(mask, (8, 8))
    assert set(down.unique().tolist()) <= {0.0, 1.0}


def test_adapter_loading(tmp_path):
    adapter = tmp_path / "tiny_adapter.py"
    adapter.write_text(
        "from fewseg.config import EncoderConfig\n"
        "from fewseg.encoder import StubEncoder\n"
        "def build_encoder(options):\n"
        "    return StubEncoder(EncoderConfig(seed=99, embed_dim=options.get('embed_dim', 64)))\n"
    )
    encoder = load_encoder_adapter(adapter, {"embed_dim": 32})
    assert encoder.embed_dim == 32
    pyr = encoder.encode_image(torch.zeros(3, 64, 64))
    assert pyr.dense_embedding.shape[0] == 32


def test_adapter_missing_builder_rejected(tmp_path):
    bad = tmp_path / "bad_adapter.py"
    bad.write_text("x = 1\n")
    with pytest.raises(ValidationError):
        load_encoder_adapter(bad)
