"""Configuration dataclasses and the flat key=value config file format.

Precedence when assembling a run: command-line flags > config file > the
dataclass defaults below.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ValidationError

PATTERN_GROUPS = ("image-only", "mask-group", "class-aware-group")


@dataclass
class EncoderConfig:
    """Settings for the deterministic stub encoder.

    The stub needs only a 64-bit seed; channel widths and the number of
    layer-wise projections per stage are exposed because no canonical values
    exist for them.
    """

    seed: int = 0
    stage_channels: tuple[int, int, int, int] = (16, 32, 64, 64)
    layers_per_stage: tuple[int, int, int] = (2, 2, 2)  # stages 2, 3, 4
    embed_dim: int = 64


@dataclass
class ModelConfig:
    """Architecture hyperparameters not dictated by the encoder."""

    correction_kernel_size: int = 3
    correction_mlp_ratio: int = 4
    agg_mid_channels: int = 64
    agg_out_channels: int = 128
    agg_num_groups: int = 4
    interaction_heads: int = 4
    interaction_dim: int = 128
    decoder_shallow_channels: int = 32
    seed: int = 0


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    batch_size: int = 16
    image_size: int = 400
    max_steps: int = 300
    rng_seed: int = 0
    pattern_group: str = "class-aware-group"
    optimizer: str = "adamw"
    weight_decay: float = 0.01
    encoder_frozen: bool = True
    n_folds: int = 4
    eval_episodes: int = 1000
    episode_pool: int = 0  # 0 streams fresh episodes; N > 0 cycles a fixed pool
    checkpoint_every: int = 0  # 0 disables periodic checkpoints
    val_episodes: int = 0  # 0 disables best-by-validation tracking
    val_every: int = 50
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> "TrainConfig":
        # 400 is the canonical working resolution even though 400/32 = 12.5;
        # the encoder's ceil-division pooling keeps its stage shapes defined.
        if self.image_size % 32 != 0 and self.image_size != 400:
            raise ValidationError(
                f"image_size must be divisible by 32 (or the canonical 400), got {self.image_size}"
            )
        if self.pattern_group not in PATTERN_GROUPS:
            raise ValidationError(
                f"pattern_group must be one of {PATTERN_GROUPS}, got {self.pattern_group!r}"
            )
        if self.optimizer != "adamw":
            raise ValidationError(f"unsupported optimizer {self.optimizer!r}")
        if self.batch_size < 1 or self.max_steps < 0:
            raise ValidationError("batch_size must be >= 1 and max_steps >= 0")
        if self.encoder_frozen is not True:
            raise ValidationError("the encoder is frozen by contract; encoder_frozen must stay true")
        return self


@dataclass
class RunConfig:
    """One CLI invocation: a TrainConfig plus dataset and task bindings."""

    train: TrainConfig = field(default_factory=TrainConfig)
    manifest_path: str = ""
    fold: int = 0
    pattern: str = "class_mask"
    k: int = 1
    encoder_kind: str = "stub"  # "stub" or "adapter:<path>"
    output_dir: str = ""
    checkpoint_path: str = ""
    predictor: str = "model"  # "model" or "oracle" (testing hook)
    overlay: bool = False

    def validate(self) -> "RunConfig":
        from .patterns import PatternTag  # deferred to avoid an import cycle

        self.train.validate()
        try:
            PatternTag(self.pattern)
        except ValueError:
            names = ", ".join(p.value for p in PatternTag)
            raise ValidationError(f"pattern must be one of: {names}; got {self.pattern!r}") from None
        if self.k < 1:
            raise ValidationError(f"k must be >= 1, got {self.k}")
        if self.fold < 0 or self.fold >= self.train.n_folds:
            raise ValidationError(f"fold must be in [0, {self.train.n_folds}), got {self.fold}")
        if not (self.encoder_kind == "stub" or self.encoder_kind.startswith("adapter:")):
            raise ValidationError(f"encoder must be 'stub' or 'adapter:<path>', got {self.encoder_kind!r}")
        if self.predictor not in ("model", "oracle"):
            raise ValidationError(f"predictor must be 'model' or 'oracle', got {self.predictor!r}")
        return self


def train_config_from_dict(data: dict) -> TrainConfig:
    """Rebuild a TrainConfig from checkpoint metadata (inverse of asdict)."""
    data = dict(data)
    encoder = EncoderConfig(**{**data.pop("encoder", {})})
    model = ModelConfig(**{**data.pop("model", {})})
    encoder.stage_channels = tuple(encoder.stage_channels)
    encoder.layers_per_stage = tuple(encoder.layers_per_stage)
    known = {f.name for f in dataclasses.fields(TrainConfig)} - {"encoder", "model"}
    kwargs = {k: v for k, v in data.items() if k in known}
    return TrainConfig(encoder=encoder, model=model, **kwargs)


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Read a flat key=value file; '#' starts a comment, blank lines ignored."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _coerce(value: str, target_type: type):
    if target_type is bool:
        lowered = value.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValidationError(f"expected a boolean, got {value!r}")
    if target_type is int:
        return int(value)
    if target_type is float:
        return float(value)
    if target_type is tuple:
        return tuple(int(part) for part in value.split(","))
    return value


def apply_overrides(config: RunConfig, values: dict[str, str]) -> RunConfig:
    """Apply key=value overrides onto a RunConfig.

    Keys address RunConfig fields directly (``fold``, ``pattern``, ...),
    TrainConfig fields either bare or prefixed (``learning_rate`` or
    ``train.learning_rate``), and nested groups via ``encoder.<field>`` /
    ``model.<field>``.
    """
    run_fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    train_fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    enc_fields = {f.name: f for f in dataclasses.fields(EncoderConfig)}
    model_fields = {f.name: f for f in dataclasses.fields(ModelConfig)}

    for key, value in values.items():
        scope, _, name = key.rpartition(".")
        if scope == "encoder" and name in enc_fields:
            setattr(config.train.encoder, name, _coerce(value, type(getattr(config.train.encoder, name))))
        elif scope == "model" and name in model_fields:
            setattr(config.train.model, name, _coerce(value, type(getattr(config.train.model, name))))
        elif scope in ("", "train") and name in train_fields and name not in ("encoder", "model"):
            setattr(config.train, name, _coerce(value, type(getattr(config.train, name))))
        elif scope == "" and name in run_fields and name not in ("train",):
            setattr(config, name, _coerce(value, type(getattr(config, name))))
        else:
            raise ValidationError(f"unknown config key {key!r}")
    return config
