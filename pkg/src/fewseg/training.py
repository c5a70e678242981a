"""Supervision, the episodic training loop, and evaluation.

Training minimizes cross-entropy plus soft Dice on the foreground
probability (equal weights, Dice smoothing 1). Episodes stream from the
base classes of the requested fold; the encoder stays frozen throughout.
Evaluation accumulates per-class intersection/union counters over novel-fold
episodes, with K-shot handled by pixel voting over K one-shot predictions.
"""

from __future__ import annotations

import dataclasses
import hashlib
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .checkpoint import Checkpoint
from .config import TrainConfig
from .encoder import StubEncoder, VisionLanguageEncoder
from .episodes import DatasetManifest, Episode, load_image, load_mask, sample_episode, split_folds
from .errors import ContractError, TrainingDivergedError, ValidationError
from .model import FewShotSegmenter
from .patterns import GuidanceSet, PatternTag, RawSupport, kshot_vote, normalize_guidance, tight_box

DICE_SMOOTHING = 1.0

# Which pattern each parameter group trains on, and which group serves each pattern.
GROUP_TRAIN_PATTERN = {
    "image-only": PatternTag.IMAGE,
    "mask-group": PatternTag.MASK,
    "class-aware-group": PatternTag.CLASS_MASK,
}
PATTERN_GROUP = {
    PatternTag.IMAGE: "image-only",
    PatternTag.MASK: "mask-group",
    PatternTag.BOX: "mask-group",
    PatternTag.CLASS_IMAGE: "class-aware-group",
    PatternTag.CLASS_MASK: "class-aware-group",
    PatternTag.CLASS_BOX: "class-aware-group",
    PatternTag.TEXT: "class-aware-group",
}


def segmentation_loss(logits: Tensor, gt: Tensor) -> Tensor:
    """Mean pixel cross-entropy plus soft Dice on the foreground probability."""
    if logits.ndim != 3 or logits.shape[0] != 2:
        raise ValidationError(f"expected [2, H, W] logits, got {tuple(logits.shape)}")
    if gt.shape != logits.shape[1:]:
        raise ValidationError("ground truth dims must match logits dims")
    if not torch.isfinite(logits).all():
        raise ValidationError("logits contain non-finite values")
    g = gt.to(logits.dtype)
    ce = F.cross_entropy(logits[None], g[None].long())
    p = logits.softmax(dim=0)[1]
    dice = 1.0 - (2.0 * (p * g).sum() + DICE_SMOOTHING) / (p.sum() + g.sum() + DICE_SMOOTHING)
    return ce + dice


@dataclass
class FoldMetrics:
    """Mergeable intersection/union accumulators (exact integer counts)."""

    class_intersection: dict[int, int] = field(default_factory=dict)
    class_union: dict[int, int] = field(default_factory=dict)
    fg_intersection: int = 0
    fg_union: int = 0
    bg_intersection: int = 0
    bg_union: int = 0

    def add(self, pred: Tensor, gt: Tensor, class_id: int) -> None:
        if pred.shape != gt.shape:
            raise ValidationError("prediction and ground truth dims differ")
        p = pred > 0.5
        g = gt > 0.5
        inter = int((p & g).sum())
        union = int((p | g).sum())
        self.class_intersection[class_id] = self.class_intersection.get(class_id, 0) + inter
        self.class_union[class_id] = self.class_union.get(class_id, 0) + union
        self.fg_intersection += inter
        self.fg_union += union
        self.bg_intersection += int((~p & ~g).sum())
        self.bg_union += int((~p | ~g).sum())

    @staticmethod
    def merged(a: "FoldMetrics", b: "FoldMetrics") -> "FoldMetrics":
        out = FoldMetrics(
            class_intersection=dict(a.class_intersection),
            class_union=dict(a.class_union),
            fg_intersection=a.fg_intersection + b.fg_intersection,
            fg_union=a.fg_union + b.fg_union,
            bg_intersection=a.bg_intersection + b.bg_intersection,
            bg_union=a.bg_union + b.bg_union,
        )
        for cid, inter in b.class_intersection.items():
            out.class_intersection[cid] = out.class_intersection.get(cid, 0) + inter
        for cid, union in b.class_union.items():
            out.class_union[cid] = out.class_union.get(cid, 0) + union
        return out

    def per_class_iou(self) -> dict[int, float]:
        ious = {}
        for cid, union in sorted(self.class_union.items()):
            if union == 0:
                warnings.warn(f"class {cid} has zero union; excluded from mIoU", stacklevel=2)
                continue
            ious[cid] = self.class_intersection[cid] / union
        return ious

    def miou(self) -> float:
        ious = self.per_class_iou()
        if not ious:
            raise ValidationError("no classes with non-zero union")
        return sum(ious.values()) / len(ious)

    def fb_iou(self) -> float:
        fg = self.fg_intersection / self.fg_union if self.fg_union else 0.0
        bg = self.bg_intersection / self.bg_union if self.bg_union else 0.0
        return (fg + bg) / 2.0


def derive_seed(*parts) -> int:
    """Stable seed from a tuple of ints/strings; reproducible across processes."""
    entropy = [
        int.from_bytes(hashlib.sha256(p.encode("utf-8")).digest()[:4], "little")
        if isinstance(p, str)
        else int(p)
        for p in parts
    ]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


class EpisodeLoader:
    """Loads episode tensors at the working resolution, with a small cache."""

    def __init__(self, image_size: int, encoder: VisionLanguageEncoder, cache_size: int = 512):
        self.image_size = image_size
        self.encoder = encoder
        self.cache_size = cache_size
        self._cache: dict[tuple[str, str], Tensor] = {}

    def _cached(self, kind: str, path: str) -> Tensor:
        key = (kind, path)
        if key not in self._cache:
            if len(self._cache) >= self.cache_size:
                self._cache.clear()
            loader = load_image if kind == "image" else load_mask
            self._cache[key] = loader(path, self.image_size)
        return self._cache[key].clone()

    def query_pair(self, episode: Episode) -> tuple[Tensor, Tensor]:
        return (
            self._cached("image", episode.query.image_path),
            self._cached("mask", episode.query.mask_path),
        )

    def guidance(self, episode: Episode, support_index: int, query_image: Tensor) -> GuidanceSet:
        record = episode.supports[support_index]
        pattern = episode.pattern
        raw = RawSupport(class_name=record.class_name if (pattern.class_aware) else None)
        if pattern is not PatternTag.TEXT:
            raw.image = self._cached("image", record.image_path)
        if pattern in (PatternTag.MASK, PatternTag.CLASS_MASK):
            raw.mask = self._cached("mask", record.mask_path)
        elif pattern in (PatternTag.BOX, PatternTag.CLASS_BOX):
            raw.box = tight_box(self._cached("mask", record.mask_path))
        return normalize_guidance(pattern, raw, query_image, self.encoder)

    def guidances(self, episode: Episode, query_image: Tensor) -> list[GuidanceSet]:
        return [self.guidance(episode, i, query_image) for i in range(len(episode.supports))]


def presample_episodes(
    manifest: DatasetManifest,
    classes: list[int],
    pattern: PatternTag,
    n: int,
    k: int,
    rng_seed: int,
    fold: int = 0,
) -> list[Episode]:
    """Deterministic episode pool; seed i of the pool is derived from (rng_seed, i)."""
    return [
        sample_episode(manifest, classes, k, derive_seed(rng_seed, i), pattern, fold=fold)
        for i in range(n)
    ]


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    loss_history: list[float]
    best_val_miou: float | None = None


def train(
    config: TrainConfig,
    manifest: DatasetManifest,
    fold: int,
    encoder: VisionLanguageEncoder | None = None,
    output_dir: str | Path | None = None,
) -> TrainResult:
    """Optimize all non-encoder parameters on base-fold episodes.

    The episode stream is deterministic in config.rng_seed. When
    config.episode_pool > 0, that many episodes are pre-sampled and cycled,
    which is how the small overfit recipes run.
    """
    config.validate()
    torch.manual_seed(config.rng_seed)
    encoder = encoder or StubEncoder(config.encoder)
    model = FewShotSegmenter(encoder, config.image_size, config.model)
    params = model.trainable_parameters()
    if config.optimizer != "adamw":
        raise ValidationError(f"unsupported optimizer {config.optimizer!r}")
    optimizer = torch.optim.AdamW(params, lr=config.learning_rate, weight_decay=config.weight_decay)

    base_classes, _ = split_folds(manifest.class_ids, fold, config.n_folds)
    pattern = GROUP_TRAIN_PATTERN[config.pattern_group]
    loader = EpisodeLoader(config.image_size, encoder)

    pool: list[Episode] | None = None
    if config.episode_pool > 0:
        pool = presample_episodes(
            manifest, base_classes, pattern, config.episode_pool, 1, config.rng_seed, fold
        )

    output_dir = Path(output_dir) if output_dir is not None else None
    loss_history: list[float] = []
    best_val = None

    def snapshot(step: int) -> Checkpoint:
        meta = {
            "config": dataclasses.asdict(config),
            "step": step,
            "fold": fold,
            "pattern_group": config.pattern_group,
        }
        return Checkpoint.from_module(model, meta)

    for step in range(config.max_steps):
        optimizer.zero_grad()
        total = None
        for j in range(config.batch_size):
            if pool is not None:
                episode = pool[(step * config.batch_size + j) % len(pool)]
            else:
                episode = sample_episode(
                    manifest, base_classes, 1, derive_seed(config.rng_seed, step, j), pattern, fold
                )
            query_image, gt = loader.query_pair(episode)
            guidance = loader.guidance(episode, 0, query_image)
            loss = segmentation_loss(model(query_image, guidance), gt)
            (loss / config.batch_size).backward()
            total = loss.detach() if total is None else total + loss.detach()
        mean_loss = float(total) / config.batch_size
        if not np.isfinite(mean_loss):
            raise TrainingDivergedError(f"loss became non-finite at step {step}: {mean_loss}")
        optimizer.step()
        loss_history.append(mean_loss)

        step_number = step + 1
        if output_dir and config.checkpoint_every and step_number % config.checkpoint_every == 0:
            snapshot(step_number).save(output_dir / f"step{step_number:06d}.ckpt")
        if config.val_episodes > 0 and step_number % config.val_every == 0:
            val = evaluate(
                model,
                manifest,
                fold,
                pattern,
                k=1,
                n_episodes=config.val_episodes,
                rng_seed=derive_seed(config.rng_seed, "val"),
                classes=base_classes,
                n_folds=config.n_folds,
            )
            if best_val is None or val.miou > best_val:
                best_val = val.miou
                if output_dir:
                    snapshot(step_number).save(output_dir / "best.ckpt")

    final = snapshot(config.max_steps)
    if output_dir:
        final.save(output_dir / "final.ckpt")
    return TrainResult(checkpoint=final, loss_history=loss_history, best_val_miou=best_val)


@dataclass
class EvalResult:
    miou: float
    fb_iou: float
    per_class: dict[int, float]
    metrics: FoldMetrics
    n_episodes: int


def evaluate(
    model: FewShotSegmenter,
    manifest: DatasetManifest,
    fold: int,
    pattern: PatternTag | str,
    k: int = 1,
    n_episodes: int = 1000,
    rng_seed: int = 0,
    classes: list[int] | None = None,
    n_folds: int = 4,
    predictor=None,
) -> EvalResult:
    """mIoU / FB-IoU over episodes sampled from the fold's novel classes.

    ``classes`` overrides the class pool (used for training-set metrics).
    ``predictor`` replaces the model: a callable
    (query_image, gt, guidances) -> mask used by the oracle harness hook.
    """
    pattern = PatternTag(pattern)
    if classes is None:
        _, classes = split_folds(manifest.class_ids, fold, n_folds)
    if model is None and predictor is None:
        raise ContractError("evaluate needs a model or a predictor")
    image_size = model.image_size if model is not None else None
    encoder = model.encoder if model is not None else StubEncoder()
    if image_size is None:
        # Oracle predictors never consult the encoder; use the native raster size.
        first = load_mask(manifest.records[0].mask_path)
        image_size = first.shape[-1]
    loader = EpisodeLoader(image_size, encoder)

    metrics = FoldMetrics()
    episodes = presample_episodes(manifest, classes, pattern, n_episodes, k, rng_seed, fold)
    for episode in episodes:
        query_image, gt = loader.query_pair(episode)
        if predictor is not None:
            guidances = None if getattr(predictor, "skip_guidance", False) else loader.guidances(episode, query_image)
            pred = predictor(query_image, gt, guidances)
        elif k == 1:
            pred = model.predict(query_image, loader.guidance(episode, 0, query_image))
        else:
            pred = model.predict_kshot(query_image, loader.guidances(episode, query_image))
        metrics.add(pred, gt, episode.class_id)

    return EvalResult(
        miou=metrics.miou(),
        fb_iou=metrics.fb_iou(),
        per_class=metrics.per_class_iou(),
        metrics=metrics,
        n_episodes=n_episodes,
    )


def load_model(checkpoint: Checkpoint, encoder: VisionLanguageEncoder | None = None) -> FewShotSegmenter:
    """Rebuild a model from a checkpoint's config and tensors."""
    from .config import train_config_from_dict

    config = train_config_from_dict(checkpoint.meta.get("config", {}))
    encoder = encoder or StubEncoder(config.encoder)
    model = FewShotSegmenter(encoder, config.image_size, config.model)
    state = checkpoint.state_dict()
    missing, unexpected = model.load_state_dict(state, strict=False)
    unexpected = [k for k in unexpected]
    if unexpected:
        raise ValidationError(f"checkpoint carries unknown tensors: {unexpected[:3]}")
    return model


def write_metrics_report(
    path: str | Path, fold: int, pattern: PatternTag | str, k: int, result: EvalResult
) -> Path:
    """Comma-separated report: one row per class plus miou / fbiou summary rows."""
    pattern = PatternTag(pattern).value
    lines = ["fold,pattern,k,class_id,iou"]
    for cid, iou in sorted(result.per_class.items()):
        lines.append(f"{fold},{pattern},{k},{cid},{iou:.4f}")
    lines.append(f"{fold},{pattern},{k},miou,{result.miou:.4f}")
    lines.append(f"{fold},{pattern},{k},fbiou,{result.fb_iou:.4f}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
