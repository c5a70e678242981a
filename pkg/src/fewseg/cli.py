"""Command-line entry points.

Commands: synth (write a synthetic dataset), train (fit one pattern group on
one fold), eval (metrics table over novel-fold episodes), predict (single
episode, mask raster out), patterns (list the seven guidance patterns).
Flag > config-file > default precedence; all randomness flows from --seed.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from .checkpoint import Checkpoint
from .config import RunConfig, apply_overrides, parse_config_file
from .encoder import StubEncoder, load_encoder_adapter
from .episodes import DatasetManifest, Episode, synth_generate
from .errors import FewsegError, ValidationError
from .patterns import REQUIRED_FIELDS, PatternTag
from .training import (
    EpisodeLoader,
    evaluate,
    load_model,
    train,
    write_metrics_report,
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fewseg", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--seed", type=int, help="master RNG seed")
    common.add_argument("--output", help="output directory")
    common.add_argument("--force", action="store_true", help="allow writing into a non-empty output")
    common.add_argument("--encoder", dest="encoder_kind", help="stub | adapter:<path>")

    sub = parser.add_subparsers(dest="command", required=True)
    p_synth = sub.add_parser("synth", parents=[common], help="generate a synthetic shapes dataset")
    p_synth.add_argument("--classes", type=int, default=8)
    p_synth.add_argument("--images-per-class", type=int, default=6)
    p_synth.add_argument("--image-size", type=int, default=64)

    p_train = sub.add_parser("train", parents=[common], help="train one pattern group on one fold")
    p_train.add_argument("--manifest", help="dataset manifest path")
    p_train.add_argument("--fold", type=int)

    p_eval = sub.add_parser("eval", parents=[common], help="evaluate on novel-fold episodes")
    p_eval.add_argument("--manifest", help="dataset manifest path")
    p_eval.add_argument("--checkpoint", help="trained checkpoint path")
    p_eval.add_argument("--fold", type=int)
    p_eval.add_argument("--pattern")
    p_eval.add_argument("--k", type=int)
    p_eval.add_argument("--episodes", type=int, help="evaluation episode count")

    p_pred = sub.add_parser("predict", parents=[common], help="predict one episode's mask")
    p_pred.add_argument("--manifest", help="dataset manifest path")
    p_pred.add_argument("--checkpoint", help="trained checkpoint path")
    p_pred.add_argument("--fold", type=int)
    p_pred.add_argument("--pattern")
    p_pred.add_argument("--k", type=int)
    p_pred.add_argument("--query-index", type=int, help="manifest row of the query record")
    p_pred.add_argument("--support-indices", help="comma-separated manifest rows for supports")
    p_pred.add_argument("--overlay", action="store_true", help="also write a red-overlay raster")

    sub.add_parser("patterns", help="list the seven guidance patterns")
    return parser


def _assemble_config(args) -> RunConfig:
    config = RunConfig()
    if getattr(args, "config", None):
        apply_overrides(config, parse_config_file(args.config))
    if getattr(args, "seed", None) is not None:
        config.train.rng_seed = args.seed
        config.train.encoder = replace(config.train.encoder, seed=args.seed)
        config.train.model = replace(config.train.model, seed=args.seed)
    for flag, attr in (
        ("manifest", "manifest_path"),
        ("checkpoint", "checkpoint_path"),
        ("output", "output_dir"),
        ("encoder_kind", "encoder_kind"),
        ("fold", "fold"),
        ("pattern", "pattern"),
        ("k", "k"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(config, attr, value)
    if getattr(args, "episodes", None) is not None:
        config.train.eval_episodes = args.episodes
    return config


def _prepare_output(config: RunConfig, force: bool) -> Path:
    if not config.output_dir:
        raise ValidationError("--output is required")
    out = Path(config.output_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise ValidationError(f"output directory {out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _build_encoder(config: RunConfig):
    if config.encoder_kind == "stub":
        return StubEncoder(config.train.encoder)
    path = config.encoder_kind.split(":", 1)[1]
    return load_encoder_adapter(path, {"embed_dim": config.train.encoder.embed_dim})


def _load_manifest(config: RunConfig) -> DatasetManifest:
    if not config.manifest_path:
        raise ValidationError("--manifest (or manifest_path in the config file) is required")
    return DatasetManifest.read(config.manifest_path)


def _cmd_synth(args, config: RunConfig) -> int:
    out = _prepare_output(config, args.force)
    manifest = synth_generate(
        seed=config.train.rng_seed,
        n_classes=args.classes,
        n_images_per_class=args.images_per_class,
        image_size=args.image_size,
        output_dir=out,
    )
    print(f"wrote {len(manifest.records)} records across {len(manifest.class_ids)} classes to {out}")
    return 0


def _cmd_train(args, config: RunConfig) -> int:
    config.validate()
    out = _prepare_output(config, args.force)
    manifest = _load_manifest(config)
    result = train(config.train, manifest, config.fold, encoder=_build_encoder(config), output_dir=out)
    losses = "\n".join(f"{i + 1},{loss:.6f}" for i, loss in enumerate(result.loss_history))
    (out / "losses.csv").write_text("step,loss\n" + losses + "\n", encoding="utf-8")
    print(f"trained {config.train.max_steps} steps; final loss {result.loss_history[-1]:.4f}")
    print(f"checkpoint: {out / 'final.ckpt'}")
    return 0


class _OraclePredictor:
    """Returns the ground truth; used to exercise the metrics harness."""

    skip_guidance = True

    def __call__(self, query_image, gt, guidances):
        return gt.clone()


def _cmd_eval(args, config: RunConfig) -> int:
    config.validate()
    out = _prepare_output(config, args.force)
    manifest = _load_manifest(config)
    predictor = None
    model = None
    if config.predictor == "oracle":
        predictor = _OraclePredictor()
    else:
        if not config.checkpoint_path:
            raise ValidationError("--checkpoint is required unless predictor=oracle")
        model = load_model(Checkpoint.load(config.checkpoint_path), encoder=_build_encoder(config))
    result = evaluate(
        model,
        manifest,
        config.fold,
        config.pattern,
        k=config.k,
        n_episodes=config.train.eval_episodes,
        rng_seed=config.train.rng_seed,
        n_folds=config.train.n_folds,
        predictor=predictor,
    )
    report = write_metrics_report(out / "metrics.csv", config.fold, config.pattern, config.k, result)
    print(f"fold {config.fold} pattern {config.pattern} k={config.k}: "
          f"miou {result.miou:.4f} fbiou {result.fb_iou:.4f}")
    print(f"report: {report}")
    return 0


def _cmd_predict(args, config: RunConfig) -> int:
    config.validate()
    out = _prepare_output(config, args.force)
    manifest = _load_manifest(config)
    if not config.checkpoint_path:
        raise ValidationError("--checkpoint is required")
    model = load_model(Checkpoint.load(config.checkpoint_path), encoder=_build_encoder(config))
    pattern = PatternTag(config.pattern)

    if args.query_index is not None:
        query = manifest.records[args.query_index]
        if args.support_indices:
            support_rows = [int(i) for i in args.support_indices.split(",")]
        else:
            support_rows = [
                i
                for i, r in enumerate(manifest.records)
                if r.class_id == query.class_id and i != args.query_index
            ][: config.k]
        episode = Episode(
            query=query,
            supports=[manifest.records[i] for i in support_rows],
            class_id=query.class_id,
            pattern=pattern,
            fold=config.fold,
        )
    else:
        from .episodes import sample_episode
        from .training import derive_seed

        episode = sample_episode(
            manifest, manifest.class_ids, config.k, derive_seed(config.train.rng_seed, "predict"),
            pattern, config.fold,
        )

    loader = EpisodeLoader(model.image_size, model.encoder)
    query_image, _ = loader.query_pair(episode)
    mask = model.predict_kshot(query_image, loader.guidances(episode, query_image))

    mask_arr = (mask.numpy().astype(np.uint8)) * 255
    Image.fromarray(mask_arr, mode="L").save(out / "prediction.png")
    if args.overlay:
        rgb = (query_image.permute(1, 2, 0).numpy() * 255).astype(np.uint8).copy()
        fg = mask.numpy() > 0
        rgb[fg] = (0.5 * rgb[fg] + 0.5 * np.array([255, 0, 0])).astype(np.uint8)
        Image.fromarray(rgb, mode="RGB").save(out / "overlay.png")
    print(f"wrote {out / 'prediction.png'} (query: {episode.query.image_path})")
    return 0


def _cmd_patterns(args, config: RunConfig) -> int:
    for tag in PatternTag:
        fields = ", ".join(REQUIRED_FIELDS[tag])
        print(f"{tag.value}: requires {fields}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    config = _assemble_config(args)
    args.force = getattr(args, "force", False)
    handlers = {
        "synth": _cmd_synth,
        "train": _cmd_train,
        "eval": _cmd_eval,
        "predict": _cmd_predict,
        "patterns": _cmd_patterns,
    }
    try:
        return handlers[args.command](args, config)
    except FewsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
