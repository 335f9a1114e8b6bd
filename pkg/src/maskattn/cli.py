"""Command-line entry point.

Exit codes: 0 success, 2 usage/config error, 3 numeric failure. All
randomness flows from --seed through labeled child streams, so identical
invocations produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import analysis
from .attention import export_attention_weights
from .checkpoint import load_model, save_checkpoint
from .data import Clip, ingest_davis_dir, write_clip
from .errors import CheckpointError, ConfigError, ContractError, NumericError, ShapeError, UsageError
from .augment import ClipFrame, make_fake_sequence
from .model import DescriptorSegmenter, initial_mask_channels
from .propagation import propagate_clip, throughput_probe
from .rng import derive_rng
from .synthetic import generate_scene
from .tensor import Tensor, no_grad
from .training import (
    TrainConfig,
    eval_clips,
    evaluate_model,
    parse_train_config,
    predict_clip,
    train,
)

_USAGE_ERRORS = (ConfigError, ContractError, ShapeError, UsageError, CheckpointError, FileNotFoundError)


def _eval_threads() -> int:
    try:
        return max(1, int(os.environ.get("MASKATTN_THREADS", "1")))
    except ValueError:
        return 1


def _load_config(path, overrides) -> TrainConfig:
    if not os.path.isfile(path):
        raise ConfigError(f"config file {path!r} does not exist")
    with open(path) as fh:
        return parse_train_config(fh.read(), overrides)


def cmd_train(args) -> int:
    overrides = {
        "seed": args.seed,
        "regime": {"fake": "fake_sequence", "cyclic": "cyclic", None: None}[args.regime],
        "attention_mode": args.attention,
        "catch_all": args.catch_all,
    }
    config = _load_config(args.config, overrides)
    data_source = ingest_davis_dir(args.data) if args.data else None
    train(config, out_dir=args.out, data_source=data_source)
    return 0


def _clips_for_eval(args, config: TrainConfig | None = None):
    if args.data:
        ingested = ingest_davis_dir(args.data)
        clips = []
        for clip in ingested:
            frames = [
                ClipFrame(clip.frames[t], clip.gt_masks.get(t)) for t in range(len(clip.frames))
            ]
            frames[0] = ClipFrame(clip.frames[0], clip.first_masks)
            clips.append(frames)
        return clips
    if config is None:
        raise ConfigError("synthetic evaluation needs a checkpoint with a config")
    return eval_clips(config, args.synthetic, label=f"eval-seed{args.seed}")


def _synthetic_train_config(model: DescriptorSegmenter, args) -> TrainConfig:
    cfg = model.config
    h, w = cfg.input_size
    return TrainConfig(
        iterations=0,
        warmup_iters=0,
        decay_iter=0,
        seed=args.seed,
        model_dim=cfg.model_dim,
        num_heads=cfg.num_heads,
        encoder_layers=cfg.encoder_layers,
        decoder_layers=cfg.decoder_layers,
        bg_grid=cfg.bg_grid,
        height=h,
        width=w,
        attention_mode=cfg.attention_mode,
        catch_all=cfg.use_catch_all,
        clip_length=args.frames,
        n_objects=args.objects,
    )


def _score_clip(model, clip, window):
    preds = predict_clip(model, clip, window)
    gts = []
    for t, frame in enumerate(clip):
        if frame.masks is None:
            return None  # unlabeled frames cannot be scored
        gts.append(np.asarray(frame.masks) > 0.5)
    return analysis.j_and_f(preds, gts)


def cmd_eval(args) -> int:
    model = load_model(args.ckpt)
    config = _synthetic_train_config(model, args)
    clips = _clips_for_eval(args, config)
    if not clips:
        raise ConfigError("no clips to evaluate")
    windows = [int(w) for w in str(args.history).split(",")]
    threads = _eval_threads()
    rows = []
    for w in windows:
        if threads > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=threads) as pool:
                reports = list(pool.map(lambda c: _score_clip(model, c, w), clips))
        else:
            reports = [_score_clip(model, c, w) for c in clips]
        reports = [r for r in reports if r is not None]
        if not reports:
            raise ConfigError("no scorable clips (missing ground-truth masks)")
        mean_j = float(np.mean([r.mean_j for r in reports]))
        mean_f = float(np.mean([r.mean_f for r in reports]))
        jf = 0.5 * (mean_j + mean_f)
        rows.append((w, mean_j, mean_f, jf))
        print(f"history={w} J={mean_j:.4f} F={mean_f:.4f} J&F={jf:.4f}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        analysis.export_csv(os.path.join(args.out, "eval.csv"), ("history", "j", "f", "j_and_f"), rows)
    return 0


def cmd_propagate(args) -> int:
    model = load_model(args.ckpt)
    clips = ingest_davis_dir(args.clip)
    if not clips:
        raise ConfigError(f"no clips found under {args.clip!r}")
    os.makedirs(args.out, exist_ok=True)
    for clip in clips:
        frames = [Tensor(f) for f in clip.frames]
        with no_grad():
            result = propagate_clip(model, frames, Tensor(clip.first_masks), args.history)
        for t, ms in enumerate(result.mask_sets):
            probs = ms.object_channels().data
            for k in range(probs.shape[0]):
                path = os.path.join(args.out, f"{clip.name}_f{t:05d}_obj{k + 1}.pgm")
                analysis.export_heatmap(np.clip(probs[k], 0.0, 1.0), path)
    return 0


def _collect_descriptors(model, clips, window):
    descs, labels = [], []
    for ci, clip in enumerate(clips):
        frames = [Tensor(f.image) for f in clip]
        with no_grad():
            result = propagate_clip(model, frames, Tensor(clip[0].masks), window)
        for ds in result.descriptor_sets:
            fg = ds.foreground.data
            for k in range(fg.shape[0]):
                descs.append(fg[k])
                labels.append(f"clip{ci:03d}_obj{k + 1}")
    return np.stack(descs), labels


def cmd_retrieve(args) -> int:
    model = load_model(args.ckpt)
    config = _synthetic_train_config(model, args)
    clips = _clips_for_eval(args, config)
    descs, labels = _collect_descriptors(model, clips, args.history)
    curve = analysis.pr_curve(analysis.descriptor_distances(descs), labels)
    os.makedirs(args.out, exist_ok=True)
    analysis.export_csv(
        os.path.join(args.out, "pr_curve.csv"),
        ("recall", "precision"),
        list(zip(curve.recalls, curve.precisions)),
    )
    print(f"queries={curve.n_queries} singletons_excluded={curve.n_singletons}")
    return 0


def cmd_project(args) -> int:
    model = load_model(args.ckpt)
    config = _synthetic_train_config(model, args)
    clips = _clips_for_eval(args, config)
    descs, labels = _collect_descriptors(model, clips, args.history)
    projected, components, variance = analysis.pca_project(descs, d=2)
    os.makedirs(args.out, exist_ok=True)
    analysis.export_csv(
        os.path.join(args.out, "projection.csv"),
        ("label", "x", "y"),
        [(lab, p[0], p[1]) for lab, p in zip(labels, projected)],
    )
    analysis.export_csv(
        os.path.join(args.out, "explained_variance.csv"),
        ("component", "variance"),
        list(enumerate(variance)),
    )
    return 0


def cmd_inspect_attn(args) -> int:
    model = load_model(args.ckpt)
    cfg = model.config
    if not 0 <= args.layer < cfg.encoder_layers:
        raise ConfigError(f"layer {args.layer} out of range [0, {cfg.encoder_layers})")
    if args.frame:
        if not args.masks:
            raise ConfigError("--frame needs --masks with the object id map")
        from .imageio import read_pgm, read_ppm

        image = read_ppm(args.frame)
        ids = read_pgm(args.masks)
        n_obj = int(ids.max())
        if n_obj < 1:
            raise ConfigError("mask id map names no objects")
        masks = np.stack([(ids == k + 1).astype(np.float64) for k in range(n_obj)])
    else:
        rng = derive_rng(args.seed, "inspect-attn")
        scene = generate_scene(rng, cfg.input_size[0], cfg.input_size[1], args.objects)
        image, masks = scene.image, scene.object_masks

    layer = model.encoder[args.layer].cross
    with no_grad():
        feats = model.extract_features(Tensor(image))
        chans = initial_mask_channels(Tensor(masks), cfg.bg_grid)
        from .model import downsample_mask, init_descriptors

        factor = chans.data.shape[1] // feats.f8.data.shape[1]
        masks8 = downsample_mask(chans, factor) if factor > 1 else chans
        c, h8, w8 = feats.f8.data.shape
        desc = init_descriptors(feats.f8, masks8)
        tokens = feats.f8.reshape(c, h8 * w8).T
        attn_mask = masks8.reshape(chans.data.shape[0], h8 * w8)
        logits = export_attention_weights(layer, desc, tokens, attn_mask, args.head)
    os.makedirs(args.out, exist_ok=True)
    data = logits.data
    lo, hi = data.min(), data.max()
    span = hi - lo if hi > lo else 1.0
    for q in range(data.shape[0]):
        heat = ((data[q] - lo) / span).reshape(h8, w8)
        analysis.export_heatmap(heat, os.path.join(args.out, f"attn_h{args.head}_q{q:02d}.pgm"))
    return 0


def cmd_probe_throughput(args) -> int:
    model = load_model(args.ckpt)
    cfg = model.config
    rng = derive_rng(args.seed, "probe")
    scene = generate_scene(rng, cfg.input_size[0], cfg.input_size[1], args.objects)
    from .augment import AugmentationRanges

    clip = make_fake_sequence(scene, args.frames, AugmentationRanges(), rng)
    frames = [Tensor(f.image) for f in clip]
    windows = [int(w) for w in str(args.history).split(",")]
    rows = throughput_probe(model, frames, Tensor(clip[0].masks), windows, runs=args.runs)
    for r in rows:
        print(f"history={r['window']} fps={r['fps']:.2f} bytes_per_frame={r['bytes_per_frame']}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        analysis.export_csv(
            os.path.join(args.out, "throughput.csv"),
            ("history", "fps", "bytes_per_frame"),
            [(r["window"], r["fps"], r["bytes_per_frame"]) for r in rows],
        )
    return 0


def cmd_gen_data(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    from .augment import AugmentationRanges

    for i in range(args.n):
        rng = derive_rng(args.seed, f"gen-data/{i}")
        scene = generate_scene(rng, args.size, args.size, args.objects)
        clip = make_fake_sequence(scene, args.frames, AugmentationRanges(), rng)
        write_clip(
            args.out,
            f"clip{i:03d}",
            [f.image for f in clip],
            [(np.asarray(f.masks) > 0.5).astype(np.float64) for f in clip],
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskattn",
        description="Soft-masked attention video object re-segmentation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True, help="key=value config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--regime", choices=["fake", "cyclic"], default=None)
    p.add_argument("--attention", choices=["soft", "hard", "none"], default=None)
    p.add_argument("--catch-all", dest="catch_all", choices=["on", "off"], default=None)
    p.add_argument("--data", default=None, help="optional clip directory (frames/ + masks/)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (J&F)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", default=None, help="clip directory; omit for synthetic clips")
    p.add_argument("--synthetic", type=int, default=20, help="number of synthetic clips")
    p.add_argument("--history", default="7", help="history length or comma list")
    p.add_argument("--frames", type=int, default=3)
    p.add_argument("--objects", type=int, default=2)
    p.add_argument("--seed", type=int, default=1000)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("propagate", help="propagate first-frame masks over clips")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--clip", required=True, help="clip directory (frames/ + masks/)")
    p.add_argument("--out", required=True)
    p.add_argument("--history", type=int, default=7)
    p.set_defaults(func=cmd_propagate)

    p = sub.add_parser("retrieve", help="descriptor retrieval PR curve")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--synthetic", type=int, default=8)
    p.add_argument("--history", type=int, default=7)
    p.add_argument("--frames", type=int, default=3)
    p.add_argument("--objects", type=int, default=2)
    p.add_argument("--seed", type=int, default=1000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("project", help="2-D PCA projection of descriptors")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--synthetic", type=int, default=8)
    p.add_argument("--history", type=int, default=7)
    p.add_argument("--frames", type=int, default=3)
    p.add_argument("--objects", type=int, default=2)
    p.add_argument("--seed", type=int, default=1000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("inspect-attn", help="export one head's attention logits as heatmaps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--frame", default=None, help="PPM image (needs --masks)")
    p.add_argument("--masks", default=None, help="PGM object id map")
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--head", type=int, required=True)
    p.add_argument("--seed", type=int, default=0, help="synthetic scene seed when no --frame")
    p.add_argument("--objects", type=int, default=2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inspect_attn)

    p = sub.add_parser("probe-throughput", help="frames/s and history bytes per history length")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--history", default="1,4,7,10")
    p.add_argument("--frames", type=int, default=12)
    p.add_argument("--objects", type=int, default=2)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_probe_throughput)

    p = sub.add_parser("gen-data", help="generate synthetic clips in ingestible layout")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=3)
    p.add_argument("--objects", type=int, default=2)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_gen_data)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
