"""Command-line orchestration: synth, train, infer, eval.

Exit codes: 0 success, 2 configuration error, 3 numeric abort during
training, 4 I/O error. All values come from an optional ``--config`` file
(see :mod:`densespot.config`) with command-line flags taking precedence.
"""

from __future__ import annotations

import argparse
import glob
import os
import sys
import time
from dataclasses import fields

import torch

from .config import ConfigError, RunConfig, load_config, save_config
from .data import (
    ActionSet,
    SyntheticSpec,
    generate_synthetic,
    label_names,
    load_labels,
    load_labels_seconds,
    read_features,
    write_features,
    write_labels,
)
from .evaluation import ToleranceSet, average_map, write_results_csv
from .models import (
    ModelConfig,
    SpottingModel,
    config_from_manifest,
    load_checkpoint,
    load_state_into,
    read_manifest,
)
from .postprocess import PostprocConfig, load_detections, write_detections
from .targets import RadiusConfig
from .tiling import infer_video, plan_tiles
from .training import OptimConfig, TrainingDivergedError, TrainPhase, train
from .util import round_half_away
from .data import ChunkSpec


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="run configuration file (key = value with sections)")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out-dir")
    parser.add_argument("--threads", type=int)
    parser.add_argument("--deterministic", action="store_true", default=None,
                        help="single-threaded, reproducible outputs (zeroed wall-clock column)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="densespot", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic feature + label dataset")
    _add_common(p)
    p.add_argument("--num-videos", type=int)
    p.add_argument("--video-len-s", type=float)
    p.add_argument("--num-classes", type=int)
    p.add_argument("--rate-per-min", type=float, help="actions per class per minute")
    p.add_argument("--bump-width-s", type=float)
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--feature-dim", type=int)
    p.add_argument("--feature-rate-hz", type=float)

    p = sub.add_parser("train", help="train one phase (confidence or displacement)")
    _add_common(p)
    p.add_argument("--phase", required=True, choices=[ph.value for ph in TrainPhase])
    p.add_argument("--features-dir")
    p.add_argument("--labels-file")
    p.add_argument("--feature-rate-hz", type=float)
    p.add_argument("--chunk-len-s", type=float)
    p.add_argument("--trunk")
    p.add_argument("--base-width", type=int)
    p.add_argument("--mlp-width-hidden", type=int)
    p.add_argument("--mlp-width-out", type=int,
                   help="MLP output width; must equal --base-width for the u-net trunk")
    p.add_argument("--unet-levels", type=int)
    p.add_argument("--te-layers", type=int)
    p.add_argument("--te-embed", type=int)
    p.add_argument("--te-heads", type=int)
    p.add_argument("--r-c-s", type=float)
    p.add_argument("--r-d-s", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--sam-rho", type=float)
    p.add_argument("--mixup-alpha", type=float,
                   help="confidence phase only; explicit nonzero value errors for displacement")
    p.add_argument("--epochs", type=int)
    p.add_argument("--chunks-per-epoch", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("infer", help="tiled full-video inference into a detections file")
    _add_common(p)
    p.add_argument("--features-dir")
    p.add_argument("--conf-ckpt", required=True)
    p.add_argument("--disp-ckpt")
    p.add_argument("--no-displacements", action="store_true",
                   help="skip the displacement consolidation step (ablation)")
    p.add_argument("--stride-s", type=float)
    p.add_argument("--nms-window-s", type=float)
    p.add_argument("--keep-threshold", type=float)
    p.add_argument("--out", help="detections file (default <out-dir>/detections.json)")
    p.add_argument("--time", action="store_true", dest="time_flag",
                   help="print inference throughput in chunks/second")

    p = sub.add_parser("eval", help="score a detections file against labels")
    _add_common(p)
    p.add_argument("--detections", required=True)
    p.add_argument("--labels-file")
    p.add_argument("--preset", choices=["standard", "tight", "both"])
    p.add_argument("--out", help="results CSV (default <out-dir>/results.csv)")

    p = sub.add_parser("dump-config", help="write the merged configuration and exit")
    _add_common(p)
    p.add_argument("--out", help="config file to write (default stdout)")
    return parser


def merged_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    for f in fields(RunConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            setattr(cfg, f.name, value)
    return cfg


def _apply_runtime(cfg: RunConfig) -> None:
    if cfg.deterministic:
        torch.set_num_threads(1)
    elif cfg.threads > 0:
        torch.set_num_threads(cfg.threads)


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


def _load_sequences(features_dir, rate_hz):
    _require(os.path.isdir(features_dir), f"features directory {features_dir!r} does not exist")
    paths = sorted(glob.glob(os.path.join(features_dir, "*.feat"))) + sorted(
        glob.glob(os.path.join(features_dir, "*.csv"))
    )
    _require(bool(paths), f"no .feat or .csv feature files in {features_dir!r}")
    sequences = {}
    for path in paths:
        video_id = os.path.splitext(os.path.basename(path))[0]
        sequences[video_id] = read_features(path, rate_hz, video_id)
    return sequences


def cmd_synth(cfg: RunConfig, args) -> int:
    spec = SyntheticSpec(
        num_videos=cfg.num_videos,
        video_len_s=cfg.video_len_s,
        num_classes=cfg.num_classes,
        actions_per_class_per_min=cfg.rate_per_min,
        bump_width_s=cfg.bump_width_s,
        noise_sigma=cfg.noise_sigma,
        seed=cfg.seed,
        feature_dim=cfg.feature_dim,
        feature_rate_hz=cfg.feature_rate_hz,
    )
    videos = generate_synthetic(spec)
    features_dir = os.path.join(cfg.out_dir, "features")
    os.makedirs(features_dir, exist_ok=True)
    labels: dict[str, list[dict]] = {}
    counts = [0] * spec.num_classes
    for seq, actions in videos:
        write_features(os.path.join(features_dir, f"{seq.video_id}.feat"), seq.features)
        records = []
        for t, k in sorted(actions, key=lambda a: (a[0], a[1])):
            records.append(
                {"label": f"class_{k}", "position": int(round_half_away(t / spec.feature_rate_hz * 1000.0))}
            )
            counts[k] += 1
        labels[seq.video_id] = records
    write_labels(os.path.join(cfg.out_dir, "labels.json"), labels)
    print(f"wrote {len(videos)} feature files to {features_dir}")
    for k, n in enumerate(counts):
        print(f"class_{k}: {n} actions")
    return 0


def _train_setup(cfg: RunConfig):
    _require(bool(cfg.features_dir), "features_dir is required")
    _require(bool(cfg.labels_file), "labels_file is required")
    _require(os.path.isfile(cfg.labels_file), f"labels file {cfg.labels_file!r} does not exist")
    sequences = _load_sequences(cfg.features_dir, cfg.feature_rate_hz)
    classes = label_names(cfg.labels_file)
    _require(bool(classes), f"labels file {cfg.labels_file!r} contains no labels")
    class_map = {name: i for i, name in enumerate(classes)}
    t_totals = {vid: seq.num_anchors for vid, seq in sequences.items()}
    labels = load_labels(cfg.labels_file, cfg.feature_rate_hz, len(classes), class_map)
    for vid in labels:
        _require(vid in sequences, f"labels reference video {vid!r} with no feature file")
    labels = load_labels(cfg.labels_file, cfg.feature_rate_hz, len(classes), class_map, t_total=t_totals)
    videos = [(seq, labels.get(vid, ActionSet([]))) for vid, seq in sorted(sequences.items())]
    return videos, classes


def cmd_train(cfg: RunConfig, args) -> int:
    phase = TrainPhase(args.phase)
    if phase is TrainPhase.DISPLACEMENT:
        if args.mixup_alpha is not None and args.mixup_alpha > 0:
            raise ConfigError("mixup does not apply to displacement training; drop --mixup-alpha")
        mixup_alpha = 0.0
    else:
        mixup_alpha = cfg.mixup_alpha
    videos, classes = _train_setup(cfg)
    feature_dim = videos[0][0].feature_dim
    chunk_spec = ChunkSpec(cfg.chunk_len_s, len(classes), cfg.feature_rate_hz)
    radius = RadiusConfig(cfg.r_c_s, cfg.r_d_s, cfg.feature_rate_hz)
    try:
        model_cfg = ModelConfig(
            trunk=cfg.trunk,
            num_classes=len(classes),
            num_anchors=chunk_spec.num_anchors,
            feature_dim=feature_dim,
            mlp_widths=(cfg.mlp_width_hidden, cfg.mlp_width_out),
            base_width=cfg.base_width,
            unet_levels=cfg.unet_levels,
            te_layers=cfg.te_layers,
            te_embed=cfg.te_embed,
            te_heads=cfg.te_heads,
        )
        optim_cfg = OptimConfig(
            lr0=cfg.lr,
            weight_decay0=cfg.weight_decay,
            sam_rho=cfg.sam_rho,
            mixup_alpha=mixup_alpha,
            epochs=cfg.epochs,
            chunks_per_epoch=cfg.chunks_per_epoch,
            batch_size=cfg.batch_size,
            seed=cfg.seed,
            checkpoint_every=cfg.checkpoint_every,
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e
    result = train(
        phase,
        videos,
        chunk_spec,
        radius,
        model_cfg,
        optim_cfg,
        out_dir=cfg.out_dir,
        deterministic=cfg.deterministic,
        resume=args.resume,
        manifest_extra={
            "classes": ",".join(classes),
            "feature_rate_hz": repr(cfg.feature_rate_hz),
        },
        log=lambda msg: print(msg, flush=True),
    )
    if result.metrics:
        print(f"final {phase.value} loss: {result.metrics[-1]['loss']:.6f}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _load_model(ckpt_path):
    _require(os.path.isfile(ckpt_path), f"checkpoint {ckpt_path!r} does not exist")
    manifest_path = ckpt_path + ".manifest"
    _require(os.path.isfile(manifest_path), f"manifest {manifest_path!r} does not exist")
    manifest = read_manifest(manifest_path)
    model = SpottingModel(config_from_manifest(manifest))
    try:
        load_state_into(model, load_checkpoint(ckpt_path))
    except RuntimeError as e:
        raise ValueError(f"{ckpt_path}: checkpoint does not match its manifest config: {e}") from e
    model.eval()
    return model, manifest


def cmd_infer(cfg: RunConfig, args) -> int:
    conf_model, conf_manifest = _load_model(args.conf_ckpt)
    classes = conf_manifest["classes"].split(",")
    rate_hz = float(conf_manifest["feature_rate_hz"])
    disp_model = None
    if not args.no_displacements:
        _require(args.disp_ckpt is not None, "need --disp-ckpt unless --no-displacements is set")
        disp_model, disp_manifest = _load_model(args.disp_ckpt)
        if disp_manifest["classes"].split(",") != classes:
            raise ValueError("confidence and displacement checkpoints disagree on classes")
        if float(disp_manifest["feature_rate_hz"]) != rate_hz:
            raise ValueError("confidence and displacement checkpoints disagree on feature rate")
    _require(bool(cfg.features_dir), "features_dir is required")
    sequences = _load_sequences(cfg.features_dir, rate_hz)
    postproc = PostprocConfig(cfg.nms_window_s, cfg.keep_threshold)
    detections = {}
    chunk_len = conf_model.config.num_anchors
    num_chunks = 0
    t0 = time.monotonic()
    for vid, seq in sorted(sequences.items()):
        stride = max(1, chunk_len // 2) if cfg.stride_s is None else int(round(cfg.stride_s * rate_hz))
        num_chunks += len(plan_tiles(seq.num_anchors, chunk_len, min(max(stride, 1), chunk_len)))
        detections[vid] = infer_video(
            conf_model, disp_model, seq, postproc,
            stride_s=cfg.stride_s, use_displacements=not args.no_displacements,
        )
    elapsed = time.monotonic() - t0
    out_path = args.out or os.path.join(cfg.out_dir, "detections.json")
    os.makedirs(os.path.dirname(out_path) or ".", exist_ok=True)
    write_detections(out_path, detections, classes)
    total = sum(len(d) for d in detections.values())
    print(f"wrote {total} detections for {len(detections)} videos to {out_path}")
    if args.time_flag and elapsed > 0:
        print(f"throughput: {num_chunks / elapsed:.1f} chunks/second")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    _require(bool(cfg.labels_file), "labels_file is required")
    _require(os.path.isfile(cfg.labels_file), f"labels file {cfg.labels_file!r} does not exist")
    _require(os.path.isfile(args.detections), f"detections file {args.detections!r} does not exist")
    classes = label_names(cfg.labels_file)
    _require(bool(classes), "labels file contains no labels")
    class_map = {name: i for i, name in enumerate(classes)}
    gt = load_labels_seconds(cfg.labels_file, class_map)
    dets = load_detections(args.detections, class_map)
    presets = ["standard", "tight"] if cfg.preset == "both" else [cfg.preset]
    results = [average_map(dets, gt, ToleranceSet.preset(name), len(classes)) for name in presets]
    out_path = args.out or os.path.join(cfg.out_dir, "results.csv")
    os.makedirs(os.path.dirname(out_path) or ".", exist_ok=True)
    write_results_csv(out_path, results, classes)
    for result in results:
        label = {"standard": "average-mAP", "tight": "tight average-mAP"}[result.set_name]
        print(f"{label}: {100.0 * result.average_map:.1f}")
    print(f"results: {out_path}")
    return 0


def cmd_dump_config(cfg: RunConfig, args) -> int:
    if args.out:
        save_config(args.out, cfg)
    else:
        from .config import dump_config

        sys.stdout.write(dump_config(cfg))
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "dump-config": cmd_dump_config,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = merged_config(args)
        _apply_runtime(cfg)
        if args.command in ("synth", "train"):
            os.makedirs(cfg.out_dir, exist_ok=True)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except TrainingDivergedError as e:
        print(f"training aborted: {e}", file=sys.stderr)
        if e.last_checkpoint:
            print(f"last good checkpoint: {e.last_checkpoint}", file=sys.stderr)
        return 3
    except (ValueError, KeyError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 4


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
