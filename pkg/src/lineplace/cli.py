"""Command-line orchestration of the pipeline.

Subcommands: synth, extract, train-cluster, train-descriptor, eval.  Every
command loads one PipelineConfig (YAML via --config, defaults otherwise),
prints its effective hash, and derives all randomness from the single root
seed.  Exit codes: 0 success, 2 configuration errors, 3 missing or unusable
data, 4 anything else.  The worker count for extraction comes from the
LINEPLACE_WORKERS environment variable.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import nn
from .clustering import (
    load_clusternet,
    mean_frame_nmi,
    predict_frame,
    pretrain_visual,
    train_clustering,
)
from .config import ConfigError, PipelineConfig, config_hash, load_config
from .dataset import read_dataset, write_dataset
from .description import (
    frame_cluster_embeddings,
    load_descriptor,
    train_descriptor,
    visual_weights_from_cluster_checkpoint,
)
from .extraction import extract_dataset, load_all_features, read_features_index, select_lines
from .retrieval import agglomerative_baseline, leave_one_out_accuracy, nmi
from .synth import generate_scene, render_views

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4


class DataError(Exception):
    """Missing or unusable input artifacts."""


# -- shared plumbing ---------------------------------------------------------------


def _effective_config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    for name in ("seed", "n_scenes", "n_views"):
        v = getattr(args, name, None)
        if v is not None:
            cfg = replace(cfg, **{name: v})
    return cfg


def _resolve(flag_value, config_value, what: str) -> str:
    """A required path: the flag wins, the config paths section backs it up."""
    v = flag_value if flag_value is not None else config_value
    if v is None:
        raise ConfigError(f"missing {what} (pass the flag or set it under paths: in the config)")
    return v


def _load_features(features_dir) -> dict:
    try:
        scenes = load_all_features(features_dir)
    except FileNotFoundError as e:
        raise DataError(f"features not found: {e}") from e
    except ValueError as e:
        raise DataError(str(e)) from e
    if not scenes:
        raise DataError(f"no extracted frames under {features_dir}")
    return scenes


def _split_scenes(scenes: dict, val_fraction: float):
    """Scene-level split; validation takes the tail of the sorted scene ids."""
    if not 0.0 <= val_fraction < 1.0:
        raise ConfigError("--val-fraction must be in [0, 1)")
    ids = sorted(scenes)
    n_val = min(int(round(val_fraction * len(ids))), len(ids) - 1)
    if n_val <= 0:
        return dict(scenes), {}
    cut = len(ids) - n_val
    train = {sid: scenes[sid] for sid in ids[:cut]}
    val = {sid: scenes[sid] for sid in ids[cut:]}
    return train, val


def _flatten(scenes: dict) -> list:
    return [f for sid in sorted(scenes) for f in scenes[sid]]


def _load_cluster_checkpoint(path):
    if not Path(path).exists():
        raise DataError(f"clustering checkpoint not found: {path}")
    return load_clusternet(path)


def _check_visual_compat(ckpt_path, dcfg) -> None:
    """The descriptor reuses the clustering encoder; the dims must agree."""
    _, meta = nn.load_checkpoint(ckpt_path)
    c = meta.get("config", {})
    mine = {"vis_channels": list(dcfg.vis_channels), "d_h": dcfg.d_h, "d_visual": dcfg.d_visual}
    theirs = {k: c.get(k) for k in mine}
    if mine != theirs:
        raise ConfigError(
            f"config/shape mismatch against checkpoint: descriptor wants {mine}, "
            f"checkpoint has {theirs}"
        )


def _emit_report(report: dict, out_path) -> None:
    blob = json.dumps(report, indent=2, sort_keys=True)
    if out_path:
        Path(out_path).write_text(blob + "\n")
        print(f"report -> {out_path}")
    else:
        print(blob)


# -- subcommands ---------------------------------------------------------------


def cmd_synth(cfg: PipelineConfig, args) -> int:
    out = _resolve(args.out, cfg.paths.out, "--out")
    if cfg.n_scenes <= 0 or cfg.n_views <= 0:
        raise ConfigError("n_scenes and n_views must be positive")
    scenes = []
    n_frames = 0
    for idx in range(cfg.n_scenes):
        gen_ss, view_ss = np.random.SeedSequence((cfg.seed, idx)).spawn(2)
        spec = generate_scene(int(gen_ss.generate_state(1)[0]), cfg.synth, scene_id=f"scene{idx:04d}")
        frames = render_views(spec, cfg.n_views, int(view_ss.generate_state(1)[0]), cfg.synth)
        scenes.append((spec, frames))
        n_frames += len(frames)
    manifest = write_dataset(out, scenes)
    print(f"synth: {len(scenes)} scenes x {cfg.n_views} views = {n_frames} frames -> {manifest}")
    return EXIT_OK


def cmd_extract(cfg: PipelineConfig, args) -> int:
    dataset_dir = _resolve(args.dataset, cfg.paths.dataset, "--dataset")
    out = _resolve(args.out, cfg.paths.out, "--out")
    try:
        ds = read_dataset(dataset_dir)
    except (FileNotFoundError, ValueError) as e:
        raise DataError(str(e)) from e
    out_dir = extract_dataset(ds, out, cfg.extraction, seed=cfg.seed)
    index = read_features_index(out_dir)
    entries = [e for v in index["scenes"].values() for e in v]
    for e in entries:
        if e["n_lines"] == 0:
            print(f"warning: no lines detected in frame {e['frame_id']}")
    for err in index["errors"]:
        print(f"warning: frame {err['scene_id']}/{err['frame_id']} failed: {err['error']}")
    print(f"extract: {len(entries)} frames ({len(index['errors'])} failed) -> {out_dir}")
    if not entries:
        raise DataError("no frame survived extraction")
    return EXIT_OK


def cmd_train_cluster(cfg: PipelineConfig, args) -> int:
    features = _resolve(args.features, cfg.paths.features, "--features")
    out = _resolve(args.out, cfg.paths.out, "--out")
    scenes = _load_features(features)
    ccfg = cfg.clustering
    if args.no_attention:
        ccfg = replace(ccfg, attention_enabled=False)
    train_split, val_split = _split_scenes(scenes, args.val_fraction)
    train_frames, val_frames = _flatten(train_split), _flatten(val_split)
    visual_weights = None
    if args.pretrain_epochs > 0:
        visual_weights = pretrain_visual(train_frames, ccfg, epochs=args.pretrain_epochs, seed=cfg.seed)
    try:
        net, metrics = train_clustering(
            train_frames,
            ccfg,
            seed=cfg.seed,
            val_frames=val_frames,
            checkpoint_path=out,
            log_path=args.log,
            resume=args.resume,
        )
    except ValueError as e:
        raise DataError(str(e)) from e
    last = metrics[-1] if metrics else {}
    print(
        f"train-cluster: {len(metrics)} epochs, loss {last.get('loss', float('nan')):.4f}"
        + (f", val NMI {last['val_nmi']:.3f}" if "val_nmi" in last else "")
        + f" -> {out}"
    )
    return EXIT_OK


def cmd_train_descriptor(cfg: PipelineConfig, args) -> int:
    features = _resolve(args.features, cfg.paths.features, "--features")
    out = _resolve(args.out, cfg.paths.out, "--out")
    ckpt = args.cluster_checkpoint if args.cluster_checkpoint else cfg.paths.cluster_checkpoint
    if ckpt is None:
        raise ConfigError(
            "descriptor training needs --cluster-checkpoint: the visual encoder is "
            "transplanted frozen from a trained clustering model"
        )
    if not Path(ckpt).exists():
        raise DataError(f"clustering checkpoint not found: {ckpt}")
    _check_visual_compat(ckpt, cfg.descriptor)
    weights = visual_weights_from_cluster_checkpoint(ckpt)
    scenes = _load_features(features)
    train_split, val_split = _split_scenes(scenes, args.val_fraction)
    try:
        net, metrics = train_descriptor(
            train_split,
            cfg.descriptor,
            seed=cfg.seed,
            visual_weights=weights,
            val_scenes=val_split or None,
            checkpoint_path=out,
            log_path=args.log,
            resume=args.resume,
            steps_per_epoch=args.steps_per_epoch,
        )
    except ValueError as e:
        raise DataError(str(e)) from e
    last = metrics[-1] if metrics else {}
    print(
        f"train-descriptor: {len(metrics)} epochs, loss {last.get('loss', float('nan')):.4f}"
        + (
            f", val triplet acc {last['val_triplet_accuracy']:.3f}"
            if "val_triplet_accuracy" in last
            else ""
        )
        + f" -> {out}"
    )
    return EXIT_OK


def _eval_clustering(cfg: PipelineConfig, args, scenes: dict) -> dict:
    frames = _flatten(scenes)
    ckpt = args.cluster_checkpoint if args.cluster_checkpoint else cfg.paths.cluster_checkpoint
    if ckpt is None:
        raise ConfigError("eval --mode clustering needs --cluster-checkpoint")
    scorable = [f for f in frames if f.n_lines >= 2 and np.unique(f.labels).size >= 2]
    if not scorable:
        raise DataError("no frame has at least two ground-truth clusters to score")
    models = {"network": _nmi_rows(_load_cluster_checkpoint(ckpt), scorable)}
    if args.no_attention:
        models["no_attention"] = _nmi_rows(_load_cluster_checkpoint(args.no_attention), scorable)
    if args.agglo_baseline:
        rows = []
        for f in scorable:
            pred = agglomerative_baseline(
                f.geom[:, :6], minimize_silhouette=args.silhouette_mode == "minimize"
            )
            rows.append({"frame_id": f.frame_id, "scene_id": f.scene_id, "nmi": nmi(pred, f.labels)})
        models["agglomerative"] = {
            "mean_nmi": float(np.mean([r["nmi"] for r in rows])),
            "frames": rows,
        }
    return {"mode": "clustering", "n_frames": len(scorable), "models": models}


def _nmi_rows(net, frames: list) -> dict:
    rows = []
    for f in frames:
        pred, idx = predict_frame(net, f)
        rows.append({"frame_id": f.frame_id, "scene_id": f.scene_id, "nmi": nmi(pred, f.labels[idx])})
    return {"mean_nmi": float(np.mean([r["nmi"] for r in rows])), "frames": rows}


def _eval_place(cfg: PipelineConfig, args, scenes: dict) -> dict:
    dckpt = args.descriptor_checkpoint if args.descriptor_checkpoint else cfg.paths.descriptor_checkpoint
    if dckpt is None:
        raise ConfigError("eval --mode place needs --descriptor-checkpoint")
    if not Path(dckpt).exists():
        raise DataError(f"descriptor checkpoint not found: {dckpt}")
    dnet = load_descriptor(dckpt)
    cnet = None
    if not args.gtc:
        ckpt = args.cluster_checkpoint if args.cluster_checkpoint else cfg.paths.cluster_checkpoint
        if ckpt is None:
            raise ConfigError("eval --mode place needs --cluster-checkpoint (or --gtc)")
        cnet = _load_cluster_checkpoint(ckpt)
    k_nn = args.k_nn if args.k_nn is not None else cfg.retrieval.k_nn

    frames = []
    for feats in _flatten(scenes):
        if args.gtc:
            labels, used = feats.labels, feats
        else:
            labels, idx = predict_frame(cnet, feats, seed=cfg.seed)
            used = select_lines(feats, idx)
        frames.append(frame_cluster_embeddings(dnet, used, labels))
    try:
        accuracy, results = leave_one_out_accuracy(frames, k_nn=k_nn, min_lines=cfg.retrieval.min_lines)
    except ValueError as e:
        raise DataError(str(e)) from e

    rows = []
    for fc, res in zip(frames, results):
        row = {"frame_id": fc.frame_id, "scene_id": fc.scene_id}
        if res is None:
            row.update(predicted=None, correct=False)
        else:
            row.update(
                predicted=res.scene_id,
                correct=res.scene_id == fc.scene_id,
                votes={k: int(v) for k, v in sorted(res.votes.items())},
            )
        rows.append(row)
    return {
        "mode": "place",
        "gtc": bool(args.gtc),
        "k_nn": k_nn,
        "min_lines": cfg.retrieval.min_lines,
        "n_scenes": len(scenes),
        "n_frames": len(frames),
        "chance": 1.0 / len(scenes),
        "accuracy": accuracy,
        "frames": rows,
    }


def cmd_eval(cfg: PipelineConfig, args) -> int:
    features = _resolve(args.features, cfg.paths.features, "--features")
    scenes = _load_features(features)
    if args.mode == "clustering":
        report = _eval_clustering(cfg, args, scenes)
    else:
        report = _eval_place(cfg, args, scenes)
    report["config"] = config_hash(cfg)
    _emit_report(report, args.out)
    if report["mode"] == "clustering":
        parts = [f"{name} {m['mean_nmi']:.3f}" for name, m in sorted(report["models"].items())]
        print(f"eval clustering: mean NMI {' | '.join(parts)} over {report['n_frames']} frames")
    else:
        print(
            f"eval place: accuracy {report['accuracy']:.3f} (chance {report['chance']:.3f}) "
            f"over {report['n_frames']} frames, k_nn {report['k_nn']}"
            + (" [ground-truth clusters]" if report["gtc"] else "")
        )
    return EXIT_OK


# -- parser ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lineplace", description=__doc__.strip().splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML pipeline configuration file")
        sp.add_argument("--seed", type=int, help="root seed (overrides the config)")

    sp = sub.add_parser("synth", help="generate a synthetic RGB-D dataset")
    common(sp)
    sp.add_argument("--out", help="dataset output directory")
    sp.add_argument("--n-scenes", type=int, dest="n_scenes", help="scene count override")
    sp.add_argument("--n-views", type=int, dest="n_views", help="views per scene override")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("extract", help="detect lines and build per-frame features")
    common(sp)
    sp.add_argument("--dataset", help="dataset directory from synth")
    sp.add_argument("--out", help="features output directory")
    sp.set_defaults(func=cmd_extract)

    sp = sub.add_parser("train-cluster", help="train the line clustering network")
    common(sp)
    sp.add_argument("--features", help="features directory from extract")
    sp.add_argument("--out", help="checkpoint path")
    sp.add_argument("--log", help="JSONL metrics path")
    sp.add_argument("--resume", action="store_true", help="continue from the checkpoint")
    sp.add_argument("--val-fraction", type=float, default=0.0, help="held-out scene fraction")
    sp.add_argument("--pretrain-epochs", type=int, default=0, help="visual-encoder pretraining epochs")
    sp.add_argument("--no-attention", action="store_true", help="ablation: identity attention")
    sp.set_defaults(func=cmd_train_cluster)

    sp = sub.add_parser("train-descriptor", help="train the cluster descriptor network")
    common(sp)
    sp.add_argument("--features", help="features directory from extract")
    sp.add_argument("--out", help="checkpoint path")
    sp.add_argument("--cluster-checkpoint", help="trained clustering checkpoint (visual encoder source)")
    sp.add_argument("--log", help="JSONL metrics path")
    sp.add_argument("--resume", action="store_true", help="continue from the checkpoint")
    sp.add_argument("--val-fraction", type=float, default=0.0, help="held-out scene fraction")
    sp.add_argument("--steps-per-epoch", type=int, help="override the mined-anchor epoch size")
    sp.set_defaults(func=cmd_train_descriptor)

    sp = sub.add_parser("eval", help="evaluate clustering quality or place recognition")
    common(sp)
    sp.add_argument("--mode", choices=("clustering", "place"), required=True)
    sp.add_argument("--features", help="features directory from extract")
    sp.add_argument("--cluster-checkpoint", help="trained clustering checkpoint")
    sp.add_argument("--descriptor-checkpoint", help="trained descriptor checkpoint")
    sp.add_argument("--out", help="write the JSON report here instead of stdout")
    sp.add_argument("--k-nn", type=int, dest="k_nn", help="neighbors per query cluster")
    sp.add_argument("--gtc", action="store_true", help="use ground-truth cluster labels")
    sp.add_argument("--no-attention", metavar="CHECKPOINT", help="also score this ablation checkpoint")
    sp.add_argument("--agglo-baseline", action="store_true", help="also score the agglomerative baseline")
    sp.add_argument(
        "--silhouette-mode",
        choices=("maximize", "minimize"),
        default="maximize",
        help="cut selection for the agglomerative baseline",
    )
    sp.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _effective_config(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"config {config_hash(cfg)}")
    try:
        return args.func(cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # anything unexpected: distinct runtime code
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
