"""Command-line entry point: ``garmentanim <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 client error, 4 numerical failure.
Logs are JSON lines on stderr; each run writes ``run_config.yaml`` next to its outputs.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .backbone import BackboneConfig, ConfigError, init_backbone
from .checkpoint import CheckpointError
from .conditioning import PoseSequence, video_from_uint8, video_to_uint8
from .media import read_image, read_video, write_video_dir
from .pipeline.clients import ClientError, load_suite
from .pipeline.manifest import (build_dataset, load_triplets, load_video_entry, read_manifest,
                                read_video_list, write_result)
from .pipeline.stages import MODES, PipelineConfig, TripletResult
from .training import VARIANTS, NumericalError, TrainConfig, TrainState, train

EXIT_OK, EXIT_CONFIG, EXIT_CLIENT, EXIT_NUMERIC = 0, 2, 3, 4
SNAPSHOT = "run_config.yaml"
log = logging.getLogger("garmentanim")


class UsageError(Exception):
    """Bad configuration, missing inputs or inconsistent options."""


class JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        event = {"level": record.levelname.lower(), "logger": record.name}
        if isinstance(record.msg, dict):
            event.update(record.msg)
        else:
            event["message"] = record.getMessage()
        return json.dumps(event, sort_keys=True, default=str)


def setup_logging(level: str = "info") -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level.upper())


def emit(event: str, **fields) -> None:
    log.info({"event": event, **fields})


# --- config handling -----------------------------------------------------------------

def load_config(path, command: str) -> dict:
    """Section ``command`` of a YAML file (or the whole file if it has no sections)."""
    if not path:
        return {}
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    data = yaml.safe_load(path.read_text()) or {}
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a mapping")
    section = data.get(command, data)
    return {k.replace("-", "_"): v for k, v in section.items()}


def resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Defaults < config file < explicit command-line flags."""
    cfg = dict(defaults)
    file_cfg = load_config(getattr(args, "config", None), args.command)
    unknown = set(file_cfg) - set(defaults)
    if unknown:
        raise UsageError(f"unknown keys in config: {sorted(unknown)}")
    cfg.update(file_cfg)
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return cfg


def write_snapshot(out_dir: Path, command: str, cfg: dict) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    snap = {"command": command, "version": __version__, "config": _plain(cfg)}
    path = out_dir / SNAPSHOT
    path.write_text(yaml.safe_dump(snap, sort_keys=True))
    return path


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _require(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"missing required {what}")
    path = Path(path)
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


# --- build-dataset ----------------------------------------------------------------------

BUILD_DEFAULTS = {"videos": None, "mode": "shop-pair", "seed": 0, "clients": None, "out": None,
                  "limit": None, "workers": os.cpu_count() or 1, "n_samples": 16, "k_top": 3,
                  "face_scale": 3.0, "body_scale": 1.1, "retries": 3}


def cmd_build_dataset(args) -> int:
    cfg = resolve(args, BUILD_DEFAULTS)
    if cfg["mode"] not in MODES:
        raise UsageError(f"unknown mode {cfg['mode']!r}")
    out = Path(_require_value(cfg, "out"))
    paths = read_video_list(_require(cfg["videos"], "video list"))
    if cfg["limit"] is not None:
        paths = paths[: int(cfg["limit"])]
    if not paths:
        raise UsageError("video list is empty")
    entries = [load_video_entry(_require(p, "video")) for p in paths]
    suite = load_suite(cfg["clients"])
    pcfg = PipelineConfig(n_samples=cfg["n_samples"], k_top=cfg["k_top"], face_scale=cfg["face_scale"],
                          body_scale=cfg["body_scale"], retries=cfg["retries"])
    snap_cfg = {k: v for k, v in cfg.items() if k != "workers"}
    write_snapshot(out, "build-dataset", snap_cfg)
    manifest, records = build_dataset(entries, cfg["mode"], suite, int(cfg["seed"]), out,
                                      int(cfg["workers"]), pcfg)
    accepted = sum(not r.get("rejected") for r in records)
    emit("dataset_built", manifest=str(manifest), accepted=accepted, rejected=len(records) - accepted)
    print(manifest)
    return EXIT_OK if accepted else EXIT_CLIENT


def _require_value(cfg: dict, key: str):
    if cfg.get(key) in (None, ""):
        raise UsageError(f"missing required option --{key.replace('_', '-')}")
    return cfg[key]


# --- train --------------------------------------------------------------------------------

TRAIN_DEFAULTS = {"manifest": None, "out": None, "variant": "dual-module", "steps": 200,
                  "batch_size": 8, "lr": 1e-3, "seed": 0, "rank": 4, "alpha": 0.5, "beta": 0.5,
                  "checkpoint_every": 0, "lr_schedule": "constant", "recolor_prob": 0.0,
                  "resume": None, "backbone": None, "backbone_seed": 0,
                  "num_blocks": 8, "model_dim": 64, "num_heads": 4, "patch": [1, 2, 2]}


def _backbone(cfg: dict) -> tuple:
    if cfg["backbone"]:
        from .checkpoint import load_checkpoint

        params, bcfg, _, _ = load_checkpoint(_require(cfg["backbone"], "backbone checkpoint"))
        for name in list(params):
            if not name.startswith("backbone."):
                raise UsageError(f"backbone checkpoint holds non-backbone tensor {name}")
        params.freeze_all()
        return params, bcfg
    bcfg = BackboneConfig(num_blocks=int(cfg["num_blocks"]), model_dim=int(cfg["model_dim"]),
                          num_heads=int(cfg["num_heads"]), patch=tuple(int(p) for p in cfg["patch"]))
    return init_backbone(bcfg, int(cfg["backbone_seed"])), bcfg


def cmd_train(args) -> int:
    cfg = resolve(args, TRAIN_DEFAULTS)
    out = Path(_require_value(cfg, "out"))
    samples = load_triplets(_require(cfg["manifest"], "training manifest"))
    if not samples:
        raise UsageError("manifest has no accepted samples")
    if cfg["resume"]:
        state = TrainState.load(_require(cfg["resume"], "resume checkpoint"))
        if args.steps is not None:
            state.tcfg.steps = int(args.steps)
        emit("resumed", checkpoint=str(cfg["resume"]), step=state.step)
    else:
        if cfg["variant"] not in VARIANTS:
            raise UsageError(f"unknown variant {cfg['variant']!r}")
        params, bcfg = _backbone(cfg)
        tcfg = TrainConfig(variant=cfg["variant"], steps=int(cfg["steps"]),
                           batch_size=int(cfg["batch_size"]), lr=float(cfg["lr"]),
                           seed=int(cfg["seed"]), lora_rank=int(cfg["rank"]), alpha=float(cfg["alpha"]),
                           beta=float(cfg["beta"]), checkpoint_every=int(cfg["checkpoint_every"]),
                           lr_schedule=cfg["lr_schedule"], recolor_prob=float(cfg["recolor_prob"]))
        state = TrainState(params, bcfg, tcfg)
    write_snapshot(out, "train", {**cfg, "train_config": vars(state.tcfg).copy(),
                                  "backbone_config": state.cfg.to_dict()})
    trainable = state.params.trainable_names()
    before = state.params.digest("backbone.")
    emit("trainable", variant=state.tcfg.variant, count=state.params.num_elements(trainable),
         tensors=len(trainable), prefixes=sorted({n.split(".", 1)[0] for n in trainable}))
    losses = out / "losses.jsonl"
    mode = "a" if cfg["resume"] else "w"
    with open(losses, mode) as fh:
        def record(rec):
            fh.write(rec.to_json() + "\n")
            emit("step", step=rec.step, loss=rec.loss, grad_norms=rec.grad_norms)
        train(samples, state, checkpoint_dir=out / "checkpoints", on_record=record)
    after = state.params.digest("backbone.")
    emit("freeze_audit", backbone_digest_before=before, backbone_digest_after=after,
         backbone_unchanged=before == after)
    path = state.save(out / "final.ckpt")
    print(path)
    return EXIT_OK


# --- generate / interpolate --------------------------------------------------------------

GEN_DEFAULTS = {"checkpoint": None, "human": None, "garment": None, "garment_a": None,
                "garment_b": None, "pose": None, "prompt": "", "steps": 20, "seed": 0, "alpha": 0.5,
                "beta": 0.5, "gamma": None, "out": None, "raw": False}


def load_pose(path) -> PoseSequence:
    data = json.loads(_require(path, "pose file").read_text())
    try:
        return PoseSequence(np.asarray(data["keypoints"], dtype=np.float32), int(data["height"]),
                            int(data["width"]))
    except (KeyError, ValueError) as exc:
        raise UsageError(f"invalid pose file {path}: {exc}") from exc


def _load_image(path, what) -> np.ndarray:
    return video_from_uint8(read_image(_require(path, what)))


def _generate(cfg: dict, garments: list, gamma) -> int:
    from .sampling import GenerationRequest, Model, generate

    out = Path(_require_value(cfg, "out"))
    model = Model.load(_require(cfg["checkpoint"], "checkpoint"))
    req = GenerationRequest(human=_load_image(cfg["human"], "human image"), garments=garments,
                            pose=load_pose(cfg["pose"]), prompt=cfg["prompt"] or "",
                            steps=int(cfg["steps"]), seed=int(cfg["seed"]), alpha=float(cfg["alpha"]),
                            beta=float(cfg["beta"]), gamma=gamma)
    write_snapshot(out, "generate" if gamma is None else "interpolate", cfg)
    video = generate(req, model)
    write_video_dir(video_to_uint8(video), out / "video", raw=bool(cfg["raw"]))
    emit("generated", out=str(out / "video"), frames=int(video.shape[0]))
    print(out / "video")
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg = resolve(args, GEN_DEFAULTS)
    _require(cfg["checkpoint"], "checkpoint")
    paths = cfg["garment"] or []
    if isinstance(paths, str):
        paths = [paths]
    if not paths:
        raise UsageError("at least one --garment is required")
    return _generate(cfg, [_load_image(p, "garment image") for p in paths], None)


def cmd_interpolate(args) -> int:
    cfg = resolve(args, GEN_DEFAULTS)
    _require(cfg["checkpoint"], "checkpoint")
    if cfg["gamma"] is None:
        raise UsageError("--gamma is required")
    garments = [_load_image(cfg["garment_a"], "garment A"), _load_image(cfg["garment_b"], "garment B")]
    return _generate(cfg, garments, float(cfg["gamma"]))


# --- evaluate ------------------------------------------------------------------------------

EVAL_DEFAULTS = {"pairs": None, "out": None, "layout": "table1", "image_extractor_seed": 0,
                 "clip_backends": ["i3d", "resnext"], "workers": os.cpu_count() or 1}


def cmd_evaluate(args) -> int:
    from concurrent.futures import ThreadPoolExecutor

    from .metrics import (LAYOUTS, VFID_BACKENDS, conv_stack_extractor, evaluate_pairs,
                          pyramid_clip_extractor, render_report)

    cfg = resolve(args, EVAL_DEFAULTS)
    if cfg["layout"] not in LAYOUTS:
        raise UsageError(f"unknown layout {cfg['layout']!r}")
    if list(cfg["clip_backends"]) != list(VFID_BACKENDS):
        raise UsageError(f"clip_backends must be {list(VFID_BACKENDS)}")
    out = Path(_require_value(cfg, "out"))
    pairs_path = _require(cfg["pairs"], "pairs manifest")
    groups: dict[tuple, list] = {}
    for rec in read_manifest(pairs_path):
        key = (rec.get("method", "ours"), rec.get("dataset", "default"))
        groups.setdefault(key, []).append(rec)
    if not groups:
        raise UsageError("pairs manifest is empty")
    image_fx = conv_stack_extractor(int(cfg["image_extractor_seed"]))
    clip_fx = {n: pyramid_clip_extractor(n, s) for n, s in VFID_BACKENDS.items()}

    def load(rec):
        base = pairs_path.parent
        return (video_from_uint8(read_video(_require(base / rec["pred"], "prediction"))),
                video_from_uint8(read_video(_require(base / rec["truth"], "ground truth"))))

    reports = []
    with ThreadPoolExecutor(max_workers=max(1, int(cfg["workers"]))) as pool:
        for (method, dataset), recs in groups.items():
            loaded = list(pool.map(load, recs))
            reports.append(evaluate_pairs([p for p, _ in loaded], [t for _, t in loaded], method,
                                          dataset, image_fx, clip_fx))
    text, csv_text = render_report(reports, cfg["layout"])
    write_snapshot(out, "evaluate", {k: v for k, v in cfg.items() if k != "workers"})
    (out / "report.txt").write_text(text)
    (out / "report.csv").write_text(csv_text)
    (out / "per_pair.json").write_text(json.dumps(
        [{"method": r.method, "dataset": r.dataset, "pairs": r.per_pair} for r in reports],
        indent=2, sort_keys=True) + "\n")
    emit("evaluated", report=str(out / "report.txt"), rows=len(reports))
    sys.stdout.write(text)
    return EXIT_OK


# --- helpers: toy corpus, backbone init ---------------------------------------------------

def cmd_toy_data(args) -> int:
    """Synthetic-toy triplets as a manifest, plus raw videos and a video list."""
    from .toy import heldout_corpus, toy_corpus

    out = Path(args.out)
    samples = heldout_corpus(args.frames, args.size) if args.heldout else toy_corpus(args.frames, args.size)
    records = []
    for s in samples:
        res = TripletResult(s.id, "shop-pair", s, {"generator": "toy", "mode": "toy"})
        records.append(write_result(res, out))
        vdir = out / "videos" / s.id
        write_video_dir(video_to_uint8(s.truth), vdir, meta={"id": s.id, "prompt": s.prompt,
                                                               "source": s.source})
        from .media import write_image
        write_image(video_to_uint8(s.garments[0])[0], vdir / "garment.png")
    from .pipeline.manifest import write_manifest
    write_manifest(records, out / "manifest.jsonl")
    (out / "videos.txt").write_text("".join(f"videos/{s.id}\n" for s in samples))
    write_snapshot(out, "toy-data", vars(args).copy() | {"func": None})
    print(out / "manifest.jsonl")
    return EXIT_OK


def cmd_init_backbone(args) -> int:
    from .autograd import ParamSet
    from .checkpoint import save_checkpoint

    cfg = BackboneConfig(num_blocks=args.num_blocks, model_dim=args.model_dim,
                         num_heads=args.num_heads, patch=tuple(args.patch))
    params: ParamSet = init_backbone(cfg, args.seed)
    path = save_checkpoint(args.out, params, cfg, {"kind": "backbone", "seed": args.seed})
    emit("backbone_saved", path=str(path), digest=params.digest("backbone."))
    print(path)
    return EXIT_OK


# --- parser --------------------------------------------------------------------------------

def _model_flags(p):
    p.add_argument("--num-blocks", type=int)
    p.add_argument("--model-dim", type=int)
    p.add_argument("--num-heads", type=int)
    p.add_argument("--patch", type=int, nargs=3)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="garmentanim", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--log-level", default="info")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-dataset", help="construct triplets from videos")
    p.add_argument("--videos", help="file listing one video path per line")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--seed", type=int)
    p.add_argument("--clients", help="client config file (YAML)")
    p.add_argument("--out")
    p.add_argument("--limit", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("train", help="train adapters on a triplet manifest")
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--rank", type=int, help="LoRA rank for backbone-lora")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--lr-schedule", choices=("constant", "cosine"))
    p.add_argument("--recolor-prob", type=float, help="chance of repainting a sample's garment per step")
    p.add_argument("--resume", help="continue from a training checkpoint")
    p.add_argument("--backbone", help="frozen backbone checkpoint")
    p.add_argument("--backbone-seed", type=int)
    _model_flags(p)
    p.add_argument("--config")
    p.set_defaults(func=cmd_train)

    for name, func in (("generate", cmd_generate), ("interpolate", cmd_interpolate)):
        p = sub.add_parser(name, help=f"{name} a try-on animation")
        p.add_argument("--checkpoint")
        p.add_argument("--human")
        if name == "generate":
            p.add_argument("--garment", action="append", help="repeat for upper + lower garments")
        else:
            p.add_argument("--garment-a")
            p.add_argument("--garment-b")
            p.add_argument("--gamma", type=float)
        p.add_argument("--pose", help="pose JSON {height, width, keypoints}")
        p.add_argument("--prompt")
        p.add_argument("--steps", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--alpha", type=float)
        p.add_argument("--beta", type=float)
        p.add_argument("--out")
        p.add_argument("--raw", action="store_true", default=None, help="also write video.raw")
        p.add_argument("--config")
        p.set_defaults(func=func)

    p = sub.add_parser("evaluate", help="metric tables over (pred, truth) pairs")
    p.add_argument("--pairs", help="JSONL of {pred, truth, method, dataset}")
    p.add_argument("--out")
    p.add_argument("--layout", choices=("table1", "table2", "ablation"))
    p.add_argument("--workers", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("toy-data", help="write the synthetic-toy corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=4)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--heldout", action="store_true")
    p.set_defaults(func=cmd_toy_data)

    p = sub.add_parser("init-backbone", help="draw and save a frozen backbone")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-blocks", type=int, default=8)
    p.add_argument("--model-dim", type=int, default=64)
    p.add_argument("--num-heads", type=int, default=4)
    p.add_argument("--patch", type=int, nargs=3, default=[1, 2, 2])
    p.set_defaults(func=cmd_init_backbone)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level)
    try:
        return int(args.func(args))
    except (UsageError, ConfigError, CheckpointError, FileNotFoundError, yaml.YAMLError) as exc:
        log.error({"event": "config_error", "error": str(exc)})
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ClientError as exc:
        log.error({"event": "client_error", "error": str(exc)})
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CLIENT
    except NumericalError as exc:
        log.error({"event": "numerical_failure", "error": str(exc)})
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        log.error({"event": "config_error", "error": str(exc)})
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
