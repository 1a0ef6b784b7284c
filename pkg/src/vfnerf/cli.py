"""Command-line entry point: ``vfnerf {gen,train,render,eval,oracle-check}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every command is non-interactive and writes only under its output directory.
``--threads 1`` guarantees bit-identical results; larger values only fan out
dataset generation and frame rendering, whose results are reassembled in order.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint
from .dataset import ConfigError, load_cameras, load_dataset, load_scene, generate_dataset, manifest_hash, scene_from_dict
from .evaluation import EvaluationError, View, evaluate, load_view_set, psnr_text, write_view_set
from .metrics import MetricError
from .oracle_check import oracle_render, run_oracle_check
from .render import update_fine_count
from .trainer import TrainConfig, TrainingError, load_train_config, render_camera, train

OUT_ENV = "VFNERF_OUT_DIR"
EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("vfnerf")


class UsageError(Exception):
    """Bad flags or inputs detected before any work starts (exit code 2)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def config_key_help() -> str:
    """Every training-config key with its default, for ``--help``."""
    rows = TrainConfig.describe()
    width = max(len(k) for k, _, _ in rows)
    lines = ["training config keys (set in --config YAML or with --set key=value):"]
    for key, default, text in rows:
        shown = list(default) if isinstance(default, tuple) else default
        lines.append(f"  {key:<{width}}  default {shown!r:<10}  {text}")
    return "\n".join(lines)


def _out_dir(args) -> Path:
    """--out wins; the environment variable applies only when the flag is absent."""
    out = args.out or os.environ.get(OUT_ENV)
    if not out:
        raise UsageError(f"no output directory: pass --out or set {OUT_ENV}")
    return Path(out)


def _existing(path: str | None, what: str) -> Path:
    if path is None:
        raise UsageError(f"missing {what}")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _threads(args) -> int:
    n = args.threads if args.threads is not None else (os.cpu_count() or 1)
    if n < 1:
        raise UsageError("--threads must be >= 1")
    return n


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_gen(args) -> int:
    scene = load_scene(_existing(args.scene, "scene file"))
    cams = load_cameras(_existing(args.cameras, "camera file"))
    out = _out_dir(args)
    generate_dataset(scene, cams, out, seed=args.seed if args.seed is not None else 0, depth_noise=args.depth_noise, threads=_threads(args))
    log.info("wrote %d views (+%d held out) to %s, manifest sha256 %s", len(cams.train), len(cams.holdout), out, manifest_hash(out / "manifest.json"))
    return EXIT_OK


def resolve_train_config(args) -> TrainConfig:
    """Config file, then ``--set`` pairs, then ``--seed`` and ``--epochs``; all key errors are reported together."""
    problems = []
    cfg = TrainConfig()
    if args.config:
        try:
            cfg = load_train_config(_existing(args.config, "training config"))
        except ConfigError as exc:
            problems += [f"{exc.source}:{p}" for p in exc.problems]
    if args.set:
        try:
            cfg = cfg.with_overrides(args.set)
        except ConfigError as exc:
            problems += [f"{exc.source}: {p}" for p in exc.problems]
    if problems:
        raise ConfigError("train", problems)
    if args.seed is not None:
        cfg = cfg.with_overrides([f"seed={args.seed}"], "--seed")
    if args.epochs is not None:
        cfg = cfg.with_epochs(args.epochs)
    return cfg


def cmd_train(args) -> int:
    cfg = resolve_train_config(args)
    data = load_dataset(_existing(args.data, "dataset directory"))
    out = _out_dir(args)
    result = train(data, cfg, out, resume=args.resume, threads=_threads(args), log=log.info)
    last = result.rows[-1] if result.rows else None
    if last is not None:
        log.info("finished epoch %d, total loss %.5f, held-out PSNR %s dB", last["epoch"], last["total"], psnr_text(last["psnr_holdout"]))
    return EXIT_OK


def _camera_views(path: Path) -> list[tuple[str, object, bool]]:
    """(id, camera, held out) from a camera file or a dataset/render directory."""
    if path.is_dir():
        vs = load_view_set(path)
        return [(v.id, v.camera, v.holdout) for v in vs.views]
    cams = load_cameras(path)
    return [(f"train_{k:03d}", c, False) for k, c in enumerate(cams.train)] + [
        (f"holdout_{k:03d}", c, True) for k, c in enumerate(cams.holdout)
    ]


def cmd_render(args) -> int:
    cameras = _camera_views(_existing(args.cameras, "camera source"))
    out = _out_dir(args)
    threads = _threads(args)
    views = []
    if args.oracle_vf:
        if args.scene:
            scene = load_scene(_existing(args.scene, "scene file"))
        elif args.checkpoint:
            scene = scene_from_dict(load_checkpoint(_existing(args.checkpoint, "checkpoint")).header["scene"], args.checkpoint, strict=False)
        else:
            raise UsageError("--oracle-vf needs --scene or --checkpoint")
        for vid, cam, held in cameras:
            rgb, depth, _ = oracle_render(scene, cam)
            views.append(View(vid, cam, rgb, depth, held))
        write_view_set(out, views, scene, {"source": "oracle-vf"})
    else:
        ck = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
        if "scene" not in ck.header or "train_config" not in ck.header:
            raise CheckpointError(f"{args.checkpoint}: checkpoint lacks its scene or training configuration")
        scene = scene_from_dict(ck.header["scene"], args.checkpoint, strict=False)
        cfg = TrainConfig.from_mapping(ck.train_config, args.checkpoint)
        if cfg.model_config(scene) != ck.model.config:
            raise CheckpointError(f"{args.checkpoint}: stored model configuration does not match its training configuration")
        epoch = max(ck.epoch - 1, 0)
        window, sampler = cfg.window(epoch), update_fine_count(cfg.sampler(), epoch)
        for vid, cam, held in cameras:
            rgb, depth, _ = render_camera(ck.model, cam, scene, window, sampler, cfg.xi, cfg.render_chunk, threads)
            views.append(View(vid, cam, rgb, depth, held))
        write_view_set(out, views, scene, {"source": "checkpoint", "epoch": ck.epoch})
    log.info("rendered %d views to %s", len(views), out)
    return EXIT_OK


def cmd_eval(args) -> int:
    pred = _existing(args.pred, "prediction directory")
    ref = _existing(args.ref, "reference")
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate(pred, ref, out / "report.txt", cloud=args.cloud, threshold=args.threshold, seed=args.seed or 0)
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_oracle_check(args) -> int:
    # lenient load so that a malformed normal is reported by its check, not rejected up front
    scene = load_scene(_existing(args.scene, "scene file"), strict=False)
    report = run_oracle_check(scene, args.seed or 0)
    text = report.to_text()
    sys.stdout.write(text)
    if args.out or os.environ.get(OUT_ENV):
        out = _out_dir(args)
        out.mkdir(parents=True, exist_ok=True)
        (out / "oracle_check.txt").write_text(text)
    return EXIT_OK if report.passed else EXIT_FAILURE


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--out", help=f"output directory (default: ${OUT_ENV} when this flag is absent)")
    common.add_argument("--seed", type=int, default=None, help="single source of randomness")
    common.add_argument("--threads", type=int, default=None, help="worker cap (default: all cores; 1 is bit-deterministic)")
    common.add_argument("--quiet", action="store_true", help="only print errors")

    keys = config_key_help()
    p = _Parser(prog="vfnerf", description=__doc__, epilog=keys, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", parents=[common], help="ray-cast a dataset from a scene and camera file")
    g.add_argument("--scene", required=True)
    g.add_argument("--cameras", required=True)
    g.add_argument("--depth-noise", type=float, default=0.0, help="std of Gaussian depth noise (m)")
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", parents=[common], help="fit a model to a dataset", epilog=keys, formatter_class=argparse.RawDescriptionHelpFormatter)
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--config", help="training config YAML")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key (repeatable, last wins)")
    t.add_argument("--epochs", type=int, help="run length; annealing epochs scale with it")
    t.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("render", parents=[common], help="render color and depth for camera poses")
    r.add_argument("--checkpoint")
    r.add_argument("--cameras", required=True, help="camera file, dataset or render directory")
    r.add_argument("--oracle-vf", action="store_true", help="use the analytic field of the scene instead of the network")
    r.add_argument("--scene", help="scene file for --oracle-vf (default: the scene stored in --checkpoint)")
    r.set_defaults(fn=cmd_render)

    e = sub.add_parser("eval", parents=[common], help="PSNR, Chamfer distance and F1 against a reference")
    e.add_argument("--pred", required=True, help="rendered view set")
    e.add_argument("--ref", required=True, help="reference dataset directory or scene file")
    e.add_argument("--cloud", choices=("depth", "analytic"), help="reference cloud (default: depth for a directory, analytic for a scene)")
    e.add_argument("--threshold", type=float, default=0.05, help="precision/recall distance (m)")
    e.set_defaults(fn=cmd_eval)

    o = sub.add_parser("oracle-check", parents=[common], help="run the analytic self checks on a scene")
    o.add_argument("--scene", required=True)
    o.set_defaults(fn=cmd_oracle_check)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO, format="%(message)s", stream=sys.stderr, force=True)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print("configuration errors:\n" + "\n".join(f"  {p}" for p in exc.problems), file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, EvaluationError, MetricError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
