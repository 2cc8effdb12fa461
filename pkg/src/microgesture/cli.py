"""Command-line entry point: synth, prepare, train, eval, ensemble, ablate.

Exit codes: 0 success, 1 validation/config/usage error, 2 runtime failure.
Every run directory receives a frozen copy of the fully-resolved config
(config.yaml) so the run can be reproduced bit-identically.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import engine
from .config import (ConfigError, FusionConfig, RunConfig, apply_overrides,
                     dump_run_config, load_config_data, run_config_from_dict)
from .engine import EngineError
from .heatmaps import build_volume, save_frame_grids, write_volume
from .pose_io import (BUILTIN_LAYOUTS, ValidationError, get_layout,
                      load_manifest, synthesize_dataset, write_manifest)

logger = logging.getLogger(__name__)

OUT_ROOT_ENV = "MICROGESTURE_OUT_ROOT"


class _Parser(argparse.ArgumentParser):
    """argparse parser whose usage errors exit with code 1, not 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _resolve_out(out: str | None, command: str) -> Path:
    if out:
        return Path(out)
    root = os.environ.get(OUT_ROOT_ENV)
    if root:
        return Path(root) / command
    raise ConfigError(f"no output directory: pass --out or set {OUT_ROOT_ENV}")


def _load_config(args) -> RunConfig:
    path = Path(args.config)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    data = load_config_data(path)
    data = apply_overrides(data, args.set or [])
    if getattr(args, "seed", None) is not None:
        data["seed"] = args.seed
    return run_config_from_dict(data)


def _load_manifest_for(cfg: RunConfig):
    if not cfg.data.manifest:
        raise ConfigError("data.manifest is not set (use --set data.manifest=PATH)")
    path = Path(cfg.data.manifest)
    if not path.exists():
        raise ConfigError(f"manifest file {path} does not exist")
    return load_manifest(path)


def _parse_weights(text: str) -> FusionConfig:
    parts = text.split(":")
    if len(parts) != 2:
        raise ConfigError(f"weights must look like J:L (e.g. 2:3), got {text!r}")
    try:
        wj, wl = float(parts[0]), float(parts[1])
    except ValueError:
        raise ConfigError(f"weights must be numeric, got {text!r}") from None
    return FusionConfig(weight_joint=wj, weight_limb=wl)


def _freeze_config(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_run_config(cfg, out_dir / "config.yaml")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    out_dir = _resolve_out(args.out, "synth")
    layout = get_layout(args.layout)
    manifest = synthesize_dataset(args.clips, args.classes, layout, args.seed or 0,
                                  n_subjects=args.subjects)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.json"
    write_manifest(manifest, path)
    print(f"wrote {path} ({len(manifest.clips)} clips, {manifest.vocab.n} classes)")
    return 0


def cmd_prepare(args) -> int:
    cfg = _load_config(args)
    manifest = _load_manifest_for(cfg)
    out_dir = _resolve_out(args.out, "prepare")
    _freeze_config(cfg, out_dir)
    clips = manifest.clips_for(args.split)
    if not clips:
        raise ValidationError(f"split {args.split!r} is empty")
    if args.limit is not None:
        clips = clips[:args.limit]
    for clip in clips:
        seed = engine.derive_seed(cfg.seed, "sample", 0, clip.clip_id)
        volume = build_volume(clip, manifest.layout, cfg.volume, mode=args.mode, seed=seed)
        write_volume(volume, out_dir / f"{clip.clip_id}.vol")
        if args.png:
            save_frame_grids(volume, out_dir, clip.clip_id)
    print(f"wrote {len(clips)} volumes to {out_dir}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    manifest = _load_manifest_for(cfg)
    out_dir = _resolve_out(args.out, "train")
    result = engine.train(manifest, cfg, out_dir, resume=args.resume)
    print(f"trained {result.epochs_run} epochs "
          f"(train top1 {result.final_train_top1!r}, val top1 {result.final_val_top1!r})")
    print(f"last checkpoint: {result.last_checkpoint}")
    if result.best_checkpoint is not None:
        print(f"best checkpoint: {result.best_checkpoint}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    manifest = _load_manifest_for(cfg)
    out_dir = _resolve_out(args.out, "eval")
    _freeze_config(cfg, out_dir)
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        raise ConfigError(f"checkpoint {ckpt_path} does not exist")
    score_path = Path(args.scores) if args.scores else out_dir / f"{args.split}.scores"
    report, _, _ = engine.evaluate(manifest, cfg, ckpt_path, args.split,
                                   score_path=score_path,
                                   report_path=out_dir / "report.json")
    sys.stdout.write(engine.format_report(report, manifest.vocab))
    print(f"scores: {score_path}")
    return 0


def cmd_ensemble(args) -> int:
    fusion = _parse_weights(args.weights)
    for path in (args.joint, args.limb):
        if not Path(path).exists():
            raise ConfigError(f"score file {path} does not exist")
    report, fused = engine.fused_report(args.joint, args.limb, fusion)
    sys.stdout.write(engine.format_report(report))
    if args.out:
        _, labels, digest = engine.read_scores(args.joint)
        out_path = Path(args.out)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        engine.write_scores(out_path, fused.astype(np.float32), labels, digest)
        print(f"fused scores: {out_path}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    manifest = _load_manifest_for(cfg)
    out_dir = _resolve_out(args.out, "ablate")
    _freeze_config(cfg, out_dir)
    try:
        alphas = [float(a) for a in args.alphas.split(",") if a.strip() != ""]
    except ValueError:
        raise ConfigError(f"cannot parse alpha list {args.alphas!r}") from None
    rows = engine.ablate_alpha(manifest, cfg, alphas, out_dir)
    sys.stdout.write(engine.format_ablation_table(rows))
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="microgesture",
                     description="Skeleton heatmap-volume gesture classification.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help=f"output directory (default: ${OUT_ROOT_ENV}/<command>)")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("-v", "--verbose", action="store_true", help="info-level logging")

    cfg_common = argparse.ArgumentParser(add_help=False)
    cfg_common.add_argument("--config", required=True, help="run config file (YAML)")
    cfg_common.add_argument("--set", action="append", metavar="KEY=VALUE",
                            help="dotted-key config override, e.g. objective.alpha=30")

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--clips", type=int, required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--layout", default="toy_5", choices=sorted(BUILTIN_LAYOUTS))
    p.add_argument("--subjects", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", parents=[common, cfg_common],
                       help="render heatmap volumes to files")
    p.add_argument("--split", default="test")
    p.add_argument("--mode", default="test", choices=("test", "train"))
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--png", action="store_true", help="also save per-frame grid images")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", parents=[common, cfg_common], help="train a model")
    p.add_argument("--resume", action="store_true", help="continue from last.ckpt.npz")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common, cfg_common],
                       help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--scores", help="score file path (default <out>/<split>.scores)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ensemble", parents=[common],
                       help="fuse two score files and report metrics")
    p.add_argument("--joint", required=True, help="joint-modality score file")
    p.add_argument("--limb", required=True, help="limb-modality score file")
    p.add_argument("--weights", default="2:3", help="fusion weights as J:L")
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("ablate", parents=[common, cfg_common],
                       help="train+eval once per alpha and tabulate")
    p.add_argument("--alphas", default="1,10,20,30,40,50",
                   help="comma-separated alpha values")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
