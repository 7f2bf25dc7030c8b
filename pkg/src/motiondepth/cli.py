"""Command-line entry point: ``python -m motiondepth <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from . import evaluate
from .errors import MotionDepthError, ParameterError
from .pipeline import PipelineConfig, evaluate_model, infer, load_config, load_model, predict_depths, save_config, train
from .synthdata import generate_dataset, read_dataset, write_dataset

SCENE_KEYS = ("width", "height", "n_frames", "n_sprites", "moving_fraction", "camera_moves", "dynamic")


def _resolution(text):
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"resolution must look like 192x64, got {text!r}")
    return w, h


def _parser():
    p = argparse.ArgumentParser(prog="motiondepth", description="Motion-aware multi-frame depth: data, training, evaluation.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=False, needs_ckpt=False):
        sp.add_argument("--config", type=Path, help="YAML pipeline config; flags override its keys")
        sp.add_argument("--data", type=Path, required=True, help="dataset root written by synth")
        sp.add_argument("--split", default="train" if sp.prog.endswith("train") else "test")
        sp.add_argument("--out", type=Path, required=out_required)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--resolution", type=_resolution, help="WIDTHxHEIGHT")
        sp.add_argument("--no-flow", action="store_true", help="skip motion masking (no-flow ablation)")
        sp.add_argument("--no-volume-attention", action="store_true")
        sp.add_argument("--prior-only", action="store_true", help="report the coarse single-frame depth")
        if needs_ckpt:
            sp.add_argument("--ckpt", type=Path, required=True)

    s = sub.add_parser("synth", help="render a synthetic dataset")
    s.add_argument("--spec", type=Path, required=True, help="YAML scene spec")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--resolution", type=_resolution)

    common(sub.add_parser("train", help="train a model"), out_required=True)
    for name in ("eval-depth", "eval-dynamic", "eval-odom"):
        common(sub.add_parser(name, help=f"{name.split('-')[1]} metrics of a checkpoint"), needs_ckpt=True)
    common(sub.add_parser("infer", help="depth and poses for every sample"), out_required=True, needs_ckpt=True)
    common(sub.add_parser("plot-errors", help="error-map PNGs"), out_required=True, needs_ckpt=True)
    return p


def _overrides(args):
    out = {}
    if args.seed is not None:
        out["seed"] = args.seed
    if args.resolution is not None:
        out["width"], out["height"] = args.resolution
    if args.no_flow:
        out["use_flow"] = False
    if args.no_volume_attention:
        out["use_volume_attention"] = False
    if args.prior_only:
        out["prior_depth_only"] = True
    return out


def _config(args):
    base = load_config(args.config) if args.config else PipelineConfig()
    return base.replace(**_overrides(args))


def _model(args):
    """Checkpoint's own config, unless a config file or flags ask for a specific one."""
    if args.config or _overrides(args):
        return load_model(args.ckpt, _config(args))
    return load_model(args.ckpt)


def _snapshot(args, config=None, extra=None):
    if args.out is None:
        return
    args.out.mkdir(parents=True, exist_ok=True)
    if config is not None:
        save_config(config, args.out / "config.yaml")
    record = {"command": args.command, **{k: str(v) for k, v in vars(args).items() if v is not None and k != "command"}}
    if extra:
        record.update(extra)
    (args.out / "command.yaml").write_text(yaml.safe_dump(record, sort_keys=True))


def _samples(args):
    samples = list(read_dataset(args.data, args.split))
    if not samples:
        raise ParameterError(f"no samples in split {args.split!r} of {args.data}")
    return samples


def cmd_synth(args):
    try:
        spec = yaml.safe_load(args.spec.read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ParameterError(f"cannot read scene spec {args.spec}: {exc}") from exc
    if not isinstance(spec, dict):
        raise ParameterError(f"scene spec {args.spec} must be a key-value mapping")
    if args.seed is not None:
        spec["seed"] = args.seed
    if args.resolution is not None:
        spec["width"], spec["height"] = args.resolution
    unknown = set(spec) - set(SCENE_KEYS) - {"seed", "splits"}
    if unknown:
        raise ParameterError(f"unknown scene spec keys: {', '.join(sorted(unknown))}")
    splits = spec.get("splits", {"train": 100, "test": 16})
    kwargs = {k: spec[k] for k in SCENE_KEYS if k in spec}
    if "n_sprites" in kwargs:
        kwargs["n_sprites"] = tuple(kwargs["n_sprites"])
    seeds = np.random.SeedSequence(int(spec.get("seed", 0))).spawn(len(splits))
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "manifest.txt").write_text("")
    for (split, n), ss in zip(splits.items(), seeds):
        write_dataset(generate_dataset(int(n), seed=int(ss.generate_state(1)[0]), **kwargs), args.out, split)
        print(f"{split}: {n} scenes")
    _snapshot(args, extra={"spec": {**spec, "splits": dict(splits)}})
    return 0


def cmd_train(args):
    config = _config(args)
    _snapshot(args, config)
    res = train(_samples(args), config, out_dir=args.out)
    last = res.records[-1]["loss"]["total"] if res.records else float("nan")
    print(f"trained {config.variant} for {config.steps} steps, final loss {last:.6f}, checkpoint {res.checkpoint}")
    return 0


def _write_report(args, rows, aggregate):
    if args.out is None:
        return
    with (args.out / "metrics.jsonl").open("w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
        fh.write(json.dumps({"aggregate": aggregate}) + "\n")


def cmd_eval(args):
    model, config = _model(args)
    _snapshot(args, config)
    dynamic = args.command == "eval-dynamic"
    rows, per = [], []
    for sample, t, pred in predict_depths(model, _samples(args), config):
        gt = sample.depths[t]
        if dynamic:
            if not (sample.motion_seg[t] & gt.valid).any():
                continue
            m = evaluate.dynamic_region_metrics(pred, gt.values, gt.valid, sample.motion_seg[t],
                                                config.eval_min_depth, config.eval_max_depth)
        else:
            m = evaluate.depth_metrics(pred, gt.values, gt.valid, config.eval_min_depth, config.eval_max_depth)
        per.append(m)
        rows.append({"sample": sample.name, "target": t, **m.as_dict()})
    mean = evaluate.mean_metrics(per)
    print(evaluate.format_table({config.variant + (" (dynamic)" if dynamic else ""): mean}))
    _write_report(args, rows, mean.as_dict())
    return 0


def cmd_eval_odom(args):
    model, config = _model(args)
    # odometry always comes from the pose network
    run_config = config.replace(pose_source="network")
    _snapshot(args, config)
    rows, t_err, r_err = [], [], []
    for sample in _samples(args):
        res = infer(sample.frames, model, run_config, sample.intrinsics, flows=sample.flows)
        m = evaluate.odometry_drift(res.trajectory(), list(sample.poses))
        t_err.append(m.translation_drift)
        r_err.append(m.rotation_drift)
        rows.append({"sample": sample.name, "translation_drift": m.translation_drift, "rotation_drift": m.rotation_drift})
    agg = {"translation_drift": float(np.mean(t_err)), "rotation_drift": float(np.mean(r_err))}
    print(f"Tr (m) {agg['translation_drift']:.4f}  R (deg) {agg['rotation_drift']:.4f}  over {len(rows)} sequences")
    _write_report(args, rows, agg)
    return 0


def cmd_infer(args):
    model, config = _model(args)
    _snapshot(args, config)
    for sample in _samples(args):
        res = infer(sample.frames, model, config, sample.intrinsics, flows=sample.flows, poses=sample.poses)
        target = args.out / sample.name
        target.mkdir(parents=True, exist_ok=True)
        for k, d in enumerate(res.depths):
            np.save(target / f"depth_{k:02d}.npy", d.astype(np.float32))
        lines = [" ".join(f"{v:.9g}" for v in P.matrix()[:3].ravel()) for P in res.trajectory()]
        (target / "trajectory.txt").write_text("\n".join(lines) + "\n")
    print(f"wrote predictions to {args.out}")
    return 0


def cmd_plot_errors(args):
    model, config = _model(args)
    _snapshot(args, config)
    n = 0
    for sample, t, pred in predict_depths(model, _samples(args), config):
        gt = sample.depths[t]
        scale = np.median(gt.values[gt.valid]) / np.median(pred[gt.valid])
        evaluate.emit_error_map(pred * scale, gt.values, args.out / f"{sample.name}_{t:02d}.png", gt.valid)
        n += 1
    print(f"wrote {n} error maps to {args.out}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval-depth": cmd_eval,
    "eval-dynamic": cmd_eval,
    "eval-odom": cmd_eval_odom,
    "infer": cmd_infer,
    "plot-errors": cmd_plot_errors,
}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (MotionDepthError, OSError) as exc:
        print(f"motiondepth {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
