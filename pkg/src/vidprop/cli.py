"""Command-line driver: ``vidprop <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure.  Every command writes ``manifest.txt`` into its output directory
holding the resolved configuration (``config.*`` keys) and results; passing
that file back with ``--config`` reproduces the run.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .codec import LatentCodec
from .conditions import spatial_conditions
from .denoiser import Denoiser, DenoiserConfig, load_checkpoint, save_checkpoint
from .diffusion import DEFAULT_STEPS, GUIDANCE_SCALE, build_schedule, ddim_invert, ddim_sample, guided
from .editprop import (
    BatchPlan,
    EditSpec,
    FlowCopyModel,
    Propagator,
    input_consistency_flows,
    interpolate_nonkeys,
    key_flows,
    run_autoregressive,
    temporal_consistency,
)
from .flow import flows_to_first, warp_clip
from .media import (
    DimensionError,
    FormatError,
    VideoClip,
    ensure_dir,
    load_clip,
    read_manifest,
    save_clip,
    save_frame,
    save_gray,
    write_flow,
    write_manifest,
    write_tensor,
    write_tensor_bundle,
)
from .scenes import SCENES, make_scene
from .training import ClipDataset, NumericError, SourceClip, TrainConfig, make_bundle, train, write_train_config

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# helpers


def _depth_sources(clip_dir, depth_dir, n):
    d = Path(depth_dir) if depth_dir else Path(clip_dir) / "depth"
    if not d.is_dir():
        raise FileNotFoundError(f"depth control needs a depth directory; {d} not found")
    out = []
    for i in range(n):
        for ext in ("fvt", "pgm"):
            p = d / f"depth_{i:05d}.{ext}"
            if p.exists():
                out.append(p)
                break
        else:
            raise FileNotFoundError(f"{d}: missing depth_{i:05d}.fvt/.pgm")
    return out


def _conditions(args, clip_dir, frames):
    if args.control == "depth":
        return spatial_conditions(frames, "depth", _depth_sources(clip_dir, args.depth, len(frames)))
    return spatial_conditions(frames, "canny")


def _write_run_manifest(out, args, results=None):
    entries = {"command": args.command, "version": __version__}
    for key, value in sorted(vars(args).items()):
        if key in ("command", "config", "func"):
            continue
        if isinstance(value, (list, tuple)):
            value = " ".join(str(v) for v in value)
        entries[f"config.{key}"] = "" if value is None else value
    for key, value in (results or {}).items():
        entries[f"result.{key}"] = value
    write_manifest(entries, Path(out) / "manifest.txt")


def _fmt(x):
    return f"{x:.8g}"


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    sc = make_scene(args.scene, args.size, args.frames, seed=args.seed)
    out = ensure_dir(args.output)
    save_clip(sc.clip(fps=args.fps), out)
    gt = ensure_dir(out / "flow")
    dd = ensure_dir(out / "depth")
    for i in range(args.frames):
        bwd, occ = sc.flow(i, 0)
        fwd, occ_f = sc.flow(0, i)
        write_flow(bwd, gt / f"bwd_{i:05d}.flo")
        write_flow(fwd, gt / f"fwd_{i:05d}.flo")
        save_gray(occ, gt / f"occ_bwd_{i:05d}.pgm")
        save_gray(occ_f, gt / f"occ_fwd_{i:05d}.pgm")
        write_tensor(sc.depth(i), dd / f"depth_{i:05d}.fvt")
    _write_run_manifest(out, args, {"frames": args.frames})
    return EXIT_OK


def cmd_flow(args):
    clip = load_clip(args.input)
    out = ensure_dir(args.output)
    cf = flows_to_first(clip.frames)
    for i in range(len(clip)):
        write_flow(cf.bwd[i], out / f"bwd_{i:05d}.flo")
        write_flow(cf.fwd[i], out / f"fwd_{i:05d}.flo")
        save_gray(cf.occ_bwd[i], out / f"occ_bwd_{i:05d}.pgm")
        save_gray(cf.occ_fwd[i], out / f"occ_fwd_{i:05d}.pgm")
    occ_frac = float(cf.occ_bwd[1:].mean()) if len(clip) > 1 else 0.0
    _write_run_manifest(out, args, {"frames": len(clip), "occluded_fraction": _fmt(occ_frac)})
    return EXIT_OK


def cmd_warp(args):
    clip = load_clip(args.input)
    first = clip.frames[0]
    if args.editor != "identity":
        first = EditSpec(args.editor, params=_editor_params(args)).apply(first)
    cf = flows_to_first(clip.frames)
    warped = warp_clip(first, list(cf.bwd), list(cf.occ_bwd), fill=args.fill, fps=clip.fps, interval=clip.frame_interval)
    out = ensure_dir(args.output)
    save_clip(warped, out)
    _write_run_manifest(out, args, {"frames": len(warped)})
    return EXIT_OK


def cmd_conditions(args):
    clip = load_clip(args.input)
    conds = _conditions(args, args.input, clip.frames)
    out = ensure_dir(args.output)
    save_clip(VideoClip(conds, fps=clip.fps, frame_interval=clip.frame_interval), out)
    _write_run_manifest(out, args, {"frames": len(conds), "mean": _fmt(float(conds.mean()))})
    return EXIT_OK


def cmd_train(args):
    sources = []
    for k, d in enumerate(args.input):
        clip = load_clip(d)
        depth_dir = args.depth if len(args.input) == 1 else None
        a = argparse.Namespace(control=args.control, depth=depth_dir)
        sources.append(SourceClip(clip.frames, _conditions(a, d, clip.frames), prompt=args.prompt, name=Path(d).name))
    full = args.conditions == "full"
    cfg = DenoiserConfig(use_flow=full, use_occlusion=full, use_first_frame=full, seed=args.seed)
    model = Denoiser(cfg)
    tcfg = TrainConfig(frames=args.batch_frames, intervals=tuple(args.intervals), steps=args.steps, lr=args.lr, seed=args.seed)
    out = ensure_dir(args.output)
    result = train(model, ClipDataset(sources), tcfg, build_schedule(), log_path=out / "loss.csv")
    save_checkpoint(model, out / "checkpoint", extra={"steps": args.steps, "control": args.control})
    write_train_config(tcfg, out / "config.txt")
    last = result.losses[-min(50, len(result.losses)) :] if result.losses else [float("nan")]
    _write_run_manifest(out, args, {"final_loss": _fmt(float(np.mean(last))), "skipped": len(result.skipped)})
    return EXIT_OK


def _model(args, schedule):
    if args.checkpoint:
        return load_checkpoint(args.checkpoint)
    return FlowCopyModel(schedule)


def cmd_invert(args):
    clip = load_clip(args.input)
    schedule = build_schedule()
    codec = LatentCodec()
    model = load_checkpoint(args.checkpoint) if args.checkpoint else Denoiser(DenoiserConfig(seed=args.seed))
    frames = clip.frames
    cf = flows_to_first(frames)
    bundle = make_bundle(frames[0], cf, _conditions(args, args.input, frames), args.prompt, codec)
    z0 = codec.to_model(codec.encode_clip(frames))
    zT, store = ddim_invert(schedule, model.bind(bundle), z0, args.steps, refine=args.refine)
    out = ensure_dir(args.output)
    write_tensor(zT, out / "z_T.fvt")
    write_tensor_bundle(store.to_arrays(), out / "attention", manifest_name="maps.txt")
    rec = ddim_sample(schedule, model.bind(bundle), zT, args.steps, store)
    err = float(np.abs(rec - z0).max())
    if not np.isfinite(err):
        raise NumericError("inversion produced non-finite latents")
    _write_run_manifest(out, args, {"maps": len(store), "roundtrip_max_abs": _fmt(err)})
    return EXIT_OK


def _editor_params(args):
    if args.editor == "colormap":
        return {"hue": args.hue, "gain": tuple(args.gain), "bias": tuple(args.bias)}
    return {}


def _generate(args, timer=None):
    """Shared by generate and bench; returns (keys, frames, report, extra)."""
    timer = timer or (lambda name: _NullTimer())
    clip = load_clip(args.input)
    frames = clip.frames
    schedule = build_schedule()
    codec = LatentCodec()
    model = _model(args, schedule)
    with timer("conditions"):
        spatial = _conditions(args, args.input, frames)
    plan = BatchPlan(args.interval, args.batch_frames, args.batches)
    edit = EditSpec(args.editor, args.prompt, _editor_params(args))
    prop = Propagator(
        model, schedule, codec, steps=args.steps, cfg_scale=args.cfg_scale,
        injection=not args.no_injection, prompt=args.prompt, refine=args.refine,
    )
    keys, report = run_autoregressive(
        prop, frames, edit, plan, spatial, seed=args.seed, calibration=not args.no_calibration, timer=timer
    )
    key_inputs = frames[report.key_indices]
    with timer("flow"):
        kf = key_flows(key_inputs)
    with timer("interpolation"):
        full, _ = interpolate_nonkeys(keys, args.interval, kf)
    if not np.all(np.isfinite(full)):
        raise NumericError("generated frames contain non-finite values")
    with timer("flow"):
        bwd, occ = input_consistency_flows(key_inputs)
    tc, _ = temporal_consistency(keys, bwd, occ) if len(keys) > 1 else (0.0, [])
    mse = float(np.mean((keys - key_inputs) ** 2))
    extra = {"key_frames": len(keys), "output_frames": len(full), "temporal_consistency": _fmt(tc), "key_mse_vs_input": _fmt(mse)}
    return clip, keys, full, report, extra


class _NullTimer:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def cmd_generate(args):
    clip, keys, full, report, extra = _generate(args)
    out = ensure_dir(args.output)
    save_clip(VideoClip(keys, fps=clip.fps, frame_interval=args.interval), out / "keys")
    save_clip(VideoClip(full, fps=clip.fps), out / "frames")
    extra["notes"] = " | ".join(report.notes) if report.notes else "none"
    extra["batch_first_luma"] = ",".join(_fmt(m) for m in report.first_means)
    _write_run_manifest(out, args, extra)
    return EXIT_OK


class StageTimer:
    def __init__(self):
        self.totals: dict = {}

    def __call__(self, name):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.totals[name] = timer.totals.get(name, 0.0) + time.perf_counter() - self.t0
                return False

        return _Ctx()


BENCH_STAGES = ("flow", "warping", "conditions", "inversion", "keyframe_sampling", "interpolation")


def cmd_bench(args):
    timer = StageTimer()
    t0 = time.perf_counter()
    _generate(args, timer)
    total = time.perf_counter() - t0
    out = ensure_dir(args.output)
    with open(out / "bench.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "seconds"])
        for stage in BENCH_STAGES:
            w.writerow([stage, f"{timer.totals.get(stage, 0.0):.6f}"])
        w.writerow(["total", f"{total:.6f}"])
    staged = sum(timer.totals.values())
    _write_run_manifest(out, args, {"total_seconds": f"{total:.3f}", "staged_fraction": f"{staged / total:.3f}"})
    return EXIT_OK


def cmd_metrics(args):
    gen = load_clip(args.input)
    ref = load_clip(args.reference)
    if gen.frames.shape != ref.frames.shape:
        raise DimensionError(f"clip shapes differ: {gen.frames.shape} vs {ref.frames.shape}")
    bwd, occ = input_consistency_flows(ref.frames)
    tc, skipped = temporal_consistency(gen.frames, bwd, occ) if len(gen) > 1 else (0.0, [])
    mse = float(np.mean((gen.frames - ref.frames) ** 2))
    out = ensure_dir(args.output)
    _write_run_manifest(out, args, {"temporal_consistency": _fmt(tc), "mse": _fmt(mse), "skipped_pairs": len(skipped)})
    print(f"temporal_consistency={_fmt(tc)} mse={_fmt(mse)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _common(p, control=True, model=False, prompt=True):
    p.add_argument("--input")
    p.add_argument("--output")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="key=value manifest whose config.* entries set defaults")
    if control:
        p.add_argument("--control", choices=("canny", "depth"), default="canny")
        p.add_argument("--depth", help="directory of depth_NNNNN.fvt/.pgm (default: <input>/depth)")
    if prompt:
        p.add_argument("--prompt", default="")
    if model:
        p.add_argument("--checkpoint", help="trained model directory (omitted: flow-copy oracle)")
        p.add_argument("--steps", type=int, default=DEFAULT_STEPS)
        p.add_argument("--refine", type=int, default=50, help="max fixed-point iterations per inversion step")


def _generation_flags(p):
    p.add_argument("--interval", type=int, default=4)
    p.add_argument("--batch-frames", type=int, default=16)
    p.add_argument("--batches", type=int, default=1)
    p.add_argument("--cfg-scale", type=float, default=GUIDANCE_SCALE)
    p.add_argument("--no-calibration", action="store_true")
    p.add_argument("--no-injection", action="store_true")
    p.add_argument("--editor", default="identity", help="identity, colormap or file:<path>")
    p.add_argument("--hue", type=float, default=120.0)
    p.add_argument("--gain", type=float, nargs=3, default=(1.0, 1.0, 1.0))
    p.add_argument("--bias", type=float, nargs=3, default=(0.0, 0.0, 0.0))


def build_parser():
    parser = argparse.ArgumentParser(prog="vidprop", description="First-frame edit propagation on toy video clips.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a procedural clip with ground-truth flow and depth")
    p.add_argument("--scene", choices=SCENES, default="translating-square")
    p.add_argument("--frames", type=int, default=12)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--fps", type=int, default=30)
    p.add_argument("--output")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("flow", help="flows and occlusion masks between frame 1 and every frame")
    _common(p, control=False, prompt=False)
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("warp", help="flow-warped video of the (optionally edited) first frame")
    _common(p, control=False, prompt=False)
    p.add_argument("--fill", type=float, default=0.5)
    p.add_argument("--editor", default="identity")
    p.add_argument("--hue", type=float, default=120.0)
    p.add_argument("--gain", type=float, nargs=3, default=(1.0, 1.0, 1.0))
    p.add_argument("--bias", type=float, nargs=3, default=(0.0, 0.0, 0.0))
    p.set_defaults(func=cmd_warp)

    p = sub.add_parser("conditions", help="spatial condition images")
    _common(p, prompt=False)
    p.set_defaults(func=cmd_conditions)

    p = sub.add_parser("train", help="train the toy denoiser")
    p.add_argument("--input", action="append", help="clip directory (repeatable)")
    p.add_argument("--output")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--control", choices=("canny", "depth"), default="canny")
    p.add_argument("--depth")
    p.add_argument("--prompt", default="")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-frames", type=int, default=4)
    p.add_argument("--intervals", type=int, nargs="+", default=[1, 2])
    p.add_argument("--conditions", choices=("full", "spatial"), default="full")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("invert", help="DDIM-invert a clip and store attention maps")
    _common(p, model=True)
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("generate", help="edit the first frame and propagate it")
    _common(p, model=True)
    _generation_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("bench", help="per-stage wall-clock breakdown of a generate run")
    _common(p, model=True)
    _generation_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("metrics", help="temporal consistency and MSE against a reference clip")
    p.add_argument("--input")
    p.add_argument("--reference")
    p.add_argument("--output")
    p.add_argument("--config")
    p.set_defaults(func=cmd_metrics)
    return parser


def _apply_config(parser, argv, args):
    """Re-parse with defaults taken from a manifest's config.* entries."""
    entries = read_manifest(args.config)
    if entries.get("command", args.command) != args.command:
        raise ConfigError(f"config is for '{entries['command']}', not '{args.command}'")
    known = {k for k in vars(args) if k not in ("command", "config", "func")}
    overrides = {}
    for key, value in entries.items():
        if key in ("command", "version") or key.startswith("result."):
            continue
        name = key[7:] if key.startswith("config.") else key
        if name not in known:
            raise ConfigError(f"unknown config key {key!r}")
        overrides[name] = value
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices[args.command]
    actions = {a.dest: a for a in sub._actions}
    # command-line flags win over the file
    sub_argv = []
    for name, value in overrides.items():
        action = actions[name]
        flag = action.option_strings[-1]
        if any(a in action.option_strings or a.split("=", 1)[0] in action.option_strings for a in argv):
            continue
        if isinstance(action, argparse._StoreTrueAction):
            if value.lower() in ("1", "true", "yes"):
                sub_argv.append(flag)
        elif isinstance(action, argparse._AppendAction):
            for v in value.split():
                sub_argv += [flag, v]
        elif action.nargs is not None:
            sub_argv += [flag] + value.split()
        elif value != "":
            sub_argv += [flag, value]
    return parser.parse_args(argv + sub_argv)


def _check_required(args):
    for name in ("input", "output", "reference"):
        if hasattr(args, name) and getattr(args, name) in (None, []):
            raise ConfigError(f"--{name} is required (on the command line or via --config)")


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if getattr(args, "config", None):
            args = _apply_config(parser, argv, args)
        _check_required(args)
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, FormatError, DimensionError, IsADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
