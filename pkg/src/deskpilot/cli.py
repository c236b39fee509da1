"""Command-line entry point: ``deskpilot <verb> [options]``.

Exit codes: 0 ok, 2 bad configuration, 3 missing or corrupt data, 4 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io, nn
from .camera import CameraIntrinsics, CameraRig, CropSpec, ImagingError, network_input, rgb_to_yuv
from .geometry import DynamicsConfig, GeometryError
from .roadworld import IdealDriver, NoisyDriver, RenderOptions, TrackError, collect_run
from .simulator import SimConfig, SimulationError, closed_loop_run, oracle_policy
from .training import (AugmentConfig, SelectionConfig, TrainConfig, TrainingError,
                       TrainingDiverged, train)

log = logging.getLogger("deskpilot")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4
CHECKPOINT_NAME = "checkpoint.pltn"


class _Fail(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _need(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise _Fail(EXIT_DATA, f"{what} not found: {p}")
    return p


def _rig_from_config(d: dict | None) -> CameraRig:
    if not d:
        return CameraRig()
    unknown = set(d) - {"width", "height", "focal"}
    if unknown:
        raise io.ConfigError(f"unknown field(s) {sorted(unknown)}", "camera")
    base = CameraIntrinsics()
    w = int(d.get("width", base.width))
    scale = w / base.width
    intr = base.scaled(scale)
    if "height" in d and int(d["height"]) != intr.height:
        raise io.ConfigError("height must keep the 4:3 aspect of the default camera", "camera.height")
    if "focal" in d:
        intr = CameraIntrinsics(intr.width, intr.height, float(d["focal"]), intr.principal_point)
    return CameraRig(intr)


# ---------------------------------------------------------------------------
# verbs

def cmd_gen_track(args) -> str:
    if args.config is None:
        raise io.ConfigError("gen-track needs --config", "--config")
    track = io.load_track(_need(args.config, "track config"))
    out = _out_dir(args) / "track.yaml"
    out.write_text(io.dump_track(track))
    geom = track.geometry()
    return f"track length={geom.total_length:.1f}m segments={len(track.segments)} path={out}"


COLLECT_KEYS = {"camera", "speed", "tick_rate", "driver", "tracks", "render_noise"}


def cmd_collect(args) -> str:
    if args.config is None:
        raise io.ConfigError("collect needs --config", "--config")
    cfg = io.read_yaml(_need(args.config, "collect config"))
    unknown = set(cfg) - COLLECT_KEYS
    if unknown:
        raise io.ConfigError(f"unknown field(s) {sorted(unknown)}", str(args.config))
    rig = _rig_from_config(cfg.get("camera"))
    speed = float(cfg.get("speed", 10.0))
    rate = float(cfg.get("tick_rate", 10.0))
    dyn = DynamicsConfig(1.0 / rate, speed)
    drv = cfg.get("driver", {}) or {}
    tracks = cfg.get("tracks")
    if not isinstance(tracks, list) or not tracks:
        raise io.ConfigError("expected a non-empty list", "tracks")
    opts = RenderOptions(noise=bool(cfg.get("render_noise", True)))
    base = Path(args.config).parent
    runs = []
    for i, entry in enumerate(tracks):
        where = f"tracks[{i}]"
        if not isinstance(entry, dict):
            raise io.ConfigError("expected a mapping", where)
        entry = dict(entry)
        run_id = str(entry.pop("run_id", f"run{i:03d}"))
        label = str(entry.pop("activity_label", "lane_keeping"))
        if "file" in entry:
            track = io.load_track(_need(base / entry.pop("file"), "track file"))
        else:
            track = io.track_from_dict(entry, where)
        seed = int(args.seed) * 1000 + i
        if drv.get("kind", "noisy") == "ideal":
            driver = IdealDriver()
        else:
            driver = NoisyDriver(float(drv.get("sigma_offset", 0.15)),
                                 float(drv.get("sigma_heading", 0.01)), seed=seed)
        run = collect_run(track, driver, dyn, rig, run_id=run_id, activity_label=label, opts=opts)
        if isinstance(driver, IdealDriver):
            run.sigma_offset = float(np.std(run.offsets))
            run.sigma_heading = float(np.std(run.headings))
        runs.append(run)
    path = io.save_dataset(runs, _out_dir(args), {"seed": int(args.seed)})
    frames = sum(len(r) for r in runs)
    return f"collected runs={len(runs)} ticks={frames} manifest={path}"


def _load_runs(args):
    _need(Path(args.data) / "manifest.json", "dataset manifest")
    return io.load_dataset(args.data)


def cmd_train(args) -> str:
    runs, manifest = _load_runs(args)
    if args.augment:
        aug = AugmentConfig.from_human(manifest["human_sigma_offset"], manifest["human_sigma_heading"])
        cams = tuple(runs[0].frames.rig.camera_ids)
    else:
        aug = AugmentConfig.disabled()
        cams = ("center",)
    sel = SelectionConfig(sample_rate=args.sample_rate, cameras=cams, seed=args.seed)
    tcfg = TrainConfig(batch_size=args.batch_size, epochs=args.epochs, lr=args.lr,
                       momentum=args.momentum, seed=args.seed, val_fraction=args.val_fraction)
    out = _out_dir(args)
    try:
        ckpt, history = train(runs, sel, aug, tcfg)
    except TrainingDiverged as e:
        nn.save_checkpoint(e.last_good, out / CHECKPOINT_NAME)
        raise
    nn.save_checkpoint(ckpt, out / CHECKPOINT_NAME)
    io.write_history(history, out / "loss_history.csv")
    last = history[-1] if history else (0, float("nan"), float("nan"))
    return (f"trained epochs={len(history)} best_epoch={ckpt.metadata['epoch']} "
            f"train_mse={last[1]:.4g} val_mse={last[2]:.4g} checkpoint={out / CHECKPOINT_NAME}")


def _select(runs, names):
    if not names:
        return runs
    chosen = [r for r in runs if r.run_id in set(names)]
    missing = set(names) - {r.run_id for r in chosen}
    if missing:
        raise _Fail(EXIT_DATA, f"unknown run id(s) {sorted(missing)}")
    return chosen


def _simulate_runs(args, runs, out: Path):
    if args.checkpoint == "oracle":
        policy, needs_image = oracle_policy, False
    else:
        policy = nn.load_checkpoint(_need(args.checkpoint, "checkpoint"))
        needs_image = True
    cfg = SimConfig(mode=args.mode)
    traces = []
    for run in runs:
        tr = closed_loop_run(policy, run, cfg, needs_image=needs_image)
        io.write_trace(tr, out / f"trace_{run.run_id}.csv")
        io.write_summary(tr.summary(), out / f"summary_{run.run_id}.json")
        traces.append(tr)
    summary = io.aggregate_autonomy(traces)
    io.write_summary(summary, out / "summary.json")
    return traces, summary


def cmd_simulate(args) -> str:
    if args.from_trace:
        tr = io.read_trace(_need(args.from_trace, "trace"))
        if args.out_dir:
            io.write_summary(tr.summary(), _out_dir(args) / "summary.json")
        return f"autonomy={tr.summary()['autonomy_pct']:.1f}%"
    if not args.data or not args.checkpoint:
        raise io.ConfigError("simulate needs --data and --checkpoint (or --from-trace)", "arguments")
    runs, _ = _load_runs(args)
    _, s = _simulate_runs(args, _select(runs, args.runs), _out_dir(args))
    return (f"autonomy={s['autonomy_pct']:.1f}% interventions={s['interventions']} "
            f"elapsed={s['elapsed_s']:.1f}s mode={args.mode}")


def cmd_evaluate(args) -> str:
    runs, _ = _load_runs(args)
    runs = _select(runs, args.runs)
    out = _out_dir(args)
    ckpt = nn.load_checkpoint(_need(args.checkpoint, "checkpoint"))
    rig = runs[0].frames.rig
    crop = CropSpec.for_camera(rig.intrinsics, rig.extrinsics("center"),
                               ckpt.spec.input_shape[2], ckpt.spec.input_shape[1])
    err = []
    for run in runs:
        for tick in range(len(run)):
            x = network_input(run.frame(tick, "center"), rig.intrinsics, rig.extrinsics("center"),
                              crop).astype(np.float32)
            err.append(float(nn.predict(ckpt.spec, ckpt.weights, x)) - float(run.commands[tick]))
    mse = float(np.mean(np.square(err)))
    _, s = _simulate_runs(args, runs, out)
    report = {"offline_mse": mse, "frames": len(err), **s, "mode": args.mode}
    io.write_summary(report, out / "evaluation.json")
    return f"evaluate mse={mse:.4g} autonomy={s['autonomy_pct']:.1f}% runs={len(runs)}"


def _viz_input(args, ckpt):
    img = io.read_png(_need(args.image, "image"))
    _, h, w = img.pixels.shape
    c, ih, iw = ckpt.spec.input_shape
    if (h, w) == (ih, iw):
        return rgb_to_yuv(img).pixels.astype(np.float32)
    intr = CameraIntrinsics().scaled(w / CameraIntrinsics().width)
    if (intr.width, intr.height) != (w, h):
        raise _Fail(EXIT_DATA, f"image {w}x{h} is neither a network input nor a camera frame")
    rig = CameraRig(intr)
    extr = rig.extrinsics("center")
    crop = CropSpec.for_camera(intr, extr, iw, ih)
    return network_input(img, intr, extr, crop).astype(np.float32)


def cmd_viz_features(args) -> str:
    from . import viz
    ckpt = nn.load_checkpoint(_need(args.checkpoint, "checkpoint"))
    x = _viz_input(args, ckpt)
    out = _out_dir(args)
    paths = []
    for layer, grid in zip((0, 1), viz.feature_grids(ckpt, x)):
        p = out / f"conv{layer + 1}_features.png"
        viz.save_grid(grid, p)
        paths.append(str(p))
    return "feature grids " + " ".join(paths)


def cmd_plot(args) -> str:
    from . import viz
    out = _out_dir(args)
    made = []
    if args.history:
        viz.plot_history(io.read_history(_need(args.history, "loss history")), out / "loss_history.png")
        made.append("loss_history.png")
    if args.trace:
        viz.plot_trace(io.read_trace(_need(args.trace, "trace")), out / "trace.png")
        made.append("trace.png")
    if not made:
        raise io.ConfigError("plot needs --history and/or --trace", "arguments")
    return "plots " + " ".join(str(out / m) for m in made)


# ---------------------------------------------------------------------------
# argument parsing

def _common(p: argparse.ArgumentParser, out_default: str = "out"):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None, help="YAML file; its keys become option defaults")
    p.add_argument("--out-dir", default=out_default)
    p.add_argument("--mode", choices=("replay", "live"), default="replay")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="deskpilot", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen-track", help="validate a track config and write its canonical form")
    _common(p)
    p.set_defaults(func=cmd_gen_track, config_is_options=False)

    p = sub.add_parser("collect", help="drive tracks with the simulated human and save a dataset")
    _common(p)
    p.set_defaults(func=cmd_collect, config_is_options=False)

    p = sub.add_parser("train", help="train the steering network on a dataset")
    _common(p)
    p.add_argument("--data", required=False)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--sample-rate", type=float, default=10.0)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--no-augment", dest="augment", action="store_false")
    p.set_defaults(func=cmd_train, config_is_options=True)

    p = sub.add_parser("simulate", help="closed-loop drive of recorded runs")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint", help="checkpoint path, or 'oracle' for the perfect policy")
    p.add_argument("--runs", nargs="*", default=None)
    p.add_argument("--from-trace", default=None, help="score an existing trace CSV")
    p.set_defaults(func=cmd_simulate, config_is_options=True)

    p = sub.add_parser("evaluate", help="offline MSE plus closed-loop autonomy")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--runs", nargs="*", default=None)
    p.set_defaults(func=cmd_evaluate, config_is_options=True)

    p = sub.add_parser("viz-features", help="conv layer 1 and 2 activation grids for one image")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--image")
    p.set_defaults(func=cmd_viz_features, config_is_options=True)

    p = sub.add_parser("plot", help="loss curves and trace plots")
    _common(p)
    p.add_argument("--history")
    p.add_argument("--trace")
    p.set_defaults(func=cmd_plot, config_is_options=True)
    return ap


def _apply_config(ap, argv, args):
    """Re-parse with the config file's keys as defaults, so explicit flags still win."""
    cfg = io.read_yaml(_need(args.config, "config"))
    sub = ap._subparsers._group_actions[0].choices[args.verb]
    known = {a.dest for a in sub._actions}
    norm = {k.replace("-", "_"): v for k, v in cfg.items()}
    unknown = set(norm) - known - {"func", "config_is_options"}
    if unknown:
        raise io.ConfigError(f"unknown option(s) {sorted(unknown)}", str(args.config))
    sub.set_defaults(**norm)
    return ap.parse_args(argv)


def _required(args):
    needs = {"train": ("data",), "evaluate": ("data", "checkpoint"),
             "viz-features": ("checkpoint", "image")}
    for name in needs.get(args.verb, ()):
        if getattr(args, name) in (None, ""):
            raise io.ConfigError(f"missing --{name.replace('_', '-')}", "arguments")


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.config is not None and args.config_is_options:
            args = _apply_config(ap, argv, args)
        _required(args)
        line = args.func(args)
    except _Fail as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (io.ConfigError, TrackError, GeometryError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (io.DatasetError, nn.CheckpointError, FileNotFoundError, KeyError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, SimulationError, nn.NetworkError, ImagingError, FloatingPointError,
            ValueError, RuntimeError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    print(line)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
