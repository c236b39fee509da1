"""On-disk formats: track/collect configs (YAML), datasets (PNG + CSV index + JSON manifest),
simulation traces and loss histories (CSV)."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from .camera import CameraExtrinsics, CameraIntrinsics, CameraRig, Frame
from .roadworld import (Arc, FrameSource, RenderOptions, RunRecord, Straight, TrackError,
                        TrackSpec, random_track)
from .simulator import SimulationTrace, autonomy_score

SCHEMA_VERSION = 1
INDEX_COLUMNS = ["run_id", "tick", "time", "camera_id", "path", "steering", "offset",
                 "heading_err", "curvature", "speed", "station"]
TRACE_COLUMNS = ["time", "off_center", "yaw", "distance", "cnn_command", "human_command",
                 "intervention"]


class ConfigError(ValueError):
    """Malformed configuration; ``where`` names the line or field at fault."""

    def __init__(self, message: str, where: str = ""):
        super().__init__(f"{where}: {message}" if where else message)
        self.where = where


class DatasetError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configs

def read_yaml(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise DatasetError(f"cannot read {path}: {e}") from e
    try:
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as e:
        mark = e.problem_mark
        where = f"{path}:{mark.line + 1}:{mark.column + 1}" if mark else str(path)
        raise ConfigError(e.problem or str(e), where) from e
    if not isinstance(data, dict):
        raise ConfigError("expected a mapping at top level", str(path))
    return data


def _num(d: dict, key: str, where: str, default=None) -> float:
    if key not in d:
        if default is None:
            raise ConfigError("missing required field", f"{where}.{key}")
        return default
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"expected a number, got {v!r}", f"{where}.{key}")
    return float(v)


def track_from_dict(d: dict, where: str = "track") -> TrackSpec:
    style = {}
    for key, default in (("marking_style", "dashed"), ("surface_style", "paved")):
        style[key] = str(d.get(key, default))
    style["lane_width"] = _num(d, "lane_width", where, 3.6)
    seed = d.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError(f"expected an integer, got {seed!r}", f"{where}.seed")
    unknown = set(d) - {"segments", "generate", "marking_style", "surface_style", "lane_width", "seed"}
    if unknown:
        raise ConfigError(f"unknown field(s) {sorted(unknown)}", where)
    try:
        if "generate" in d:
            g = d["generate"]
            if not isinstance(g, dict):
                raise ConfigError("expected a mapping", f"{where}.generate")
            gseed = g.get("seed", seed)
            return random_track(int(gseed), _num(g, "length", f"{where}.generate"),
                                _num(g, "min_radius", f"{where}.generate", 40.0),
                                _num(g, "max_radius", f"{where}.generate", 200.0), **style)
        segs_in = d.get("segments")
        if not isinstance(segs_in, list) or not segs_in:
            raise ConfigError("expected a non-empty list of segments", f"{where}.segments")
        segs = []
        for i, s in enumerate(segs_in):
            sw = f"{where}.segments[{i}]"
            if not isinstance(s, dict) or len(s) != 1:
                raise ConfigError("expected {straight: L} or {arc: {radius, angle}}", sw)
            kind, val = next(iter(s.items()))
            if kind == "straight":
                segs.append(Straight(_num(s, "straight", sw)))
            elif kind == "arc":
                if not isinstance(val, dict):
                    raise ConfigError("expected {radius, angle}", f"{sw}.arc")
                segs.append(Arc(_num(val, "radius", f"{sw}.arc"), _num(val, "angle", f"{sw}.arc")))
            else:
                raise ConfigError(f"unknown segment kind {kind!r}", sw)
        return TrackSpec(tuple(segs), seed=seed, **style)
    except TrackError as e:
        raise ConfigError(str(e), where) from e


def track_to_dict(track: TrackSpec) -> dict:
    segs = []
    for s in track.segments:
        if isinstance(s, Straight):
            segs.append({"straight": float(s.length)})
        else:
            segs.append({"arc": {"radius": float(s.radius), "angle": float(s.angle)}})
    return {"lane_width": float(track.lane_width), "marking_style": track.marking_style,
            "surface_style": track.surface_style, "seed": int(track.seed), "segments": segs}


def dump_track(track: TrackSpec) -> str:
    """Canonical YAML form; parsing it back and dumping again gives the same text."""
    return yaml.safe_dump(track_to_dict(track), sort_keys=True, default_flow_style=None, width=100)


def load_track(path) -> TrackSpec:
    return track_from_dict(read_yaml(path), str(path))


def rig_to_dict(rig: CameraRig) -> dict:
    i = rig.intrinsics
    return {"intrinsics": {"width": i.width, "height": i.height, "focal": i.focal,
                           "principal_point": list(i.principal_point)},
            "cameras": [{"id": cid, **asdict(e)} for cid, e in rig.cameras]}


def rig_from_dict(d: dict) -> CameraRig:
    i = d["intrinsics"]
    intr = CameraIntrinsics(int(i["width"]), int(i["height"]), float(i["focal"]),
                            tuple(i["principal_point"]))
    cams = tuple((c["id"], CameraExtrinsics(c["height_above_ground"], c["lateral_offset"],
                                            c["yaw"], c["pitch"])) for c in d["cameras"])
    return CameraRig(intr, cams)


# ---------------------------------------------------------------------------
# datasets

def write_png(path, frame: Frame) -> None:
    Image.fromarray(np.ascontiguousarray(frame.pixels.transpose(1, 2, 0))).save(path, optimize=False)


def read_png(path, camera_id: str = "center", timestamp: float = 0.0) -> Frame:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return Frame(np.ascontiguousarray(arr.transpose(2, 0, 1)), "RGB", camera_id, timestamp)


class DiskFrames(FrameSource):
    def __init__(self, root: Path, paths: dict, rig: CameraRig, track: TrackSpec):
        self.root = root
        self.paths = paths
        self.rig = rig
        self.geom = track.geometry()
        self.opts = RenderOptions()

    def load(self, tick: int, camera_id: str) -> Frame:
        try:
            rel = self.paths[(tick, camera_id)]
        except KeyError:
            raise DatasetError(f"no frame for tick {tick} camera {camera_id}") from None
        return read_png(self.root / rel, camera_id)


def save_dataset(runs: list, out_dir, extra: dict | None = None) -> Path:
    """Write frames as PNG, one index CSV and a JSON manifest; returns the manifest path."""
    out = Path(out_dir)
    (out / "tracks").mkdir(parents=True, exist_ok=True)
    rows = []
    entries = []
    rig = runs[0].frames.rig
    for run in runs:
        fdir = out / "frames" / run.run_id
        fdir.mkdir(parents=True, exist_ok=True)
        track_rel = f"tracks/{run.run_id}.yaml"
        (out / track_rel).write_text(dump_track(run.track))
        for tick in range(len(run)):
            for cam in run.frames.rig.camera_ids:
                rel = f"frames/{run.run_id}/{tick:06d}_{cam}.png"
                write_png(out / rel, run.frame(tick, cam))
                rows.append([run.run_id, tick, repr(float(run.times[tick])), cam, rel,
                             repr(float(run.commands[tick])), repr(float(run.offsets[tick])),
                             repr(float(run.headings[tick])), repr(float(run.curvatures[tick])),
                             repr(float(run.speed)), repr(float(run.stations[tick]))])
        entries.append({"run_id": run.run_id, "track": track_rel, "frame_count": len(run),
                        "activity_label": run.activity_label, "speed": run.speed,
                        "sigma_offset": run.sigma_offset, "sigma_heading": run.sigma_heading})
    with open(out / "index.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INDEX_COLUMNS)
        w.writerows(rows)
    manifest = {"schema_version": SCHEMA_VERSION, "capture_rate": runs[0].tick_rate,
                "rig": rig_to_dict(rig), "index": "index.csv", "runs": entries,
                "human_sigma_offset": float(np.mean([r.sigma_offset for r in runs])),
                "human_sigma_heading": float(np.mean([r.sigma_heading for r in runs]))}
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_manifest(data_dir) -> dict:
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise DatasetError(f"no manifest at {path}")
    try:
        m = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"corrupt manifest {path}: {e}") from e
    if m.get("schema_version") != SCHEMA_VERSION:
        raise DatasetError(f"unsupported manifest schema {m.get('schema_version')}")
    for r in m["runs"]:
        if r.get("sigma_offset") is None or r.get("sigma_heading") is None:
            raise DatasetError(f"run {r['run_id']} lacks measured human sigmas")
    return m


def load_dataset(data_dir, check_files: bool = True) -> tuple:
    """Runs backed by PNG files. Referential integrity is checked up front."""
    root = Path(data_dir)
    m = load_manifest(root)
    rig = rig_from_dict(m["rig"])
    by_run = {}
    with open(root / m["index"], newline="") as fh:
        for row in csv.DictReader(fh):
            by_run.setdefault(row["run_id"], []).append(row)
    runs = []
    for entry in m["runs"]:
        rows = by_run.get(entry["run_id"], [])
        paths = {(int(r["tick"]), r["camera_id"]): r["path"] for r in rows}
        if check_files:
            missing = [p for p in paths.values() if not (root / p).is_file()]
            if missing:
                raise DatasetError(f"{len(missing)} frame file(s) missing, e.g. {missing[0]}")
        center = sorted((r for r in rows if r["camera_id"] == rows[0]["camera_id"]),
                        key=lambda r: int(r["tick"]))
        if len(center) != entry["frame_count"]:
            raise DatasetError(f"run {entry['run_id']}: index has {len(center)} ticks, "
                               f"manifest says {entry['frame_count']}")
        col = lambda k: np.array([float(r[k]) for r in center])
        track = load_track(root / entry["track"])
        frames = DiskFrames(root, paths, rig, track)
        run = RunRecord(entry["run_id"], track, float(entry["speed"]), float(m["capture_rate"]),
                        col("time"), col("steering"), col("station"), col("offset"),
                        col("heading_err"), col("curvature"), frames,
                        entry["activity_label"], entry["sigma_offset"], entry["sigma_heading"])
        runs.append(run)
    return runs, m


# ---------------------------------------------------------------------------
# traces and histories

def write_trace(trace: SimulationTrace, path) -> None:
    events = set(trace.interventions)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for i in range(len(trace)):
            w.writerow([repr(trace.time[i]), repr(trace.off_center[i]), repr(trace.yaw[i]),
                        repr(trace.distance[i]), repr(trace.cnn_command[i]),
                        repr(trace.human_command[i]), int(trace.time[i] in events)])


def read_trace(path, penalty: float = 6.0) -> SimulationTrace:
    tr = SimulationTrace(penalty=penalty)
    try:
        fh = open(path, newline="")
    except OSError as e:
        raise DatasetError(f"cannot read trace {path}: {e}") from e
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != TRACE_COLUMNS:
            raise DatasetError(f"{path}: expected columns {TRACE_COLUMNS}")
        for row in reader:
            t = float(row["time"])
            tr.time.append(t)
            tr.off_center.append(float(row["off_center"]))
            tr.yaw.append(float(row["yaw"]))
            tr.distance.append(float(row["distance"]))
            tr.cnn_command.append(float(row["cnn_command"]))
            tr.human_command.append(float(row["human_command"]))
            if int(row["intervention"]):
                tr.interventions.append(t)
    if len(tr) < 2:
        raise DatasetError(f"{path}: need at least two rows to infer the time step")
    dt = tr.time[1] - tr.time[0]
    tr.elapsed = len(tr) * dt
    return tr


def write_summary(summary: dict, path) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def aggregate_autonomy(traces: list) -> dict:
    n = sum(len(t.interventions) for t in traces)
    elapsed = sum(t.elapsed for t in traces)
    penalty = traces[0].penalty if traces else 6.0
    return {"interventions": n, "elapsed_s": elapsed,
            "autonomy_pct": autonomy_score(n, elapsed, penalty),
            "max_abs_offset_m": max((t.max_abs_offset for t in traces), default=0.0)}


def write_history(history: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_mse", "val_mse"])
        for epoch, tr, va in history:
            w.writerow([epoch, repr(float(tr)), repr(float(va))])


def read_history(path) -> list:
    with open(path, newline="") as fh:
        return [(int(r["epoch"]), float(r["train_mse"]), float(r["val_mse"]))
                for r in csv.DictReader(fh)]
