"""Command-line entry point: ``dlo <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DLOError, FormatError
from .evaluation import (
    AlignedPair,
    format_summary,
    summarize,
    write_diagnostics,
    write_error_curves,
    write_summary,
)
from .heightgrid import GridConfig, build_height_grid, render_grid_image, select_semi_dense_cells
from .lie import PlanarPose, planar_embed
from .odometry import OdometryConfig, TRAJECTORY_FORMATS, read_trajectory, run_odometry, write_trajectory
from .pointcloud import SCAN_FORMATS, read_scan_file, write_scan_file
from .registration import SolverConfig, pitch_compensate, register
from .synth import SensorModel, read_scene_spec, read_trajectory_spec, render_sequence

log = logging.getLogger("dlo")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
SCAN_SUFFIXES = {"kitti-bin": (".bin",), "xyz-text": (".txt", ".xyz")}


class UsageError(Exception):
    """Bad arguments or configuration; maps to exit code 2."""


# --- configuration ------------------------------------------------------------------------

_SOLVER_KEYS = [f.name for f in fields(SolverConfig) if f.name != "workers"]
_ODOMETRY_KEYS = ["motion_prior", "pitch_compensation"]


def default_config() -> dict:
    """Flat defaults for every tunable; these are what ``config dump`` prints."""
    g, s, o = GridConfig(), SolverConfig(), OdometryConfig()
    out = {"rows": g.rows, "cols": g.cols, "cell_size": g.f_x, "z_ceiling": g.z_ceiling}
    out.update({k: getattr(s, k) for k in _SOLVER_KEYS})
    out.update({k: getattr(o, k) for k in _ODOMETRY_KEYS})
    return out


def _coerce(key: str, raw, default):
    if not isinstance(raw, str):
        return tuple(raw) if isinstance(default, tuple) else raw
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(v) for v in raw.replace(",", " ").split())
    except ValueError:
        raise UsageError(f"config key {key!r}: cannot parse {raw!r}") from None
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse flat ``key = value`` lines ('#' starts a comment)."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def load_config_file(path) -> dict:
    """Read a key=value config file, or the ``config`` block of a run manifest."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    if text.lstrip().startswith("{"):
        try:
            return dict(json.loads(text)["config"])
        except (json.JSONDecodeError, KeyError, TypeError):
            raise UsageError(f"{path}: not a run manifest") from None
    return parse_config_text(text, str(path))


def resolve_config(config_path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the config file, then command-line overrides."""
    cfg = default_config()
    layers = []
    if config_path:
        layers.append(load_config_file(config_path))
    if overrides:
        layers.append(overrides)
    for layer in layers:
        for key, raw in layer.items():
            if key not in cfg:
                raise UsageError(f"unknown config key {key!r} (see 'dlo config dump')")
            cfg[key] = _coerce(key, raw, cfg[key])
    return cfg


def build_configs(cfg: dict, workers: int = 1) -> OdometryConfig:
    try:
        grid = GridConfig(rows=cfg["rows"], cols=cfg["cols"], f_x=cfg["cell_size"], f_y=cfg["cell_size"], z_ceiling=cfg["z_ceiling"])
        solver = SolverConfig(workers=workers, **{k: cfg[k] for k in _SOLVER_KEYS})
        return OdometryConfig(solver=solver, grid=grid, motion_prior=cfg["motion_prior"], pitch_compensation=cfg["pitch_compensation"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def format_config(cfg: dict) -> str:
    def fmt(v):
        if isinstance(v, tuple):
            return " ".join(repr(x) for x in v)
        return str(v).lower() if isinstance(v, bool) else str(v)

    return "".join(f"{k} = {fmt(v)}\n" for k, v in cfg.items())


# --- run manifest ------------------------------------------------------------------


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict
    outputs: dict = field(default_factory=dict)
    version: str = __version__
    timings: dict = field(default_factory=dict)
    argv: list = field(default_factory=list)
    started: str = ""
    threads: int = 1
    python: str = platform.python_version()
    numpy: str = np.__version__

    def write(self, path) -> None:
        data = asdict(self)
        data["config"] = {k: list(v) if isinstance(v, tuple) else v for k, v in self.config.items()}
        Path(path).write_text(json.dumps(data, indent=2) + "\n")


def _manifest(args, command: str, cfg: dict, inputs: dict) -> RunManifest:
    return RunManifest(
        command=command,
        config=cfg,
        inputs=inputs,
        argv=list(args.argv),
        started=datetime.now(timezone.utc).isoformat(timespec="seconds"),
        threads=getattr(args, "threads", 1) or 1,
    )


# --- helpers ------------------------------------------------------------------------


def _config_from_args(args) -> dict:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if getattr(args, "mode", None):
        overrides["mode"] = {"planar": "planar-3dof", "full": "full-6dof"}[args.mode]
    return resolve_config(args.config, overrides)


def _read_scan(path, fmt: str, frame_index: int = 0):
    return read_scan_file(path, format=fmt, frame_index=frame_index)


def list_scan_files(directory, fmt: str) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise UsageError(f"input directory not found: {directory}")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in SCAN_SUFFIXES[fmt])
    if len(files) < 2:
        raise UsageError(f"{directory}: need at least two {fmt} scan files, found {len(files)}")
    return files


def _parse_init(text: str | None):
    if text is None:
        return None
    try:
        x, y, yaw = (float(v) for v in text.replace(",", " ").split())
    except ValueError:
        raise UsageError(f"--init expects 'x y yaw', got {text!r}") from None
    return planar_embed(PlanarPose(x, y, yaw))


# --- commands -----------------------------------------------------------------------


def cmd_odometry(args) -> int:
    cfg = _config_from_args(args)
    ocfg = build_configs(cfg, args.threads)
    files = list_scan_files(args.input, args.format)
    out = Path(args.out)
    diag_path = Path(args.diagnostics) if args.diagnostics else out.with_name(out.stem + "_diagnostics.csv")
    manifest_path = Path(args.manifest) if args.manifest else out.with_name(out.stem + "_manifest.json")
    manifest = _manifest(args, "odometry", cfg, {"input": str(args.input), "files": len(files), "format": args.format})
    t0 = time.perf_counter()
    current = {"frame": None}

    def scans():
        for i, p in enumerate(files):
            current["frame"] = (i, p)
            yield _read_scan(p, args.format, i)

    try:
        result = run_odometry(scans(), ocfg)
    except (DLOError, OSError) as exc:
        i, p = current["frame"]
        print(f"error: frame {i} ({p}): {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    elapsed = time.perf_counter() - t0
    write_trajectory(result.trajectory, out, args.traj_format)
    write_diagnostics(result.diagnostics, diag_path)
    manifest.outputs = {"trajectory": str(out), "diagnostics": str(diag_path), "manifest": str(manifest_path)}
    rt = [d.runtime_s for d in result.diagnostics]
    manifest.timings = {"total_s": elapsed, "mean_frame_s": float(np.mean(rt)), "max_frame_s": float(np.max(rt))}
    manifest.write(manifest_path)
    failed = result.failed_frames
    print(f"{len(result.trajectory)} poses written to {out}; {len(failed)} frame(s) on the motion prior")
    if failed:
        print(f"frames on the motion prior: {failed}", file=sys.stderr)
    return EXIT_OK


def cmd_register(args) -> int:
    cfg = _config_from_args(args)
    ocfg = build_configs(cfg, args.threads)
    init = _parse_init(args.init)
    t0 = time.perf_counter()
    try:
        ref = _read_scan(args.ref, args.format)
        mov = _read_scan(args.mov, args.format, 1)
        if ocfg.pitch_compensation:
            ref, _ = pitch_compensate(ref)
            mov, _ = pitch_compensate(mov)
        g1 = build_height_grid(ref, ocfg.grid)
        g2 = build_height_grid(mov, ocfg.grid)
        result = register(g1, g2, init, ocfg.solver)
    except (DLOError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    report = result.to_dict()
    text = json.dumps(report, indent=2)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
        manifest = _manifest(args, "register", cfg, {"ref": str(args.ref), "mov": str(args.mov), "init": args.init})
        manifest.outputs = {"result": str(args.out)}
        manifest.timings = {"total_s": time.perf_counter() - t0}
        manifest.write(Path(args.out).with_name(Path(args.out).stem + "_manifest.json"))
    if not result.converged:
        print("error: NotConverged: registration stopped without meeting a tolerance", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    try:
        est = read_trajectory(args.est, args.traj_format)
        ref = read_trajectory(args.ref, args.traj_format)
        pair = AlignedPair(est, ref)
        summary = summarize(pair, min_length=args.min_length)
    except (DLOError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(format_summary(summary))
    outputs = {}
    if args.out:
        write_summary(summary, args.out)
        outputs["report"] = str(args.out)
    if args.curves:
        write_error_curves(pair, args.curves)
        outputs["curves"] = str(args.curves)
    if args.out:
        manifest = _manifest(args, "eval", {"min_length": args.min_length, "traj_format": args.traj_format}, {"est": str(args.est), "ref": str(args.ref)})
        manifest.outputs = outputs
        manifest.timings = {"total_s": time.perf_counter() - t0}
        manifest.write(Path(args.out).with_name(Path(args.out).stem + "_manifest.json"))
    return EXIT_OK


def cmd_render(args) -> int:
    cfg = _config_from_args(args)
    ocfg = build_configs(cfg)
    t0 = time.perf_counter()
    try:
        scan = _read_scan(args.scan, args.format)
        if ocfg.pitch_compensation and args.level:
            scan, _ = pitch_compensate(scan)
        grid = build_height_grid(scan, ocfg.grid)
        sel = select_semi_dense_cells(grid, ocfg.solver.gradient_threshold) if args.show_selection else None
        render_grid_image(grid, sel, args.out)
    except (DLOError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    manifest = _manifest(args, "render", cfg, {"scan": str(args.scan)})
    manifest.outputs = {"image": str(args.out)}
    manifest.timings = {"total_s": time.perf_counter() - t0}
    manifest.write(Path(args.out).with_name(Path(args.out).stem + "_manifest.json"))
    msg = f"wrote {args.out} ({int(grid.valid.sum())} valid cells"
    print(msg + (f", {len(sel)} selected)" if sel is not None else ")"))
    return EXIT_OK


def cmd_synth(args) -> int:
    try:
        scene = read_scene_spec(args.scene)
        traj_spec = read_trajectory_spec(args.trajectory)
        poses = traj_spec.poses()
    except FormatError as exc:
        raise UsageError(str(exc)) from None
    except OSError as exc:
        raise UsageError(f"cannot read spec: {exc}") from None
    except ValueError as exc:
        raise UsageError(f"invalid trajectory spec: {exc}") from None
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        sensor = SensorModel(range_noise=args.noise) if args.noise is not None else SensorModel()
        scans, gt = render_sequence(scene, sensor, poses)
        suffix = SCAN_SUFFIXES[args.format][0]
        for scan in scans:
            write_scan_file(scan, out / f"{scan.frame_index:06d}{suffix}", args.format)
        write_trajectory(gt, out / "groundtruth.txt", "kitti")
    except (DLOError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    manifest = _manifest(args, "synth", {"scene": str(args.scene), "trajectory": str(args.trajectory)}, {"scene": str(args.scene), "trajectory": str(args.trajectory)})
    manifest.outputs = {"dir": str(out), "scans": len(scans), "groundtruth": str(out / "groundtruth.txt")}
    # no wall-clock fields here so that the output directory is byte-identical across runs
    manifest.started = ""
    manifest.write(out / "manifest.json")
    print(f"wrote {len(scans)} scans and groundtruth.txt to {out}")
    return EXIT_OK


def cmd_config_dump(args) -> int:
    cfg = _config_from_args(args)
    build_configs(cfg)
    sys.stdout.write(format_config(cfg))
    return EXIT_OK


# --- parser --------------------------------------------------------------------------


def _add_config_args(p, mode: bool = True):
    p.add_argument("--config", help="key = value config file (or a run manifest)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    if mode:
        p.add_argument("--mode", choices=("planar", "full"), help="planar-3dof (default) or full-6dof registration")


def _add_threads(p):
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker threads for the normal equations (default: %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    d = default_config()
    parser = argparse.ArgumentParser(
        prog="dlo",
        description=(
            f"Direct LiDAR odometry on 2.5D height grids (default grid {d['rows']}x{d['cols']} cells "
            f"of {d['cell_size']} m, gradient threshold {d['gradient_threshold']} m/cell)."
        ),
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log per-frame warnings")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("odometry", parents=[common], help="estimate a trajectory from a directory of scans")
    p.add_argument("--input", required=True, help="directory of scan files, processed in sorted order")
    p.add_argument("--format", choices=SCAN_FORMATS, default="kitti-bin")
    p.add_argument("--out", required=True, help="trajectory output path")
    p.add_argument("--traj-format", choices=TRAJECTORY_FORMATS, default="kitti")
    p.add_argument("--diagnostics", help="per-frame CSV (default: <out>_diagnostics.csv)")
    p.add_argument("--manifest", help="run manifest JSON (default: <out>_manifest.json)")
    _add_config_args(p)
    _add_threads(p)
    p.set_defaults(func=cmd_odometry)

    p = sub.add_parser("register", parents=[common], help="register one scan pair and print the result as JSON")
    p.add_argument("--ref", required=True, help="reference scan (grid 1)")
    p.add_argument("--mov", required=True, help="moving scan (grid 2)")
    p.add_argument("--format", choices=SCAN_FORMATS, default="kitti-bin")
    p.add_argument("--init", help="initial pose 'x y yaw' (metres, radians) mapping ref into mov")
    p.add_argument("--out", help="also write the JSON result here")
    _add_config_args(p)
    _add_threads(p)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("eval", parents=[common], help="compare an estimated trajectory against ground truth")
    p.add_argument("--est", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--traj-format", choices=TRAJECTORY_FORMATS, default="kitti")
    p.add_argument("--min-length", type=float, default=50.0, help="start of the percentage curve in metres (default: %(default)s)")
    p.add_argument("--out", help="JSON report path")
    p.add_argument("--curves", help="per-frame error CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", parents=[common], help="write a height grid image, optionally with selected cells in green")
    p.add_argument("--scan", required=True)
    p.add_argument("--format", choices=SCAN_FORMATS, default="kitti-bin")
    p.add_argument("--out", required=True, help="PNG path")
    p.add_argument("--show-selection", action="store_true", help="colour semi-dense cells green")
    p.add_argument("--level", action="store_true", help="level the scan on its ground plane first")
    _add_config_args(p, mode=False)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("synth", parents=[common], help="render a synthetic scan sequence with ground truth")
    p.add_argument("--scene", required=True, help="scene spec file")
    p.add_argument("--trajectory", required=True, help="trajectory spec file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--format", choices=SCAN_FORMATS, default="kitti-bin")
    p.add_argument("--noise", type=float, help="range noise sigma in metres (default: sensor model default)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("config", parents=[common], help="configuration utilities")
    csub = p.add_subparsers(dest="config_command", required=True)
    c = csub.add_parser("dump", parents=[common], help="print the resolved configuration as key = value lines")
    _add_config_args(c)
    c.set_defaults(func=cmd_config_dump)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    args.argv = argv
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", 1) < 1:
        parser.print_usage(sys.stderr)
        print("dlo: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"dlo: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
