"""Frame-to-frame odometry: chain registrations into an absolute trajectory."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import DLOError, FormatError, NoGroundPlane
from .heightgrid import GridConfig, build_height_grid
from .lie import Pose, compose, matrix_from_quaternion, quaternion_from_matrix
from .pointcloud import Scan
from .registration import SolverConfig, pitch_compensate, register

log = logging.getLogger(__name__)

MOTION_PRIORS = ("identity", "constant-velocity")
TRAJECTORY_FORMATS = ("kitti", "tum")


class Trajectory:
    """Time-ordered absolute poses; the first pose is the identity."""

    def __init__(self, entries: Iterable[tuple[int, Pose]] = (), timestamps: Iterable[float] | None = None, check_identity: bool = True):
        self.frames: list[int] = []
        self.poses: list[Pose] = []
        for frame, pose in entries:
            self.append(frame, pose)
        self.timestamps = None if timestamps is None else [float(t) for t in timestamps]
        if self.timestamps is not None and len(self.timestamps) != len(self.poses):
            raise ValueError("one timestamp per pose required")
        if check_identity and self.poses and not self.poses[0].is_close(Pose.identity(), atol=1e-9):
            raise ValueError("the first pose of a trajectory must be the identity")

    def append(self, frame: int, pose: Pose) -> None:
        if self.frames and frame <= self.frames[-1]:
            raise ValueError(f"frame indices must increase strictly ({frame} after {self.frames[-1]})")
        self.frames.append(int(frame))
        self.poses.append(pose)

    def __len__(self) -> int:
        return len(self.poses)

    def __iter__(self) -> Iterator[tuple[int, Pose]]:
        return iter(zip(self.frames, self.poses))

    def __getitem__(self, i: int) -> Pose:
        return self.poses[i]

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.t for p in self.poses]).reshape(-1, 3)

    def path_lengths(self) -> np.ndarray:
        """Cumulative distance travelled at each frame."""
        if not self.poses:
            return np.zeros(0)
        steps = np.linalg.norm(np.diff(self.positions, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(steps)])

    def relative_motions(self) -> list[Pose]:
        return [compose(a.inverse(), b) for a, b in zip(self.poses, self.poses[1:])]

    def transformed(self, G: Pose) -> "Trajectory":
        """Every pose left-multiplied by G (first pose no longer identity)."""
        return Trajectory(((f, compose(G, p)) for f, p in self), self.timestamps, check_identity=False)

    @classmethod
    def rebased(cls, poses: list[Pose], frames: list[int] | None = None) -> "Trajectory":
        """Express absolute poses relative to the first one."""
        frames = list(range(len(poses))) if frames is None else frames
        if not poses:
            return cls()
        inv = poses[0].inverse()
        return cls((f, compose(inv, p)) for f, p in zip(frames, poses))


@dataclass(frozen=True)
class OdometryConfig:
    solver: SolverConfig = SolverConfig()
    grid: GridConfig = GridConfig()
    motion_prior: str = "constant-velocity"
    pitch_compensation: bool = True

    def __post_init__(self):
        if self.motion_prior not in MOTION_PRIORS:
            raise ValueError(f"motion_prior must be one of {MOTION_PRIORS}")


@dataclass
class FrameDiagnostics:
    frame: int
    runtime_s: float
    points: int
    residual_count: int = 0
    iterations: int = 0
    converged: bool = False
    fallback: bool = False
    error: str = ""
    ground_leveled: bool = False
    roll: float = 0.0
    pitch: float = 0.0

    def as_row(self) -> dict:
        return asdict(self)


@dataclass
class OdometryResult:
    trajectory: Trajectory
    diagnostics: list[FrameDiagnostics] = field(default_factory=list)

    @property
    def failed_frames(self) -> list[int]:
        return [d.frame for d in self.diagnostics if d.fallback]


def _prepare(scan: Scan, frame: int, cfg: OdometryConfig) -> tuple[Scan, FrameDiagnostics]:
    diag = FrameDiagnostics(frame=frame, runtime_s=0.0, points=len(scan))
    if cfg.pitch_compensation and len(scan):
        try:
            scan, corr = pitch_compensate(scan)
            diag.ground_leveled = True
            diag.roll, diag.pitch = corr.roll, corr.pitch
        except NoGroundPlane as exc:
            log.warning("frame %d: %s; using the scan unlevelled", frame, exc)
    return scan, diag


def run_odometry(scans: Iterable[Scan], cfg: OdometryConfig = OdometryConfig()) -> OdometryResult:
    """Register each scan against its predecessor and accumulate poses.

    ``pose[k] = pose[k-1] * motion[k]`` where motion[k] is frame k expressed in
    frame k-1 (the inverse of the registration result, which maps frame k-1
    points into frame k). A frame whose registration fails or does not converge
    takes the motion prior and is flagged in the diagnostics. Frames are
    numbered by their position in ``scans``.
    """
    it = iter(scans)
    try:
        first = next(it)
    except StopIteration:
        raise ValueError("odometry needs at least two scans") from None
    t0 = time.perf_counter()
    first, diag0 = _prepare(first, 0, cfg)
    prev_grid = build_height_grid(first, cfg.grid)
    diag0.runtime_s = time.perf_counter() - t0
    diag0.converged = True
    traj = Trajectory([(0, Pose.identity())], [first.timestamp if first.timestamp is not None else 0.0])
    diagnostics = [diag0]
    motion = Pose.identity()
    for frame, scan in enumerate(it, start=1):
        t0 = time.perf_counter()
        scan, diag = _prepare(scan, frame, cfg)
        grid = build_height_grid(scan, cfg.grid)
        prior = motion if cfg.motion_prior == "constant-velocity" else Pose.identity()
        try:
            res = register(prev_grid, grid, prior.inverse(), cfg.solver)
            diag.residual_count = res.residual_count
            diag.iterations = res.iterations
            diag.converged = res.converged
            if res.converged:
                motion = res.relative_pose.inverse()
            else:
                diag.fallback = True
                diag.error = "NotConverged"
                motion = prior
        except DLOError as exc:
            log.warning("frame %d: %s; falling back to the motion prior", frame, exc)
            diag.fallback = True
            diag.error = type(exc).__name__
            motion = prior
        traj.append(frame, compose(traj.poses[-1], motion))
        traj.timestamps.append(scan.timestamp if scan.timestamp is not None else float(frame))
        prev_grid = grid
        diag.runtime_s = time.perf_counter() - t0
        diagnostics.append(diag)
    if len(traj) < 2:
        raise ValueError("odometry needs at least two scans")
    return OdometryResult(traj, diagnostics)


# --- trajectory files ---------------------------------------------------------------


def _fmt(v: float) -> str:
    s = f"{v:.17g}"
    return "0" if s == "-0" else s


def write_trajectory(t: Trajectory, path, format: str = "kitti") -> None:
    """KITTI: 12 values of the row-major 3x4 [R|t] per line. TUM: 'timestamp x y z qx qy qz qw'."""
    if format not in TRAJECTORY_FORMATS:
        raise FormatError(f"unknown trajectory format {format!r}")
    lines = []
    for i, (frame, pose) in enumerate(t):
        if format == "kitti":
            lines.append(" ".join(_fmt(v) for v in pose.matrix[:3].ravel()))
        else:
            stamp = t.timestamps[i] if t.timestamps is not None else float(frame)
            q = quaternion_from_matrix(pose.R)
            lines.append(" ".join(_fmt(v) for v in (stamp, *pose.t, *q)))
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_trajectory(path, format: str = "kitti", check_identity: bool = False) -> Trajectory:
    """Read a KITTI or TUM pose file; frame indices are line numbers (0-based)."""
    if format not in TRAJECTORY_FORMATS:
        raise FormatError(f"unknown trajectory format {format!r}")
    poses, stamps = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            vals = [float(v) for v in line.split()]
        except ValueError:
            raise FormatError(f"{path}:{lineno}: non-numeric value") from None
        if format == "kitti":
            if len(vals) != 12:
                raise FormatError(f"{path}:{lineno}: expected 12 values, got {len(vals)}")
            M = np.array(vals).reshape(3, 4)
            poses.append(Pose(M[:, :3], M[:, 3]))
        else:
            if len(vals) != 8:
                raise FormatError(f"{path}:{lineno}: expected 8 values, got {len(vals)}")
            stamps.append(vals[0])
            poses.append(Pose(matrix_from_quaternion(vals[4:]), vals[1:4]))
    return Trajectory(enumerate(poses), stamps if format == "tum" else None, check_identity=check_identity)
