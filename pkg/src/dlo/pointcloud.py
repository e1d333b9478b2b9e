"""LiDAR scans, spherical/Cartesian conversion and scan file ingestion."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import DegenerateInput, FormatError

KITTI_RECORD = np.dtype("<f4")
KITTI_RECORD_BYTES = 16
SCAN_FORMATS = ("kitti-bin", "xyz-text")


class SphericalPoint(NamedTuple):
    range: float
    azimuth: float
    elevation: float

    def validate(self) -> "SphericalPoint":
        if not (math.isfinite(self.range) and self.range >= 0.0):
            raise DegenerateInput(f"range must be finite and non-negative, got {self.range}")
        if not -math.pi <= self.azimuth < math.pi:
            raise DegenerateInput(f"azimuth {self.azimuth} outside [-pi, pi)")
        if not -math.pi / 2 < self.elevation < math.pi / 2:
            raise DegenerateInput(f"elevation {self.elevation} outside (-pi/2, pi/2)")
        return self


class Point3(NamedTuple):
    x: float
    y: float
    z: float


@dataclass(frozen=True)
class Scan:
    """One LiDAR sweep in the sensor frame.

    ``points`` is an (N, 3) float64 array; rows are finite.
    """

    points: np.ndarray
    frame_index: int = 0
    timestamp: float | None = None
    dropped: int = 0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.frame_index < 0:
            raise ValueError("frame_index must be non-negative")

    def __len__(self) -> int:
        return len(self.points)

    def point(self, i: int) -> Point3:
        return Point3(*map(float, self.points[i]))

    def with_points(self, points: np.ndarray, **meta) -> "Scan":
        return Scan(points, self.frame_index, self.timestamp, self.dropped, {**self.meta, **meta})


def spherical_to_cartesian(p: SphericalPoint) -> Point3:
    r, phi, theta = SphericalPoint(*p).validate()
    c = r * math.cos(theta)
    return Point3(c * math.cos(phi), c * math.sin(phi), r * math.sin(theta))


def cartesian_to_spherical(p: Point3) -> SphericalPoint:
    x, y, z = p
    if not all(map(math.isfinite, (x, y, z))):
        raise DegenerateInput(f"non-finite point {p}")
    rho = math.hypot(x, y)
    if rho == 0.0:
        # covers the origin and the z-axis, where the azimuth is undefined
        raise DegenerateInput(f"azimuth undefined for point {p}")
    phi = math.atan2(y, x)
    if phi >= math.pi:
        phi -= 2 * math.pi
    return SphericalPoint(math.hypot(rho, z), phi, math.atan2(z, rho))


def spherical_to_cartesian_array(rng: np.ndarray, azimuth: np.ndarray, elevation: np.ndarray) -> np.ndarray:
    """Vectorised :func:`spherical_to_cartesian`; returns an (N, 3) array."""
    c = rng * np.cos(elevation)
    return np.stack([c * np.cos(azimuth), c * np.sin(azimuth), rng * np.sin(elevation)], axis=-1)


def _finite_rows(points: np.ndarray) -> tuple[np.ndarray, int]:
    keep = np.isfinite(points).all(axis=1)
    return points[keep], int(np.count_nonzero(~keep))


def read_scan_file(path, format: str = "kitti-bin", frame_index: int = 0) -> Scan:
    """Load a scan, silently dropping non-finite points.

    The number of dropped points is kept on ``Scan.dropped``.

    Raises:
        OSError: the file cannot be read.
        FormatError: unknown format, misaligned kitti-bin file or malformed text line.
    """
    path = Path(path)
    if format == "kitti-bin":
        raw = path.read_bytes()
        if len(raw) % KITTI_RECORD_BYTES:
            raise FormatError(
                f"{path}: {len(raw)} bytes is not a multiple of the {KITTI_RECORD_BYTES}-byte record"
            )
        records = np.frombuffer(raw, dtype=KITTI_RECORD).reshape(-1, 4)
        points = records[:, :3].astype(np.float64)
    elif format == "xyz-text":
        rows = []
        with path.open() as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                parts = line.split()
                if len(parts) != 3:
                    raise FormatError(f"{path}:{lineno}: expected 3 values, got {len(parts)}")
                try:
                    rows.append([float(v) for v in parts])
                except ValueError as exc:
                    raise FormatError(f"{path}:{lineno}: {exc}") from None
        points = np.array(rows, dtype=np.float64).reshape(-1, 3)
    else:
        raise FormatError(f"unknown scan format {format!r}; expected one of {SCAN_FORMATS}")
    points, dropped = _finite_rows(points)
    return Scan(points, frame_index=frame_index, dropped=dropped)


def write_scan_file(scan: Scan | np.ndarray, path, format: str = "kitti-bin") -> None:
    points = scan.points if isinstance(scan, Scan) else np.asarray(scan, dtype=np.float64)
    path = Path(path)
    if format == "kitti-bin":
        records = np.zeros((len(points), 4), dtype=KITTI_RECORD)
        records[:, :3] = points
        path.write_bytes(records.tobytes())
    elif format == "xyz-text":
        np.savetxt(path, points, fmt="%.9g")
    else:
        raise FormatError(f"unknown scan format {format!r}; expected one of {SCAN_FORMATS}")


def scan_format_for(path) -> str:
    return "xyz-text" if Path(path).suffix.lower() in (".txt", ".xyz") else "kitti-bin"
