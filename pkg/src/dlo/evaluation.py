"""Trajectory accuracy metrics, summaries and CSV curves."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import LengthMismatch
from .lie import Pose
from .odometry import FrameDiagnostics, Trajectory

DEFAULT_MIN_LENGTH = 50.0


class AlignedPair:
    """Estimated and reference trajectories associated frame by frame.

    Both trajectories must cover exactly the same frame indices, otherwise
    LengthMismatch is raised.
    """

    def __init__(self, estimated: Trajectory, reference: Trajectory):
        if len(estimated) != len(reference):
            raise LengthMismatch(f"estimated trajectory has {len(estimated)} poses, reference has {len(reference)}")
        if list(estimated.frames) != list(reference.frames):
            raise LengthMismatch("estimated and reference trajectories cover different frames")
        if not len(estimated):
            raise LengthMismatch("trajectories are empty")
        self.estimated = estimated
        self.reference = reference
        self.frames = np.array(estimated.frames)

    @classmethod
    def from_positions(cls, estimated, reference) -> "AlignedPair":
        """Build a pair from two (N, 3) position arrays (rotations set to identity)."""
        est = np.asarray(estimated, dtype=np.float64).reshape(-1, 3)
        ref = np.asarray(reference, dtype=np.float64).reshape(-1, 3)
        if len(est) != len(ref):
            raise LengthMismatch(f"estimated has {len(est)} positions, reference has {len(ref)}")

        def traj(pos):
            return Trajectory(((i, Pose(np.eye(3), p)) for i, p in enumerate(pos)), check_identity=False)

        return cls(traj(est), traj(ref))

    def __len__(self) -> int:
        return len(self.frames)


def path_lengths(positions: np.ndarray) -> np.ndarray:
    """Cumulative distance along a polyline of positions."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if not len(positions):
        return np.zeros(0)
    steps = np.linalg.norm(np.diff(positions, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def absolute_position_error(pair: AlignedPair) -> np.ndarray:
    """Per-frame Euclidean distance between estimated and reference positions (m).

    No alignment is applied; both trajectories are expected to start at the
    identity.
    """
    return np.linalg.norm(pair.estimated.positions - pair.reference.positions, axis=1)


def translation_error_percentage(pair: AlignedPair, min_length: float = DEFAULT_MIN_LENGTH) -> tuple[np.ndarray, np.ndarray]:
    """APE as a percentage of the reference distance travelled so far.

    Returns (frame indices, percentages) for the frames whose cumulative
    reference path length is at least ``min_length`` metres (and positive).
    """
    ape = absolute_position_error(pair)
    dist = path_lengths(pair.reference.positions)
    # the start frame has no travelled distance to normalise by
    keep = (dist >= min_length) & (dist > 0)
    return pair.frames[keep], 100.0 * ape[keep] / dist[keep]


def endpoint_gap(positions: np.ndarray) -> float:
    """Distance between the first and last position: the loop-closure gap."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    return float(np.linalg.norm(positions[-1] - positions[0]))


def _stats(x: np.ndarray) -> dict:
    if len(x) == 0:
        return {"mean": None, "max": None, "final": None}
    return {"mean": float(np.mean(x)), "max": float(np.max(x)), "final": float(x[-1])}


def summarize(
    pair: AlignedPair | Trajectory,
    diagnostics: Sequence[FrameDiagnostics] | None = None,
    min_length: float = DEFAULT_MIN_LENGTH,
) -> dict:
    """Collect drift, loop-closure and runtime figures into a JSON-friendly dict.

    Passing a bare Trajectory (no reference) reports only path length, the
    endpoint gap and runtime.
    """
    estimated = pair.estimated if isinstance(pair, AlignedPair) else pair
    est = estimated.positions
    length = float(path_lengths(est)[-1])
    gap = endpoint_gap(est)
    out: dict = {
        "frames": len(estimated),
        "estimated_path_length_m": length,
        "endpoint_gap_m": gap,
        "endpoint_gap_pct": 100.0 * gap / length if length > 0 else None,
    }
    if isinstance(pair, AlignedPair):
        ref = pair.reference.positions
        _, tep = translation_error_percentage(pair, min_length)
        out["reference_path_length_m"] = float(path_lengths(ref)[-1])
        out["reference_endpoint_gap_m"] = endpoint_gap(ref)
        out["ape_m"] = _stats(absolute_position_error(pair))
        out["translation_error_pct"] = _stats(tep)
        out["min_length_m"] = min_length
    if diagnostics:
        rt = np.array([d.runtime_s for d in diagnostics])
        out["runtime_s"] = {
            "total": float(rt.sum()),
            "mean_per_frame": float(rt.mean()),
            "median_per_frame": float(np.median(rt)),
            "max_per_frame": float(rt.max()),
        }
        out["failed_frames"] = [d.frame for d in diagnostics if d.fallback]
    return out


def format_summary(summary: dict) -> str:
    """Human-readable rendering of :func:`summarize` output."""
    lines = [f"frames: {summary['frames']}", f"path length: {summary['estimated_path_length_m']:.3f} m"]
    gap = summary["endpoint_gap_m"]
    pct = summary.get("endpoint_gap_pct")
    lines.append(f"endpoint gap: {gap:.3f} m" + (f" ({pct:.2f}% of path)" if pct is not None else ""))
    if "ape_m" in summary:
        a = summary["ape_m"]
        lines.append(f"APE: mean {a['mean']:.3f} m, max {a['max']:.3f} m, final {a['final']:.3f} m")
        t = summary["translation_error_pct"]
        if t["mean"] is None:
            lines.append(f"translation error: reference path shorter than {summary['min_length_m']:g} m")
        else:
            lines.append(f"translation error: mean {t['mean']:.2f}%, max {t['max']:.2f}%, final {t['final']:.2f}%")
    if "runtime_s" in summary:
        r = summary["runtime_s"]
        lines.append(
            f"runtime: {r['total']:.2f} s total, {r['mean_per_frame'] * 1e3:.1f} ms mean, "
            f"{r['median_per_frame'] * 1e3:.1f} ms median, {r['max_per_frame'] * 1e3:.1f} ms max per frame"
        )
        if summary["failed_frames"]:
            lines.append(f"frames on motion prior: {summary['failed_frames']}")
    return "\n".join(lines)


def write_summary(summary: dict, path) -> None:
    Path(path).write_text(json.dumps(summary, indent=2) + "\n")


def write_error_curves(pair: AlignedPair, path) -> None:
    """CSV with one row per frame: frame, reference distance, APE, APE percent."""
    ape = absolute_position_error(pair)
    dist = path_lengths(pair.reference.positions)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "distance_m", "ape_m", "ape_pct"])
        for f, d, e in zip(pair.frames, dist, ape):
            w.writerow([int(f), f"{d:.6f}", f"{e:.6f}", f"{100.0 * e / d:.6f}" if d > 0 else ""])


def write_diagnostics(diagnostics: Sequence[FrameDiagnostics], path) -> None:
    rows = [d.as_row() for d in diagnostics]
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
