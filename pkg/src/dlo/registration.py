"""Direct registration of two height grids by Gauss-Newton on the height difference error.

A pose ``T`` maps points of grid 1 into the frame of grid 2. Every
semi-dense cell of grid 1 gives a source point p (see :func:`source_points`)
and the residual

    e = q_z - mu2(C q),   q = T p

which for planar poses equals mu1(C p) - mu2(C T p) because q_z = p_z. Keeping
q_z in the residual makes z, roll and pitch observable in full 6-DoF mode.
Increments are applied on the left: T <- exp(dxi) T.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientResiduals, NoGroundPlane, NoSupport, NotConverged, SingularNormalMatrix
from .heightgrid import (
    DEFAULT_GRADIENT_THRESHOLD,
    HeightGrid,
    bilinear_gradient_many,
    bilinear_sample_many,
    select_semi_dense_cells,
)
from .lie import Pose, compose, exp_map, exp_so3, planar_embed, planar_project, planar_twist, rot_z
from .pointcloud import Point3, Scan

log = logging.getLogger(__name__)

MODES = ("planar-3dof", "full-6dof")
ANCHORS = ("cell-corner", "cell-center")


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 50
    update_norm_tolerance: float = 1e-6
    cost_decrease_tolerance: float = 1e-9
    gradient_threshold: float = DEFAULT_GRADIENT_THRESHOLD
    min_residuals: int = 100
    mode: str = "planar-3dof"
    huber_delta: float = 0.1
    pyramid_levels: int = 3
    max_step_halvings: int = 8
    max_condition: float = 1e12
    chunk_size: int = 4096
    workers: int = 1
    yaw_starts_deg: tuple = (0.0, -8.0, 8.0)
    min_inlier_fraction: float = 0.4
    # where a selected cell is back-projected; see source_points
    anchor: str = "cell-corner"
    # a rejected step this small counts as stationary (the cost has kinks at cell borders)
    stationary_step_tolerance: float = 1e-3

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.anchor not in ANCHORS:
            raise ValueError(f"anchor must be one of {ANCHORS}, got {self.anchor!r}")
        for name in (
            "max_iterations",
            "update_norm_tolerance",
            "cost_decrease_tolerance",
            "gradient_threshold",
            "min_residuals",
            "huber_delta",
            "pyramid_levels",
            "max_condition",
            "chunk_size",
            "workers",
            "stationary_step_tolerance",
        ):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_step_halvings < 0:
            raise ValueError("max_step_halvings must be >= 0")
        if not self.yaw_starts_deg:
            raise ValueError("yaw_starts_deg needs at least one entry")
        object.__setattr__(self, "yaw_starts_deg", tuple(float(a) for a in self.yaw_starts_deg))
        if not 0.0 <= self.min_inlier_fraction <= 1.0:
            raise ValueError("min_inlier_fraction must lie in [0, 1]")

    @property
    def dof(self) -> int:
        return 3 if self.mode == "planar-3dof" else 6


@dataclass
class RegistrationResult:
    """Outcome of :func:`register`.

    ``relative_pose`` maps grid-1 coordinates into grid 2. ``iterations`` and
    ``residual_count`` refer to the finest pyramid level; per-level detail is in
    ``levels``. ``final_cost`` is the plain sum of squared residuals there.
    """

    relative_pose: Pose
    final_cost: float
    iterations: int
    residual_count: int
    converged: bool
    condition_estimate: float
    last_update_norm: float = float("nan")
    inlier_fraction: float = float("nan")
    levels: list = field(default_factory=list)
    runtime: float = 0.0

    def to_dict(self) -> dict:
        p = planar_project(self.relative_pose)
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "residual_count": self.residual_count,
            "final_cost": self.final_cost,
            "condition_estimate": self.condition_estimate,
            "last_update_norm": self.last_update_norm,
            "inlier_fraction": self.inlier_fraction,
            "runtime_s": self.runtime,
            "planar": {"x": p.x, "y": p.y, "yaw": p.yaw},
            "matrix": self.relative_pose.matrix[:3].tolist(),
            "levels": self.levels,
        }


# --- single terms ----------------------------------------------------------------


def hde_residual(mu1_value: float, grid2: HeightGrid, transformed_point: Point3) -> float:
    """Height difference of one term: reference height minus grid 2 interpolated at C q."""
    x, y = transformed_point[0], transformed_point[1]
    gu, gv = grid2.config.to_grid_coords(np.array([[x, y]]))
    val, ok = bilinear_sample_many(grid2, gu, gv)
    if not ok[0]:
        raise NoSupport(f"point ({x}, {y}) has no valid support in grid 2")
    return float(mu1_value - val[0])


def _jacobian_rows(q: np.ndarray, grad_cells: np.ndarray, grid2: HeightGrid, mode: str) -> np.ndarray:
    """Rows of de/dxi for residuals e = q_z - mu2(C q)."""
    cfg = grid2.config
    # grid gradient (per cell) times d(cell)/d(meter) of the orthographic projection
    gx = grad_cells[:, 0] / cfg.f_x
    gy = grad_cells[:, 1] / cfg.f_y
    qx, qy, qz = q[:, 0], q[:, 1], q[:, 2]
    if mode == "planar-3dof":
        return np.stack([-gx, -gy, gx * qy - gy * qx], axis=1)
    one = np.ones_like(gx)
    return np.stack([-gx, -gy, one, qy + gy * qz, -qx - gx * qz, gx * qy - gy * qx], axis=1)


def residual_jacobian(grid2: HeightGrid, transformed_point, mode: str = "full-6dof") -> np.ndarray:
    """Jacobian row of one residual at the transformed point ``q``.

    Full mode returns 6 columns (tx, ty, tz, rx, ry, rz); planar mode returns
    (tx, ty, rz).
    """
    q = np.asarray(transformed_point, dtype=np.float64).reshape(1, 3)
    gu, gv = grid2.config.to_grid_coords(q[:, :2])
    grad, ok = bilinear_gradient_many(grid2, gu, gv)
    if not ok[0]:
        raise NoSupport(f"point {tuple(q[0])} has no valid support in grid 2")
    return _jacobian_rows(q, grad, grid2, mode)[0]


# --- linearisation and normal equations --------------------------------------------


def huber_weights(e: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(e)
    return np.where(a <= delta, 1.0, delta / np.maximum(a, 1e-300))


def huber_cost(e: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(e)
    return np.where(a <= delta, 0.5 * a * a, delta * (a - 0.5 * delta))


@dataclass
class Linearization:
    residuals: np.ndarray
    jacobian: np.ndarray
    ok: np.ndarray


def evaluate_terms(source: np.ndarray, grid2: HeightGrid, pose: Pose, mode: str, with_jacobian: bool = True):
    """Residuals (and Jacobian rows) of all source points; unsupported terms are masked out."""
    q = pose.apply(source)
    gu, gv = grid2.config.to_grid_coords(q[:, :2])
    val, ok = bilinear_sample_many(grid2, gu, gv)
    e = q[ok, 2] - val[ok]
    if not with_jacobian:
        return Linearization(e, None, ok)
    grad, _ = bilinear_gradient_many(grid2, gu[ok], gv[ok])
    return Linearization(e, _jacobian_rows(q[ok], grad, grid2, mode), ok)


def _chunk_normal(J, e, w):
    Jw = J * w[:, None]
    return Jw.T @ J, Jw.T @ e


def normal_equations(J: np.ndarray, e: np.ndarray, w: np.ndarray | None = None, chunk_size: int = 4096, workers: int = 1):
    """Accumulate (sum w J^T J, sum w J^T e) over fixed-size chunks in a fixed order.

    Chunk boundaries do not depend on ``workers``, so the result is bit-identical
    for any worker count.
    """
    if w is None:
        w = np.ones(len(e))
    k = J.shape[1]
    bounds = [(i, min(i + chunk_size, len(e))) for i in range(0, len(e), chunk_size)]
    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda b: _chunk_normal(J[b[0]:b[1]], e[b[0]:b[1]], w[b[0]:b[1]]), bounds))
    else:
        parts = [_chunk_normal(J[a:b], e[a:b], w[a:b]) for a, b in bounds]
    H = np.zeros((k, k))
    g = np.zeros(k)
    for Hc, gc in parts:
        H += Hc
        g += gc
    return H, g


def gauss_newton_step(J: np.ndarray, e: np.ndarray, w: np.ndarray | None = None, max_condition: float = 1e12, chunk_size: int = 4096, workers: int = 1):
    """Solve (sum w J^T J) dxi = -sum w J^T e.

    Returns (dxi, condition_estimate). Raises SingularNormalMatrix when the
    2-norm condition number of the normal matrix exceeds ``max_condition``.
    """
    J = np.asarray(J, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    H, g = normal_equations(J, e, w, chunk_size, workers)
    if not np.any(H):
        if not np.any(g):
            return np.zeros(J.shape[1]), float("inf")
        raise SingularNormalMatrix(float("inf"))
    cond = float(np.linalg.cond(H))
    if not np.isfinite(cond) or cond > max_condition:
        raise SingularNormalMatrix(cond)
    return np.linalg.solve(H, -g), cond


# --- registration ---------------------------------------------------------------------


def source_points(grid1: HeightGrid, threshold: float, anchor: str = "cell-corner") -> np.ndarray:
    """Semi-dense cells of grid 1 back-projected to 3D source points.

    ``cell-center`` uses the cell centre and the cell mean. ``cell-corner``
    uses the corner (u + 1/2, v + 1/2) shared with the forward neighbours, where
    the forward differences are centred, and the grid interpolated there. A
    cell-centre point sits at the foot or top of the edge it was selected for,
    so its residual is flat towards -u/-v and steep towards +u/+v; summed over
    all terms this pulls the estimate by a fraction of a cell along the sensor
    axes. The corner point sits mid-edge and constrains both directions.
    Corners without full bilinear support are dropped.
    """
    sel = select_semi_dense_cells(grid1, threshold)
    if anchor == "cell-center":
        x, y = grid1.config.cell_centers(sel.u, sel.v)
        return np.stack([x, y, grid1.mean[sel.v, sel.u]], axis=1)
    if anchor != "cell-corner":
        raise ValueError(f"anchor must be one of {ANCHORS}, got {anchor!r}")
    gu, gv = sel.u + 0.5, sel.v + 0.5
    z, ok = bilinear_sample_many(grid1, gu, gv)
    x, y = grid1.config.cell_centers(gu[ok], gv[ok])
    return np.stack([x, y, z[ok]], axis=1)


def _term_costs(source: np.ndarray, grid2: HeightGrid, pose: Pose, cfg: SolverConfig) -> tuple[np.ndarray, np.ndarray]:
    lin = evaluate_terms(source, grid2, pose, cfg.mode, with_jacobian=False)
    rho = np.zeros(len(source))
    rho[lin.ok] = huber_cost(lin.residuals, cfg.huber_delta)
    return rho, lin.ok


def robust_cost(source: np.ndarray, grid2: HeightGrid, pose: Pose, cfg: SolverConfig, mask: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Huber cost over supported terms, optionally restricted to ``mask``.

    Returns (cost, supported mask over all source points).
    """
    rho, ok = _term_costs(source, grid2, pose, cfg)
    use = ok if mask is None else ok & mask
    return float(rho[use].sum()), ok


def inlier_fraction(source: np.ndarray, grid2: HeightGrid, pose: Pose, cfg: SolverConfig) -> float:
    """Share of supported terms whose residual lies inside the Huber threshold."""
    lin = evaluate_terms(source, grid2, pose, cfg.mode, with_jacobian=False)
    if len(lin.residuals) == 0:
        return 0.0
    return float(np.mean(np.abs(lin.residuals) <= cfg.huber_delta))


def squared_cost(source: np.ndarray, grid2: HeightGrid, pose: Pose, mode: str = "planar-3dof") -> tuple[float, int]:
    lin = evaluate_terms(source, grid2, pose, mode, with_jacobian=False)
    return float(lin.residuals @ lin.residuals), len(lin.residuals)


def _increment_pose(delta: np.ndarray, mode: str) -> Pose:
    return exp_map(planar_twist(delta) if mode == "planar-3dof" else delta)


def _to_mode(pose: Pose, mode: str) -> Pose:
    return planar_embed(planar_project(pose)) if mode == "planar-3dof" else pose


def build_pyramid(grid: HeightGrid, levels: int) -> list[HeightGrid]:
    """Finest first; stops early when a level cannot be halved."""
    out = [grid]
    while len(out) < levels:
        nxt = out[-1].downsample()
        if nxt is None:
            break
        out.append(nxt)
    return out


@dataclass
class _LevelOutcome:
    pose: Pose
    iterations: int
    converged: bool
    residual_count: int
    condition: float
    update_norm: float
    cost: float


def _solve_level(source: np.ndarray, grid2: HeightGrid, pose: Pose, cfg: SolverConfig, level: int) -> _LevelOutcome:
    cond = float("nan")
    update_norm = float("nan")
    cost = float("nan")
    n = 0
    small = 0
    for it in range(1, cfg.max_iterations + 1):
        lin = evaluate_terms(source, grid2, pose, cfg.mode)
        n = len(lin.residuals)
        if n < cfg.min_residuals:
            raise InsufficientResiduals(n, cfg.min_residuals, level)
        w = huber_weights(lin.residuals, cfg.huber_delta)
        delta, cond = gauss_newton_step(lin.jacobian, lin.residuals, w, cfg.max_condition, cfg.chunk_size, cfg.workers)
        # candidate and current cost are compared over the terms supported at both poses
        rho = np.zeros(len(source))
        rho[lin.ok] = huber_cost(lin.residuals, cfg.huber_delta)
        step = 1.0
        for _ in range(cfg.max_step_halvings + 1):
            candidate = compose(_increment_pose(step * delta, cfg.mode), pose)
            new_rho, new_ok = _term_costs(source, grid2, candidate, cfg)
            both = lin.ok & new_ok
            cost = float(rho[both].sum())
            new_cost = float(new_rho[both].sum())
            if new_cost <= cost:
                break
            step *= 0.5
        else:
            update_norm = float(np.linalg.norm(delta))
            log.debug("level %d it %d: no descent after %d halvings, |dxi| %.3g", level, it, cfg.max_step_halvings, update_norm)
            # no descent along the Gauss-Newton direction: stationary only if the step is already tiny
            stationary = update_norm <= max(cfg.update_norm_tolerance, cfg.stationary_step_tolerance)
            return _LevelOutcome(pose, it, stationary, n, cond, update_norm, cost)
        update_norm = float(np.linalg.norm(step * delta))
        decrease = cost - new_cost
        log.debug("level %d it %d: n=%d cost %.6g -> %.6g step %.3g |dxi| %.3g", level, it, n, cost, new_cost, step, update_norm)
        pose = candidate
        if update_norm <= cfg.update_norm_tolerance or decrease <= cfg.cost_decrease_tolerance * max(cost, 1e-300):
            return _LevelOutcome(pose, it, True, n, cond, update_norm, new_cost)
        # support changes at cell borders can make sub-tolerance steps cycle; two in a row mean stationary
        small = small + 1 if update_norm <= cfg.stationary_step_tolerance else 0
        if small >= 2:
            return _LevelOutcome(pose, it, True, n, cond, update_norm, new_cost)
    return _LevelOutcome(pose, cfg.max_iterations, False, n, cond, update_norm, cost)


def _inlier_count(source, grid2, pose, cfg) -> int:
    lin = evaluate_terms(source, grid2, pose, cfg.mode, with_jacobian=False)
    return int(np.count_nonzero(np.abs(lin.residuals) <= cfg.huber_delta))


def _multi_start(src, grid2, pose, cfg, level) -> _LevelOutcome:
    """Solve from each yaw offset around ``pose``; keep the start with most inliers."""
    best, best_score, last_exc = None, -1, None
    for deg in cfg.yaw_starts_deg:
        start = compose(Pose(rot_z(math.radians(deg)), np.zeros(3)), pose) if deg else pose
        try:
            out = _solve_level(src, grid2, start, cfg, level)
        except (InsufficientResiduals, SingularNormalMatrix) as exc:
            last_exc = exc
            continue
        score = _inlier_count(src, grid2, out.pose, cfg)
        if score > best_score:
            best, best_score = out, score
    if best is None:
        raise last_exc
    return best


def register(
    grid1: HeightGrid,
    grid2: HeightGrid,
    init: Pose | None = None,
    cfg: SolverConfig = SolverConfig(),
    strict: bool = False,
) -> RegistrationResult:
    """Estimate the pose mapping grid 1 into grid 2, coarse to fine.

    The coarsest usable level is solved from every yaw offset in
    ``cfg.yaw_starts_deg`` and the start with the most inliers is refined on
    the finer levels. Coarse levels lacking ``min_residuals`` semi-dense cells
    are skipped; at the finest level that raises InsufficientResiduals. A run
    that stops without meeting a tolerance, or ends with fewer than
    ``cfg.min_inlier_fraction`` inliers, is returned with ``converged=False``
    (or raises NotConverged carrying that result when ``strict`` is set).
    """
    if grid1.config != grid2.config:
        raise ValueError("grids must share a GridConfig")
    t0 = time.perf_counter()
    pose = _to_mode(init if init is not None else Pose.identity(), cfg.mode)
    pyr1 = build_pyramid(grid1, cfg.pyramid_levels)
    pyr2 = build_pyramid(grid2, cfg.pyramid_levels)
    levels = []
    outcome = None
    for level in range(len(pyr1) - 1, -1, -1):
        src = source_points(pyr1[level], cfg.gradient_threshold, cfg.anchor)
        finest = level == 0
        if len(src) < cfg.min_residuals:
            if finest:
                raise InsufficientResiduals(len(src), cfg.min_residuals, level)
            levels.append({"level": level, "skipped": True, "selected": len(src)})
            continue
        try:
            if outcome is None and len(cfg.yaw_starts_deg) > 1:
                outcome = _multi_start(src, pyr2[level], pose, cfg, level)
            else:
                outcome = _solve_level(src, pyr2[level], pose, cfg, level)
        except (InsufficientResiduals, SingularNormalMatrix) as exc:
            if finest:
                raise
            levels.append({"level": level, "skipped": True, "selected": len(src), "reason": type(exc).__name__})
            continue
        pose = outcome.pose
        levels.append(
            {
                "level": level,
                "selected": len(src),
                "iterations": outcome.iterations,
                "converged": outcome.converged,
                "residual_count": outcome.residual_count,
            }
        )
    final_cost, _ = squared_cost(src, pyr2[0], pose, cfg.mode)
    inliers = inlier_fraction(src, pyr2[0], pose, cfg)
    converged = outcome.converged and inliers >= cfg.min_inlier_fraction
    result = RegistrationResult(
        relative_pose=pose,
        final_cost=final_cost,
        iterations=outcome.iterations,
        residual_count=outcome.residual_count,
        converged=converged,
        condition_estimate=outcome.condition,
        last_update_norm=outcome.update_norm,
        inlier_fraction=inliers,
        levels=levels,
        runtime=time.perf_counter() - t0,
    )
    if strict and not converged:
        raise NotConverged(result)
    return result


# --- ground levelling -------------------------------------------------------------------


@dataclass(frozen=True)
class GroundCorrection:
    """Rotation applied to level a scan. roll/pitch are in radians (x-then-y convention)."""

    rotation: np.ndarray
    roll: float
    pitch: float
    normal: np.ndarray
    inlier_fraction: float
    applied: bool = True


def pitch_compensate(
    scan: Scan,
    z_band_max: float = -1.0,
    inlier_threshold: float = 0.03,
    hypotheses: int = 500,
    refinements: int = 3,
    max_candidates: int = 4000,
    max_tilt_deg: float = 15.0,
    min_inlier_fraction: float = 0.2,
    seed: int = 0,
) -> tuple[Scan, GroundCorrection]:
    """Level a scan on its dominant ground plane.

    RANSAC runs over points with z below ``z_band_max``; the winning plane is
    refit to its inliers by least squares and the scan is rotated so its normal
    becomes +z. Raises NoGroundPlane when fewer than ``min_inlier_fraction`` of
    the band points support the plane. The refit is repeated ``refinements``
    times with the inlier set recomputed from the refined plane, which keeps a
    tilted hypothesis from straddling two parallel surfaces such as a road and
    a curb.
    """
    if len(scan) == 0:
        raise ValueError("cannot level an empty scan")
    band = scan.points[scan.points[:, 2] < z_band_max]
    if len(band) < 3:
        raise NoGroundPlane(0.0)
    rng = np.random.Generator(np.random.PCG64(seed))
    cand = band if len(band) <= max_candidates else band[rng.choice(len(band), max_candidates, replace=False)]
    idx = rng.integers(0, len(cand), size=(hypotheses, 3))
    a, b, c = cand[idx[:, 0]], cand[idx[:, 1]], cand[idx[:, 2]]
    nrm = np.cross(b - a, c - a)
    length = np.linalg.norm(nrm, axis=1)
    good = length > 1e-9
    nrm = nrm[good] / length[good, None]
    nrm *= np.sign(nrm[:, 2:3] + (nrm[:, 2:3] == 0))
    a = a[good]
    flat = nrm[:, 2] >= math.cos(math.radians(max_tilt_deg))
    if not flat.any():
        raise NoGroundPlane(0.0)
    nrm, a = nrm[flat], a[flat]
    d = -(nrm * a).sum(axis=1)
    dist = np.abs(cand @ nrm.T + d)
    scores = (dist < inlier_threshold).sum(axis=0)
    best = int(np.argmax(scores))
    n, dd = nrm[best], d[best]
    inl = np.abs(band @ n + dd) < inlier_threshold
    frac = float(inl.mean())
    if frac < min_inlier_fraction or inl.sum() < 3:
        raise NoGroundPlane(frac)
    for _ in range(max(1, refinements)):
        pts = band[inl]
        centroid = pts.mean(axis=0)
        _, _, vt = np.linalg.svd(pts - centroid, full_matrices=False)
        n = vt[-1] * (1.0 if vt[-1][2] >= 0 else -1.0)
        refined = np.abs((band - centroid) @ n) < inlier_threshold
        if refined.sum() < 3 or np.array_equal(refined, inl):
            break
        inl = refined
    axis = np.cross(n, [0.0, 0.0, 1.0])
    s = np.linalg.norm(axis)
    angle = math.atan2(s, n[2])
    R = np.eye(3) if s < 1e-15 else exp_so3(axis / s * angle)
    pitch = math.asin(max(-1.0, min(1.0, -R[2, 0])))
    roll = math.atan2(R[2, 1], R[2, 2])
    leveled = scan.with_points(scan.points @ R.T)
    return leveled, GroundCorrection(R, roll, pitch, n, frac)
