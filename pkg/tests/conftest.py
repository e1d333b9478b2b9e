"""Shared fixtures: small random grids and cached synthetic scenes."""

from __future__ import annotations

import functools

import numpy as np
import pytest

from dlo.heightgrid import GridConfig, HeightGrid, build_height_grid
from dlo.lie import Pose, PlanarPose, compose, planar_embed, twist_hat
from dlo.synth import clutter_scene, sample_surface, sensor_pose

SMALL = GridConfig(rows=40, cols=48, f_x=0.1, f_y=0.1)


def rng_for(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def random_grid(rng: np.random.Generator, cfg: GridConfig = SMALL, invalid_fraction: float = 0.1, smooth: bool = True) -> HeightGrid:
    """Random height field with a sprinkling of invalid cells."""
    mean = rng.normal(0.0, 0.5, size=cfg.shape)
    if smooth:
        # a few box steps on top of a gentle slope so gradients vary in size
        v, u = np.mgrid[0 : cfg.rows, 0 : cfg.cols]
        mean = 0.02 * u - 0.01 * v + 0.1 * mean
        for _ in range(4):
            u0, v0 = rng.integers(0, cfg.cols - 5), rng.integers(0, cfg.rows - 5)
            mean[v0 : v0 + rng.integers(3, 12), u0 : u0 + rng.integers(3, 12)] += rng.uniform(0.2, 1.5)
    valid = rng.uniform(size=cfg.shape) >= invalid_fraction
    return HeightGrid.from_means(cfg, mean, valid)


def random_planar(rng: np.random.Generator, t_max: float = 1.0, yaw_max_deg: float = 10.0) -> PlanarPose:
    r = rng.uniform(0.0, t_max)
    a = rng.uniform(0.0, 2 * np.pi)
    return PlanarPose(r * np.cos(a), r * np.sin(a), np.radians(rng.uniform(-yaw_max_deg, yaw_max_deg)))


@functools.lru_cache(maxsize=8)
def dense_pair(scene_seed: int, truth: PlanarPose, n_points: int = 1_600_000, cfg: GridConfig = GridConfig()):
    """Grids of one clutter scene seen from two poses; ``truth`` maps grid 1 into grid 2."""
    scene = clutter_scene(scene_seed)
    T = planar_embed(truth)
    p1 = sensor_pose(0.0, 0.0, 0.0)
    p2 = compose(p1, T.inverse())
    g1 = build_height_grid(sample_surface(scene, p1, n_points, seed=1), cfg)
    g2 = build_height_grid(sample_surface(scene, p2, n_points, seed=2), cfg)
    return g1, g2


@pytest.fixture
def rng():
    return rng_for(12345)


def pose_close(a: Pose, b: Pose, t_tol: float, r_tol: float) -> bool:
    d = compose(a, b.inverse())
    return float(np.linalg.norm(d.t)) <= t_tol and d.rotation_angle() <= r_tol


def brute_force_selection(g: HeightGrid, threshold: float) -> set[tuple[int, int]]:
    """Cell-by-cell forward-difference filter written without array slicing."""
    rows, cols = g.config.shape
    m, ok = g.mean.tolist(), g.valid.tolist()
    out = set()
    for v in range(rows - 1):
        for u in range(cols - 1):
            if not (ok[v][u] and ok[v][u + 1] and ok[v + 1][u]):
                continue
            du = m[v][u + 1] - m[v][u]
            dv = m[v + 1][u] - m[v][u]
            if (du * du + dv * dv) ** 0.5 > threshold:
                out.add((u, v))
    return out


def residual_at(grid2: HeightGrid, q: np.ndarray) -> np.ndarray:
    """Height residual q_z - mu2(C q) evaluated point by point through the scalar API."""
    from dlo.heightgrid import bilinear_sample

    out = []
    for x, y, z in q:
        gu, gv = grid2.config.to_grid_coords(np.array([x, y]))
        out.append(z - bilinear_sample(grid2, float(gu), float(gv)))
    return np.array(out)


def finite_difference_rows(grid2: HeightGrid, q: np.ndarray, mode: str, h: float = 1e-6) -> np.ndarray:
    """Central differences of the residual under left twist perturbations of q."""
    from dlo.lie import exp_map, planar_twist

    dof = 3 if mode == "planar-3dof" else 6
    rows = np.zeros((len(q), dof))
    for k in range(dof):
        step = np.zeros(dof)
        step[k] = h
        xi_p = planar_twist(step) if dof == 3 else step
        plus = exp_map(xi_p).apply(q)
        minus = exp_map(-np.asarray(xi_p)).apply(q)
        rows[:, k] = (residual_at(grid2, plus) - residual_at(grid2, minus)) / (2 * h)
    return rows


def away_from_cell_borders(grid2: HeightGrid, q: np.ndarray, margin: float = 1e-3) -> np.ndarray:
    """Mask of points whose grid coordinates are not within ``margin`` cells of a border.

    The bilinear surface has kinks on cell borders, where no derivative exists.
    """
    gu, gv = grid2.config.to_grid_coords(q[:, :2])
    fu, fv = gu - np.floor(gu), gv - np.floor(gv)
    return (np.minimum(fu, 1 - fu) > margin) & (np.minimum(fv, 1 - fv) > margin)


def series_exp(xi, terms: int = 20) -> np.ndarray:
    """Truncated power series of the 4x4 twist matrix (independent oracle)."""
    X = twist_hat(xi)
    out = np.eye(4)
    term = np.eye(4)
    for k in range(1, terms):
        term = term @ X / k
        out = out + term
    return out
