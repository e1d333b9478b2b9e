"""2.5D height grids: rasterisation, forward-difference gradients, sub-cell sampling.

Cell ``(u, v)`` covers ``u <= x / f_x + c_x < u + 1`` and likewise for ``v``
along y. Arrays are stored ``[v, u]`` (row = v). For interpolation the
continuous grid coordinate of a metric point is ``x / f_x + c_x - 0.5`` so that
integer coordinates sit on cell centres, where the cell means live.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .errors import InvalidNeighborhood, OutOfBounds
from .pointcloud import Point3, Scan

MIN_POINTS_PER_CELL = 3
DEFAULT_GRADIENT_THRESHOLD = 0.05
_HEADER = struct.Struct("<IIdddd")


@dataclass(frozen=True)
class GridConfig:
    rows: int = 400
    cols: int = 400
    f_x: float = 0.1
    f_y: float = 0.1
    c_x: float | None = None
    c_y: float | None = None
    # points higher than this above the sensor are discarded (overhangs)
    z_ceiling: float | None = 3.0

    def __post_init__(self):
        if self.rows <= 0 or self.cols <= 0:
            raise ValueError(f"grid shape must be positive, got {self.rows}x{self.cols}")
        if not (self.f_x > 0 and self.f_y > 0):
            raise ValueError("cell sizes f_x, f_y must be positive")
        if self.c_x is None:
            object.__setattr__(self, "c_x", self.cols / 2)
        if self.c_y is None:
            object.__setattr__(self, "c_y", self.rows / 2)

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows, self.cols

    @classmethod
    def square(cls, extent: float, cell: float, **kw) -> "GridConfig":
        """Grid covering ``extent`` x ``extent`` meters centred on the sensor."""
        n = int(round(extent / cell))
        return cls(rows=n, cols=n, f_x=cell, f_y=cell, **kw)

    def coarser(self) -> "GridConfig | None":
        """Config of the next pyramid level (2x cell size), or None when the shape is odd."""
        if self.rows % 2 or self.cols % 2 or self.rows < 4 or self.cols < 4:
            return None
        return replace(
            self,
            rows=self.rows // 2,
            cols=self.cols // 2,
            f_x=2 * self.f_x,
            f_y=2 * self.f_y,
            c_x=self.c_x / 2,
            c_y=self.c_y / 2,
        )

    def to_grid_coords(self, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Continuous (u, v) coordinates with cell centres on integers."""
        xy = np.asarray(xy, dtype=np.float64)
        return xy[..., 0] / self.f_x + self.c_x - 0.5, xy[..., 1] / self.f_y + self.c_y - 0.5

    def cell_centers(self, u, v) -> tuple[np.ndarray, np.ndarray]:
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        return (u + 0.5 - self.c_x) * self.f_x, (v + 0.5 - self.c_y) * self.f_y


class CellIndex(NamedTuple):
    u: int
    v: int


@dataclass(frozen=True)
class HeightGrid:
    """Per-cell height expectation.

    ``mean`` is NaN where no point landed; ``valid`` marks cells with at least
    three points. ``total`` keeps the raw height sums so coarser levels can be
    re-aggregated exactly.
    """

    config: GridConfig
    mean: np.ndarray
    count: np.ndarray
    valid: np.ndarray
    total: np.ndarray
    skipped: int = 0
    clipped: int = 0
    _filled: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        for name in ("mean", "count", "valid", "total"):
            arr = getattr(self, name)
            if arr.shape != self.config.shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {self.config.shape}")
            arr.setflags(write=False)
        filled = np.where(self.valid, self.mean, 0.0)
        filled.setflags(write=False)
        object.__setattr__(self, "_filled", filled)

    @classmethod
    def from_sums(cls, config: GridConfig, total, count, mean=None, skipped=0, clipped=0) -> "HeightGrid":
        count = np.asarray(count, dtype=np.uint32)
        total = np.asarray(total, dtype=np.float64)
        if mean is None:
            with np.errstate(invalid="ignore", divide="ignore"):
                mean = total / count
        mean = np.where(count > 0, mean, np.nan)
        valid = count >= MIN_POINTS_PER_CELL
        return cls(config, mean, count, valid, total, skipped, clipped)

    @classmethod
    def from_means(cls, config: GridConfig, mean, valid=None) -> "HeightGrid":
        """Grid with prescribed means; mostly for tests. Valid cells get count 3."""
        mean = np.asarray(mean, dtype=np.float64)
        if valid is None:
            valid = np.isfinite(mean)
        valid = np.asarray(valid, dtype=bool) & np.isfinite(mean)
        count = np.where(valid, MIN_POINTS_PER_CELL, 0).astype(np.uint32)
        mean = np.where(valid, mean, np.nan)
        return cls(config, mean, count, valid, np.where(valid, mean * count, 0.0))

    @property
    def filled(self) -> np.ndarray:
        """Means with invalid cells set to 0; safe for arithmetic with zero weights."""
        return self._filled

    def is_valid(self, u: int, v: int) -> bool:
        return 0 <= u < self.config.cols and 0 <= v < self.config.rows and bool(self.valid[v, u])

    def downsample(self) -> "HeightGrid | None":
        """Next pyramid level: 2x2 blocks of cells merged, means re-aggregated from point sums."""
        cfg = self.config.coarser()
        if cfg is None:
            return None

        def pool(a):
            return a.reshape(cfg.rows, 2, cfg.cols, 2).sum(axis=(1, 3))

        return HeightGrid.from_sums(
            cfg,
            pool(self.total),
            pool(self.count.astype(np.int64)),
            skipped=self.skipped,
            clipped=self.clipped,
        )


@dataclass(frozen=True)
class SelectedCells:
    """Cells whose forward-difference gradient magnitude exceeds a threshold.

    Stored as parallel arrays in row-major order.
    """

    u: np.ndarray
    v: np.ndarray
    gradient: np.ndarray  # (N, 2), meters per cell
    threshold: float

    def __len__(self) -> int:
        return len(self.u)

    def __iter__(self) -> Iterator[tuple[CellIndex, np.ndarray]]:
        for u, v, g in zip(self.u, self.v, self.gradient):
            yield CellIndex(int(u), int(v)), g

    def as_set(self) -> set[tuple[int, int]]:
        return set(zip(self.u.tolist(), self.v.tolist()))


def project_points(points: np.ndarray, cfg: GridConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Integer cell indices for an (N, 3) array; returns (u, v, in_bounds)."""
    points = np.asarray(points, dtype=np.float64)
    u = np.floor(points[:, 0] / cfg.f_x + cfg.c_x)
    v = np.floor(points[:, 1] / cfg.f_y + cfg.c_y)
    inb = (u >= 0) & (u < cfg.cols) & (v >= 0) & (v < cfg.rows)
    return u.astype(np.int64), v.astype(np.int64), inb


def project_point(p: Point3, cfg: GridConfig = GridConfig()) -> CellIndex:
    u, v, inb = project_points(np.array([p[:3]], dtype=np.float64), cfg)
    if not inb[0]:
        raise OutOfBounds(f"point {tuple(p)} maps to cell ({u[0]}, {v[0]}) outside {cfg.cols}x{cfg.rows}")
    return CellIndex(int(u[0]), int(v[0]))


def build_height_grid(scan: Scan | np.ndarray, cfg: GridConfig = GridConfig()) -> HeightGrid:
    """Rasterise a scan into per-cell mean heights.

    Points are summed per cell in a canonical (cell, z) order followed by a
    second correction pass, so the grid does not depend on point order.
    """
    points = scan.points if isinstance(scan, Scan) else np.asarray(scan, dtype=np.float64).reshape(-1, 3)
    clipped = 0
    if cfg.z_ceiling is not None:
        keep = points[:, 2] <= cfg.z_ceiling
        clipped = int(len(points) - np.count_nonzero(keep))
        points = points[keep]
    u, v, inb = project_points(points, cfg)
    skipped = int(len(points) - np.count_nonzero(inb))
    cell = v[inb] * cfg.cols + u[inb]
    z = points[inb, 2]
    order = np.lexsort((z, cell))
    cell, z = cell[order], z[order]

    n = cfg.rows * cfg.cols
    count = np.bincount(cell, minlength=n)
    total = np.bincount(cell, weights=z, minlength=n)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = total / count
        if len(z):
            mean += np.bincount(cell, weights=z - mean[cell], minlength=n) / count
    return HeightGrid.from_sums(
        cfg,
        total.reshape(cfg.shape),
        count.reshape(cfg.shape),
        mean=mean.reshape(cfg.shape),
        skipped=skipped,
        clipped=clipped,
    )


def gradient_field(g: HeightGrid) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Forward differences over the whole grid.

    Returns (du, dv, ok) arrays of the grid shape; ``ok`` marks cells where the
    cell and both forward neighbours are valid. du/dv are 0 elsewhere.
    """
    m, valid = g.filled, g.valid
    du = np.zeros(m.shape)
    dv = np.zeros(m.shape)
    ok = np.zeros(m.shape, dtype=bool)
    ok_u = valid[:, :-1] & valid[:, 1:]
    ok_v = valid[:-1, :] & valid[1:, :]
    ok[:-1, :-1] = ok_u[:-1, :] & ok_v[:, :-1]
    du[:, :-1] = m[:, 1:] - m[:, :-1]
    dv[:-1, :] = m[1:, :] - m[:-1, :]
    du[~ok] = 0.0
    dv[~ok] = 0.0
    return du, dv, ok


def grid_gradient(g: HeightGrid, c: CellIndex) -> np.ndarray:
    u, v = c
    for cu, cv in ((u, v), (u + 1, v), (u, v + 1)):
        if not g.is_valid(cu, cv):
            raise InvalidNeighborhood(f"gradient at ({u}, {v}) needs valid cell ({cu}, {cv})")
    m = g.mean
    return np.array([m[v, u + 1] - m[v, u], m[v + 1, u] - m[v, u]])


def select_semi_dense_cells(g: HeightGrid, threshold: float = DEFAULT_GRADIENT_THRESHOLD) -> SelectedCells:
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    du, dv, ok = gradient_field(g)
    mask = ok & (np.hypot(du, dv) > threshold)
    v, u = np.nonzero(mask)
    return SelectedCells(u, v, np.stack([du[v, u], dv[v, u]], axis=-1), threshold)


def _support(g: HeightGrid, gu: np.ndarray, gv: np.ndarray):
    u0 = np.floor(gu)
    v0 = np.floor(gv)
    a = gu - u0
    b = gv - v0
    u0 = u0.astype(np.int64)
    v0 = v0.astype(np.int64)
    rows, cols = g.config.shape
    inb = (u0 >= 0) & (v0 >= 0) & (u0 + 1 < cols) & (v0 + 1 < rows)
    uc = np.where(inb, u0, 0)
    vc = np.where(inb, v0, 0)
    valid = g.valid
    # the diagonal corner has zero weight in both value and gradient at an exact node
    at_node = (a == 0) & (b == 0)
    ok = inb & valid[vc, uc] & valid[vc, uc + 1] & valid[vc + 1, uc] & (valid[vc + 1, uc + 1] | at_node)
    m = g.filled
    return ok, a, b, m[vc, uc], m[vc, uc + 1], m[vc + 1, uc], m[vc + 1, uc + 1]


def bilinear_sample_many(g: HeightGrid, gu, gv) -> tuple[np.ndarray, np.ndarray]:
    """Interpolated heights at continuous grid coordinates; returns (values, ok)."""
    gu = np.asarray(gu, dtype=np.float64)
    gv = np.asarray(gv, dtype=np.float64)
    ok, a, b, m00, m10, m01, m11 = _support(g, gu, gv)
    val = (1 - b) * ((1 - a) * m00 + a * m10) + b * ((1 - a) * m01 + a * m11)
    return np.where(ok, val, np.nan), ok


def bilinear_gradient_many(g: HeightGrid, gu, gv) -> tuple[np.ndarray, np.ndarray]:
    """Forward differences interpolated across the cell: the exact derivative of
    :func:`bilinear_sample_many` inside each cell, in meters per cell. Returns ((N, 2), ok)."""
    gu = np.asarray(gu, dtype=np.float64)
    gv = np.asarray(gv, dtype=np.float64)
    ok, a, b, m00, m10, m01, m11 = _support(g, gu, gv)
    d_u = (1 - b) * (m10 - m00) + b * (m11 - m01)
    d_v = (1 - a) * (m01 - m00) + a * (m11 - m10)
    grad = np.stack([d_u, d_v], axis=-1)
    grad[~ok] = np.nan
    return grad, ok


def bilinear_sample(g: HeightGrid, u: float, v: float) -> float:
    val, ok = bilinear_sample_many(g, np.array([u]), np.array([v]))
    if not ok[0]:
        raise InvalidNeighborhood(f"no valid bilinear support at ({u}, {v})")
    return float(val[0])


def bilinear_gradient(g: HeightGrid, u: float, v: float) -> np.ndarray:
    grad, ok = bilinear_gradient_many(g, np.array([u]), np.array([v]))
    if not ok[0]:
        raise InvalidNeighborhood(f"no valid bilinear support at ({u}, {v})")
    return grad[0]


def grid_image(g: HeightGrid, sel: SelectedCells | None = None) -> np.ndarray:
    """RGB uint8 image (rows x cols x 3): grey heights, black invalid, green selection."""
    rows, cols = g.config.shape
    img = np.zeros((rows, cols, 3), dtype=np.uint8)
    if g.valid.any():
        vals = g.mean[g.valid]
        lo, hi = vals.min(), vals.max()
        if hi > lo:
            grey = np.round((vals - lo) / (hi - lo) * 255.0)
        else:
            grey = np.full(vals.shape, 255.0)
        img[g.valid] = grey.astype(np.uint8)[:, None]
    if sel is not None and len(sel):
        img[sel.v, sel.u] = (0, 255, 0)
    return img


def render_grid_image(g: HeightGrid, sel: SelectedCells | None, path) -> None:
    from PIL import Image

    img = grid_image(g, sel)
    if sel is None:
        Image.fromarray(img[:, :, 0], mode="L").save(path, format="PNG")
    else:
        Image.fromarray(img, mode="RGB").save(path, format="PNG")


def save_grid(g: HeightGrid, path) -> None:
    cfg = g.config
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(cfg.rows, cfg.cols, cfg.f_x, cfg.f_y, cfg.c_x, cfg.c_y))
        fh.write(np.ascontiguousarray(g.mean, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(g.count, dtype="<u4").tobytes())


def load_grid(path) -> HeightGrid:
    raw = Path(path).read_bytes()
    rows, cols, fx, fy, cx, cy = _HEADER.unpack_from(raw)
    cfg = GridConfig(rows, cols, fx, fy, cx, cy)
    n = rows * cols
    off = _HEADER.size
    mean = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(rows, cols).astype(np.float64)
    count = np.frombuffer(raw, dtype="<u4", count=n, offset=off + 8 * n).reshape(rows, cols)
    total = np.where(count > 0, mean * count, 0.0)
    return HeightGrid.from_sums(cfg, total, count, mean=mean)
