"""Synthetic scenes, a ray-casting LiDAR model and ground-truth trajectories.

Random numbers come from numpy's PCG64 seeded through ``SeedSequence`` so a
(seed, frame) pair always renders the same scan.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .lie import Pose, compose, rot_z
from .pointcloud import Scan


@dataclass(frozen=True)
class Box:
    """Upright box, footprint centred at (x, y), rotated by ``yaw`` about z."""

    x: float
    y: float
    yaw: float
    length: float
    width: float
    height: float
    base: float = 0.0


@dataclass(frozen=True)
class Cylinder:
    x: float
    y: float
    radius: float
    height: float
    base: float = 0.0


@dataclass(frozen=True)
class SceneSpec:
    ground_z: float = 0.0
    ground_extent: float = 500.0
    roughness: float = 0.0
    boxes: tuple[Box, ...] = ()
    cylinders: tuple[Cylinder, ...] = ()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        object.__setattr__(self, "cylinders", tuple(self.cylinders))
        if self.roughness < 0 or self.ground_extent <= 0:
            raise ValueError("roughness must be >= 0 and ground_extent > 0")

    def ground_height(self, x, y) -> np.ndarray:
        """Deterministic smooth undulation of amplitude ~roughness around ground_z."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if self.roughness == 0:
            return np.full(np.broadcast(x, y).shape, self.ground_z)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, 0xB0DE])))
        k = rng.uniform(0.3, 1.5, size=(6, 1)) * np.array([[1.0, 1.0]])
        ang = rng.uniform(0, 2 * math.pi, size=6)
        phase = rng.uniform(0, 2 * math.pi, size=6)
        h = np.zeros(np.broadcast(x, y).shape)
        for i in range(6):
            h = h + np.sin(k[i, 0] * (math.cos(ang[i]) * x + math.sin(ang[i]) * y) + phase[i])
        return self.ground_z + self.roughness * h / math.sqrt(3.0)


@dataclass(frozen=True)
class SensorModel:
    """Spinning multi-beam LiDAR. Defaults approximate an HDL-64."""

    beams: int = 64
    elevation_max_deg: float = 2.0
    elevation_min_deg: float = -24.8
    horizontal_res_deg: float = 0.17
    max_range: float = 120.0
    range_noise: float = 0.02

    def __post_init__(self):
        if self.beams <= 0 or self.horizontal_res_deg <= 0 or self.max_range <= 0 or self.range_noise < 0:
            raise ValueError("sensor parameters must be positive")
        if self.elevation_min_deg > self.elevation_max_deg:
            raise ValueError("elevation_min_deg must not exceed elevation_max_deg")

    def ray_directions(self) -> np.ndarray:
        """Unit directions in the sensor frame, beam-major, shape (beams * n_azimuth, 3)."""
        elev = np.radians(np.linspace(self.elevation_max_deg, self.elevation_min_deg, self.beams))
        n_az = int(round(360.0 / self.horizontal_res_deg))
        az = -math.pi + np.arange(n_az) * (2 * math.pi / n_az)
        e, a = np.meshgrid(elev, az, indexing="ij")
        c = np.cos(e)
        return np.stack([c * np.cos(a), c * np.sin(a), np.sin(e)], axis=-1).reshape(-1, 3)


def _hit_ground(scene: SceneSpec, o: np.ndarray, d: np.ndarray) -> np.ndarray:
    t = np.full(len(d), np.inf)
    down = d[:, 2] < -1e-12
    t[down] = (scene.ground_z - o[2]) / d[down, 2]
    if scene.roughness > 0:
        t[down] = _first_rough_hit(scene, o, d[down])
    finite = np.isfinite(t)
    hit = o[:2] + np.where(finite, t, 0.0)[:, None] * d[:, :2]
    out = (np.abs(hit) > scene.ground_extent).any(axis=1) | ~finite | (t <= 0)
    t[out] = np.inf
    return t


def _first_rough_hit(scene: SceneSpec, o: np.ndarray, d: np.ndarray, samples: int = 32, iters: int = 50) -> np.ndarray:
    """First crossing of a downward ray with the undulating ground.

    The surface lies within ``ground_z`` plus or minus ``bound``, which brackets the crossing.
    The bracket is marched to find the first sign change, then bisected.
    """
    bound = scene.roughness * 6 / math.sqrt(3.0)
    t_lo = np.maximum((scene.ground_z + bound - o[2]) / d[:, 2], 0.0)
    t_hi = (scene.ground_z - bound - o[2]) / d[:, 2]

    def above(t):
        p = o + t[:, None] * d
        return p[:, 2] > scene.ground_height(p[:, 0], p[:, 1])

    n = len(d)
    a = t_lo.copy()
    b = t_hi.copy()
    found = np.zeros(n, dtype=bool)
    prev = t_lo
    for k in range(1, samples + 1):
        cur = t_lo + (t_hi - t_lo) * (k / samples)
        crossed = ~found & ~above(cur)
        a[crossed] = prev[crossed]
        b[crossed] = cur[crossed]
        found |= crossed
        prev = cur
    for _ in range(iters):
        mid = 0.5 * (a + b)
        up = above(mid)
        a = np.where(up, mid, a)
        b = np.where(up, b, mid)
    return 0.5 * (a + b)


def _hit_box(box: Box, o: np.ndarray, d: np.ndarray) -> np.ndarray:
    Rt = rot_z(-box.yaw)
    lo_ = Rt @ (o - np.array([box.x, box.y, 0.0]))
    ld = d @ Rt.T
    half = np.array([box.length / 2, box.width / 2])
    lo = np.array([-half[0], -half[1], box.base])
    hi = np.array([half[0], half[1], box.base + box.height])
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - lo_) / ld
        t2 = (hi - lo_) / ld
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    # rays parallel to a slab: inside -> unconstrained, outside -> miss
    par = ld == 0
    inside = (lo_ >= lo) & (lo_ <= hi)
    tmin = np.where(par, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(par, np.where(inside, np.inf, -np.inf), tmax)
    tn = tmin.max(axis=1)
    tf = tmax.min(axis=1)
    return np.where((tn <= tf) & (tn > 0), tn, np.inf)


def _hit_cylinder(cyl: Cylinder, o: np.ndarray, d: np.ndarray) -> np.ndarray:
    ox, oy = o[0] - cyl.x, o[1] - cyl.y
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = 2 * (ox * d[:, 0] + oy * d[:, 1])
    c = ox * ox + oy * oy - cyl.radius**2
    disc = b * b - 4 * a * c
    t = np.full(len(d), np.inf)
    ok = (disc >= 0) & (a > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        ts = (-b - np.sqrt(np.where(ok, disc, 0.0))) / (2 * a)
    z = o[2] + ts * d[:, 2]
    side = ok & (ts > 0) & (z >= cyl.base) & (z <= cyl.base + cyl.height)
    t[side] = ts[side]
    top = cyl.base + cyl.height
    down = d[:, 2] < 0
    with np.errstate(divide="ignore", invalid="ignore"):
        tc = (top - o[2]) / d[:, 2]
    px = ox + tc * d[:, 0]
    py = oy + tc * d[:, 1]
    cap = down & (tc > 0) & (px * px + py * py <= cyl.radius**2)
    t = np.where(cap, np.minimum(t, tc), t)
    return t


def _box_corners(box: Box) -> np.ndarray:
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    hl, hw = box.length / 2, box.width / 2
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    return local @ np.array([[c, s], [-s, c]]) + [box.x, box.y]


def _angular_span(o: np.ndarray, corners: np.ndarray | None, center, radius: float = 0.0):
    """(centre azimuth, half-width) covering an object seen from ``o``; None if ``o`` is inside."""
    dx, dy = center[0] - o[0], center[1] - o[1]
    dist = math.hypot(dx, dy)
    mid = math.atan2(dy, dx)
    if corners is None:
        if dist <= radius * 1.01:
            return None
        return mid, math.asin(min(1.0, radius / dist)) + 1e-9
    rel = np.arctan2(corners[:, 1] - o[1], corners[:, 0] - o[0]) - mid
    rel = (rel + math.pi) % (2 * math.pi) - math.pi
    half = float(np.abs(rel).max())
    if half >= math.pi / 2 or dist <= 1e-9:
        return None
    return mid, half + 1e-9


class _AzimuthIndex:
    """Rays sorted by world azimuth so that objects only test rays in their angular span."""

    def __init__(self, d: np.ndarray):
        az = np.arctan2(d[:, 1], d[:, 0])
        self.order = np.argsort(az, kind="stable")
        self.sorted = az[self.order]

    def rays(self, span) -> np.ndarray:
        if span is None:
            return self.order
        mid, half = span
        lo, hi = mid - half, mid + half
        parts = []
        for a, b in ((lo, hi), (lo + 2 * math.pi, hi + 2 * math.pi), (lo - 2 * math.pi, hi - 2 * math.pi)):
            i, j = np.searchsorted(self.sorted, [a, b])
            if j > i:
                parts.append(self.order[i:j])
        return np.concatenate(parts) if parts else self.order[:0]


def cast_rays(scene: SceneSpec, origin, directions: np.ndarray, max_range: float = np.inf) -> np.ndarray:
    """First-hit distance along each world-frame ray; inf where nothing is hit."""
    o = np.asarray(origin, dtype=np.float64)
    t = _hit_ground(scene, o, directions)
    index = _AzimuthIndex(directions)
    for box in scene.boxes:
        corners = _box_corners(box)
        idx = index.rays(_angular_span(o, corners, (box.x, box.y)))
        if len(idx):
            t[idx] = np.minimum(t[idx], _hit_box(box, o, directions[idx]))
    for cyl in scene.cylinders:
        idx = index.rays(_angular_span(o, None, (cyl.x, cyl.y), cyl.radius))
        if len(idx):
            t[idx] = np.minimum(t[idx], _hit_cylinder(cyl, o, directions[idx]))
    t[t > max_range] = np.inf
    return t


def render_scan(
    scene: SceneSpec,
    sensor: SensorModel,
    sensor_pose: Pose,
    frame_index: int = 0,
    noise_seed: int | None = None,
) -> Scan:
    """Ray-cast one sweep; points are returned in the sensor frame.

    ``sensor_pose`` maps sensor coordinates into the world. Noise is drawn from
    PCG64 seeded by (scene.seed, noise_seed or frame_index).
    """
    d_s = sensor.ray_directions()
    d_w = d_s @ sensor_pose.R.T
    t = cast_rays(scene, sensor_pose.t, d_w, sensor.max_range)
    hit = np.isfinite(t)
    rng_t = t[hit]
    if sensor.range_noise > 0:
        key = frame_index if noise_seed is None else noise_seed
        gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([scene.seed, key])))
        rng_t = rng_t + gen.normal(0.0, sensor.range_noise, size=rng_t.shape)
    points = rng_t[:, None] * d_s[hit]
    return Scan(points, frame_index=frame_index, timestamp=0.1 * frame_index)


def surface_height(scene: SceneSpec, x, y) -> np.ndarray:
    """Height of the topmost surface above each (x, y): ground, box tops, cylinder tops."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    z = scene.ground_height(x, y)
    for b in scene.boxes:
        c, s = math.cos(b.yaw), math.sin(b.yaw)
        lx = c * (x - b.x) + s * (y - b.y)
        ly = -s * (x - b.x) + c * (y - b.y)
        inside = (np.abs(lx) <= b.length / 2) & (np.abs(ly) <= b.width / 2)
        z = np.where(inside, np.maximum(z, b.base + b.height), z)
    for cyl in scene.cylinders:
        inside = (x - cyl.x) ** 2 + (y - cyl.y) ** 2 <= cyl.radius**2
        z = np.where(inside, np.maximum(z, cyl.base + cyl.height), z)
    return z


def sample_surface(
    scene: SceneSpec,
    sensor_pose: Pose,
    n_points: int = 400_000,
    half_extent: float = 20.0,
    z_noise: float = 0.02,
    seed: int = 0,
) -> Scan:
    """Dense 2.5D sampling of the scene's top surface around a sensor pose.

    Points are drawn uniformly over a square of ``half_extent`` around the
    sensor in the world xy plane and returned in the sensor frame. Unlike
    :func:`render_scan` there is no occlusion and the density is uniform.
    """
    gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([scene.seed, seed, 0x5A])))
    xy = sensor_pose.t[:2] + gen.uniform(-half_extent, half_extent, size=(n_points, 2))
    z = surface_height(scene, xy[:, 0], xy[:, 1])
    if z_noise > 0:
        z = z + gen.normal(0.0, z_noise, size=n_points)
    world = np.column_stack([xy, z])
    return Scan(sensor_pose.inverse().apply(world))


def render_sequence(scene: SceneSpec, sensor: SensorModel, poses: list[Pose]):
    """Render every pose; returns (scans, ground-truth trajectory relative to the first pose)."""
    from .odometry import Trajectory

    scans = [render_scan(scene, sensor, p, frame_index=i) for i, p in enumerate(poses)]
    first_inv = poses[0].inverse()
    gt = Trajectory([(i, compose(first_inv, p)) for i, p in enumerate(poses)])
    return scans, gt


# --- trajectories -----------------------------------------------------------


def sensor_pose(x: float, y: float, yaw: float, height: float = 1.7) -> Pose:
    return Pose(rot_z(yaw), [x, y, height])


def straight_line(frames: int, step: float = 0.5, heading: float = 0.0, start=(0.0, 0.0), height: float = 1.7) -> list[Pose]:
    c, s = math.cos(heading), math.sin(heading)
    return [sensor_pose(start[0] + i * step * c, start[1] + i * step * s, heading, height) for i in range(frames)]


def square_loop(side: float = 25.0, step: float = 0.5, turn_radius: float = 5.0, height: float = 1.7, start=(0.0, 0.0)) -> list[Pose]:
    """Counter-clockwise square with rounded corners, sampled every ``step`` meters of arc length.

    The last pose coincides with the first.
    """
    r = turn_radius
    straight = side - 2 * r
    if straight < 0:
        raise ValueError("turn_radius too large for side")
    leg = straight + 0.5 * math.pi * r
    total = 4 * leg
    n = int(round(total / step))
    poses = []
    for i in range(n + 1):
        s = (i * total / n) % total if i < n else 0.0
        k, rem = divmod(s, leg)
        heading = k * math.pi / 2
        # corner k starts at the lower-left of the straight segment of leg k
        cx, cy = _square_corner(int(k), side, r)
        c, sn = math.cos(heading), math.sin(heading)
        if rem <= straight:
            x = cx + rem * c
            y = cy + rem * sn
            yaw = heading
        else:
            phi = (rem - straight) / r
            # centre of the turning circle, left of the heading
            ox = cx + straight * c - r * sn
            oy = cy + straight * sn + r * c
            x = ox + r * math.sin(heading + phi)
            y = oy - r * math.cos(heading + phi)
            yaw = heading + phi
        poses.append(sensor_pose(start[0] + x, start[1] + y, math.atan2(math.sin(yaw), math.cos(yaw)), height))
    return poses


def _square_corner(k: int, side: float, r: float) -> tuple[float, float]:
    # start point of the straight part of leg k for a CCW square [0, side]^2
    return [(r, 0.0), (side, r), (side - r, side), (0.0, side - r)][k % 4]


def path_length(poses: list[Pose]) -> float:
    t = np.array([p.t for p in poses])
    return float(np.linalg.norm(np.diff(t, axis=0), axis=1).sum())


# --- scene generators ---------------------------------------------------------


def urban_scene(seed: int = 0, length: float = 60.0, road_half_width: float = 4.0, n_cars: int = 8, n_poles: int = 10, n_clutter: int = 8) -> SceneSpec:
    """Street along x: raised sidewalks with curbs, parked cars, facades with gaps, poles and clutter.

    The layout is randomised per seed; the sensor drives along y = 0.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    boxes = []
    cyls = []
    half = length / 2
    w = road_half_width
    for side in (-1, 1):
        walk = float(rng.uniform(3.0, 5.0))
        curb = float(rng.uniform(0.12, 0.2))
        boxes.append(Box(0.0, side * (w + walk / 2), 0.0, length, walk, curb))
        x = -half + float(rng.uniform(0, 6))
        while x < half:
            seg = float(rng.uniform(6, 14))
            depth = float(rng.uniform(6, 12))
            boxes.append(Box(x + seg / 2, side * (w + walk + depth / 2 + float(rng.uniform(0, 1.5))), float(rng.normal(0, 0.03)), seg, depth, float(rng.uniform(3.0, 12.0))))
            x += seg + float(rng.uniform(1.0, 5.0))
    for _ in range(n_cars):
        side = rng.choice([-1, 1])
        boxes.append(Box(float(rng.uniform(-half + 3, half - 3)), float(side * (w - rng.uniform(0.9, 1.2))), float(rng.normal(0, 0.05)), float(rng.uniform(3.8, 4.8)), float(rng.uniform(1.6, 1.9)), float(rng.uniform(1.3, 1.7))))
    for _ in range(n_clutter):
        side = rng.choice([-1, 1])
        boxes.append(Box(float(rng.uniform(-half, half)), float(side * (w + rng.uniform(0.8, 3.0))), float(rng.uniform(-math.pi, math.pi)), float(rng.uniform(0.6, 3.0)), float(rng.uniform(0.5, 1.2)), float(rng.uniform(0.5, 1.3))))
    for _ in range(n_poles):
        side = rng.choice([-1, 1])
        cyls.append(Cylinder(float(rng.uniform(-half, half)), float(side * (w + rng.uniform(0.4, 2.5))), float(rng.uniform(0.08, 0.45)), float(rng.uniform(1.0, 6.0))))
    return SceneSpec(boxes=tuple(boxes), cylinders=tuple(cyls), seed=seed)


def clutter_scene(seed: int = 0, extent: float = 18.0, n_boxes: int = 30, n_cylinders: int = 12, n_walls: int = 4, clear_radius: float = 3.0) -> SceneSpec:
    """Parking-lot clutter: low boxes in random orientations, pillars and a few tall walls."""
    rng = np.random.Generator(np.random.PCG64(seed))

    def place(margin):
        while True:
            x, y = rng.uniform(-extent, extent, size=2)
            if math.hypot(x, y) > clear_radius + margin:
                return float(x), float(y)

    boxes = []
    for _ in range(n_boxes):
        x, y = place(1.0)
        boxes.append(Box(x, y, float(rng.uniform(-math.pi, math.pi)), float(rng.uniform(0.8, 4.8)), float(rng.uniform(0.6, 2.0)), float(rng.uniform(0.4, 1.6))))
    for _ in range(n_walls):
        x, y = place(3.0)
        boxes.append(Box(x, y, float(rng.uniform(-math.pi, math.pi)), float(rng.uniform(5.0, 12.0)), float(rng.uniform(0.3, 0.8)), float(rng.uniform(2.0, 6.0))))
    cyls = []
    for _ in range(n_cylinders):
        x, y = place(0.5)
        cyls.append(Cylinder(x, y, float(rng.uniform(0.15, 0.6)), float(rng.uniform(0.6, 4.0))))
    return SceneSpec(boxes=tuple(boxes), cylinders=tuple(cyls), seed=seed)


def box_scene(size: float = 2.0, height: float = 1.0, x: float = 6.0, y: float = 0.0, seed: int = 0) -> SceneSpec:
    return SceneSpec(boxes=(Box(x, y, 0.0, size, size, height),), seed=seed)


def _loop_clearance(x: float, y: float, side: float, turn_radius: float) -> float:
    # the rounded square is the set of points at distance r from [r, side - r]^2
    lo, hi = turn_radius, side - turn_radius
    dx = max(lo - x, 0.0, x - hi)
    dy = max(lo - y, 0.0, y - hi)
    outside = math.hypot(dx, dy)
    signed = outside if outside > 0 else -min(x - lo, hi - x, y - lo, hi - y)
    return abs(signed - turn_radius)


def loop_scene(
    side: float = 25.0,
    seed: int = 0,
    clutter: int = 40,
    curb: float = 0.15,
    lane: float = 3.0,
    turn_radius: float = 5.0,
) -> SceneSpec:
    """City block around a square loop [0, side]^2.

    An inner building on a raised sidewalk, outer sidewalks and facades, and
    street clutter. Curbs sit ``lane`` metres either side of the driving line.
    Clutter keeps at least 2 m of clearance from the path of
    :func:`square_loop` with the same ``side`` and ``turn_radius``.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    m = side / 2
    boxes = [
        # inner block, chamfered so the corners differ
        Box(m, m, 0.0, side - 10.0, side - 10.0, 6.0),
        Box(m - 4.0, m + 6.5, 0.0, 4.0, 2.0, 1.2),
    ]
    if curb > 0:
        walk = 4.0
        boxes.append(Box(m, m, 0.0, side - 2 * lane, side - 2 * lane, curb))
        far = side + 2 * (lane + walk)
        for cx, cy, length, width in (
            (m, -lane - walk / 2, far, walk),
            (m, side + lane + walk / 2, far, walk),
            (-lane - walk / 2, m, walk, far),
            (side + lane + walk / 2, m, walk, far),
        ):
            boxes.append(Box(cx, cy, 0.0, length, width, curb))
    # outer facades with gaps
    for k, (cx, cy, yaw) in enumerate([(m, -8.0, 0.0), (side + 8.0, m, math.pi / 2), (m, side + 8.0, 0.0), (-8.0, m, math.pi / 2)]):
        for j in (-1, 1):
            off = j * rng.uniform(7.0, 11.0)
            bx = cx + (off if yaw == 0.0 else 0.0)
            by = cy + (off if yaw != 0.0 else 0.0)
            boxes.append(Box(float(bx), float(by), yaw, float(rng.uniform(9, 14)), float(rng.uniform(0.4, 3.0)), float(rng.uniform(3.0, 9.0))))
    cyls = []
    placed = 0
    while placed < clutter:
        # along the street, beside the driving lane
        leg = int(rng.integers(4))
        along = float(rng.uniform(-4, side + 4))
        off = float(rng.choice([-1, 1]) * rng.uniform(2.5, 6.0))
        x, y = [(along, off), (side + off, along), (along, side + off), (off, along)][leg]
        if rng.uniform() < 0.5:
            obj = Cylinder(x, y, float(rng.uniform(0.1, 0.4)), float(rng.uniform(1.0, 5.0)))
            reach = obj.radius
        else:
            yaw = float(rng.uniform(-0.3, 0.3)) + (0.0 if leg % 2 == 0 else math.pi / 2)
            obj = Box(x, y, yaw, float(rng.uniform(1.0, 4.5)), float(rng.uniform(0.8, 1.9)), float(rng.uniform(0.6, 1.8)))
            reach = 0.5 * math.hypot(obj.length, obj.width)
        if _loop_clearance(x, y, side, turn_radius) < 2.0 + reach:
            continue
        (cyls if isinstance(obj, Cylinder) else boxes).append(obj)
        placed += 1
    return SceneSpec(boxes=tuple(boxes), cylinders=tuple(cyls), seed=seed)


# --- spec files -----------------------------------------------------------------


def _kv_lines(path):
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        yield lineno, key, value


def _floats(path, lineno, value, n_min, n_max):
    try:
        vals = [float(v) for v in value.split()]
    except ValueError:
        raise FormatError(f"{path}:{lineno}: non-numeric value {value!r}") from None
    if not n_min <= len(vals) <= n_max:
        raise FormatError(f"{path}:{lineno}: expected {n_min}..{n_max} numbers, got {len(vals)}")
    return vals


def read_scene_spec(path) -> SceneSpec:
    """Parse a scene file.

    Keys: ``seed``, ``ground_z``, ``ground_extent``, ``roughness``, ``preset``
    (``urban`` / ``loop`` / ``box``), and repeatable ``box = x y yaw length
    width height [base]`` and ``cylinder = x y radius height [base]``.
    """
    kw = {}
    boxes, cyls = [], []
    preset = None
    for lineno, key, value in _kv_lines(path):
        if key == "box":
            boxes.append(Box(*_floats(path, lineno, value, 6, 7)))
        elif key == "cylinder":
            cyls.append(Cylinder(*_floats(path, lineno, value, 4, 5)))
        elif key == "seed":
            try:
                kw["seed"] = int(value)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: seed must be an integer") from None
        elif key in ("ground_z", "ground_extent", "roughness"):
            kw[key] = _floats(path, lineno, value, 1, 1)[0]
        elif key == "preset":
            if value not in ("urban", "loop", "box", "empty"):
                raise FormatError(f"{path}:{lineno}: unknown preset {value!r}")
            preset = value
        else:
            raise FormatError(f"{path}:{lineno}: unknown key {key!r}")
    seed = kw.get("seed", 0)
    base = {"urban": urban_scene, "loop": loop_scene, "box": box_scene}.get(preset)
    if base is not None:
        scene = base(seed=seed)
        boxes = list(scene.boxes) + boxes
        cyls = list(scene.cylinders) + cyls
    try:
        return SceneSpec(boxes=tuple(boxes), cylinders=tuple(cyls), **kw)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_scene_spec(scene: SceneSpec, path) -> None:
    lines = [
        f"seed = {scene.seed}",
        f"ground_z = {scene.ground_z!r}",
        f"ground_extent = {scene.ground_extent!r}",
        f"roughness = {scene.roughness!r}",
    ]
    for b in scene.boxes:
        lines.append("box = " + " ".join(repr(float(v)) for v in (b.x, b.y, b.yaw, b.length, b.width, b.height, b.base)))
    for c in scene.cylinders:
        lines.append("cylinder = " + " ".join(repr(float(v)) for v in (c.x, c.y, c.radius, c.height, c.base)))
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass(frozen=True)
class TrajectorySpec:
    kind: str = "line"  # line | square | static
    frames: int = 10
    step: float = 0.5
    heading: float = 0.0
    side: float = 25.0
    turn_radius: float = 5.0
    height: float = 1.7
    start: tuple[float, float] = field(default=(0.0, 0.0))

    def poses(self) -> list[Pose]:
        if self.kind == "line":
            return straight_line(self.frames, self.step, self.heading, self.start, self.height)
        if self.kind == "static":
            return straight_line(self.frames, 0.0, self.heading, self.start, self.height)
        if self.kind == "square":
            return square_loop(self.side, self.step, self.turn_radius, self.height, self.start)
        raise ValueError(f"unknown trajectory kind {self.kind!r}")


def read_trajectory_spec(path) -> TrajectorySpec:
    kw = {}
    for lineno, key, value in _kv_lines(path):
        if key == "kind":
            if value not in ("line", "square", "static"):
                raise FormatError(f"{path}:{lineno}: unknown trajectory kind {value!r}")
            kw[key] = value
        elif key == "frames":
            try:
                kw[key] = int(value)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: frames must be an integer") from None
            if kw[key] < 1:
                raise FormatError(f"{path}:{lineno}: frames must be >= 1")
        elif key in ("step", "heading", "side", "turn_radius", "height"):
            kw[key] = _floats(path, lineno, value, 1, 1)[0]
        elif key == "start":
            kw[key] = tuple(_floats(path, lineno, value, 2, 2))
        else:
            raise FormatError(f"{path}:{lineno}: unknown key {key!r}")
    return TrajectorySpec(**kw)
