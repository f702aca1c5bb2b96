"""Synthetic textured worlds and a ray-casting intensity LiDAR.

Worlds are made of textured quads (each split into two triangles). Textures
are procedural and fixed in world coordinates, evaluated in the metric
``(s, t)`` frame of the quad they belong to, so the same surface patch
always returns the same intensity regardless of viewpoint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .geometry import Se3Pose, quat_from_matrix
from .scan_io import OrganizedScan

TEX_CONSTANT = 0
TEX_BLOCKS = 1
TEX_CHECKER = 2

SCENARIOS = ("corridor", "loop", "slope", "parking")
SCAN_PERIOD = 0.1
SENSOR_HEIGHT = 0.8
INTENSITY_MAX = 500.0


@dataclass(frozen=True)
class Texture:
    kind: int = TEX_BLOCKS
    cell: float = 0.3
    lo: float = 20.0
    hi: float = 480.0
    seed: int = 0


@dataclass(frozen=True)
class Quad:
    origin: tuple
    u: tuple  # edge vectors spanning the quad
    v: tuple
    texture: Texture = Texture()


@dataclass
class World:
    quads: list = field(default_factory=list)
    ambient: float = 5.0

    def add(self, origin, u, v, texture):
        self.quads.append(Quad(tuple(map(float, origin)), tuple(map(float, u)), tuple(map(float, v)), texture))

    def add_box(self, center, size, seed, cell=0.3, top=True):
        """Axis-aligned box without a bottom face; each face gets its own texture seed."""
        c = np.asarray(center, float)
        h = np.asarray(size, float) / 2.0
        x0, y0, z0 = c - h
        sx, sy, sz = 2 * h
        faces = [
            ((x0, y0, z0), (sx, 0, 0), (0, 0, sz)),
            ((x0, y0 + sy, z0), (sx, 0, 0), (0, 0, sz)),
            ((x0, y0, z0), (0, sy, 0), (0, 0, sz)),
            ((x0 + sx, y0, z0), (0, sy, 0), (0, 0, sz)),
        ]
        if top:
            faces.append(((x0, y0, z0 + sz), (sx, 0, 0), (0, sy, 0)))
        for k, (o, u, v) in enumerate(faces):
            self.add(o, u, v, Texture(TEX_BLOCKS, cell, 20.0, 480.0, seed * 16 + k))

    def compile(self):
        """Flat float64 arrays consumed by the ray caster."""
        nq = len(self.quads)
        v0 = np.zeros((2 * nq, 3))
        e1 = np.zeros((2 * nq, 3))
        e2 = np.zeros((2 * nq, 3))
        tri_quad = np.zeros(2 * nq, np.int64)
        q_origin = np.zeros((nq, 3))
        q_u = np.zeros((nq, 3))
        q_v = np.zeros((nq, 3))
        q_tex = np.zeros((nq, 5))
        for i, q in enumerate(self.quads):
            o, u, v = np.array(q.origin), np.array(q.u), np.array(q.v)
            v0[2 * i] = o
            e1[2 * i] = u
            e2[2 * i] = u + v
            v0[2 * i + 1] = o
            e1[2 * i + 1] = u + v
            e2[2 * i + 1] = v
            tri_quad[2 * i : 2 * i + 2] = i
            q_origin[i] = o
            q_u[i] = u / np.linalg.norm(u)
            # texture frame is orthonormal even if the quad is a parallelogram
            vv = v - (v @ q_u[i]) * q_u[i]
            q_v[i] = vv / np.linalg.norm(vv)
            t = q.texture
            q_tex[i] = (t.kind, t.cell, t.lo, t.hi, t.seed)
        return v0, e1, e2, tri_quad, q_origin, q_u, q_v, q_tex

    def triangles(self):
        v0, e1, e2, *_ = self.compile()
        return np.stack([v0, v0 + e1, v0 + e2], axis=1)


@dataclass(frozen=True)
class SensorModel:
    rows: int = 64
    cols: int = 1024
    fov_up: float = 22.5  # degrees
    fov_down: float = -22.5
    range_noise: float = 0.01
    intensity_noise: float = 2.0
    max_range: float = 40.0
    min_range: float = 0.3

    def noiseless(self):
        return SensorModel(self.rows, self.cols, self.fov_up, self.fov_down, 0.0, 0.0, self.max_range, self.min_range)

    def directions(self):
        """Unit beam directions ``(rows, cols, 3)``; row 0 points highest, column azimuth decreases from +pi."""
        el = np.radians(self.fov_up - (np.arange(self.rows) + 0.5) * (self.fov_up - self.fov_down) / self.rows)
        az = math.pi - 2.0 * math.pi * (np.arange(self.cols) + 0.5) / self.cols
        ce = np.cos(el)[:, None]
        d = np.empty((self.rows, self.cols, 3))
        d[..., 0] = ce * np.cos(az)[None, :]
        d[..., 1] = ce * np.sin(az)[None, :]
        d[..., 2] = np.sin(el)[:, None]
        return d


@numba.njit(cache=True)
def _mix(z):
    z = z ^ (z >> np.uint64(30))
    z = z * np.uint64(0xBF58476D1CE4E5B9)
    z = z ^ (z >> np.uint64(27))
    z = z * np.uint64(0x94D049BB133111EB)
    z = z ^ (z >> np.uint64(31))
    return z


@numba.njit(cache=True)
def _hash01(ix, iy, seed):
    z = np.uint64(seed) * np.uint64(0x9E3779B97F4A7C15)
    z = _mix(z ^ np.uint64(ix & 0xFFFFFFFF))
    z = _mix(z ^ (np.uint64(iy & 0xFFFFFFFF) << np.uint64(32)))
    return float(z >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@numba.njit(cache=True)
def _texture(kind, cell, lo, hi, seed, s, t):
    if kind == 0:
        return lo
    ix = int(math.floor(s / cell))
    iy = int(math.floor(t / cell))
    if kind == 2:
        return lo if (ix + iy) % 2 == 0 else hi
    # random blocks with a half-size overlay for extra corners, on top of a
    # coarse layer that gives each patch a dominant brightness direction
    a = _hash01(ix, iy, int(seed))
    jx = int(math.floor(s / (0.5 * cell)))
    jy = int(math.floor(t / (0.5 * cell)))
    b = _hash01(jx, jy, int(seed) + 7919)
    kx = int(math.floor(s / (4.0 * cell)))
    ky = int(math.floor(t / (4.0 * cell)))
    c = _hash01(kx, ky, int(seed) + 104729)
    return lo + (hi - lo) * (0.45 * c + 0.4 * a + 0.15 * b)


@numba.njit(cache=True)
def _trace(origin, dirs, v0, e1, e2, max_range, min_range, out_t, out_tri):
    n = dirs.shape[0]
    m = v0.shape[0]
    for i in range(n):
        dx, dy, dz = dirs[i, 0], dirs[i, 1], dirs[i, 2]
        best = max_range
        bi = -1
        for j in range(m):
            ax, ay, az = e1[j, 0], e1[j, 1], e1[j, 2]
            bx, by, bz = e2[j, 0], e2[j, 1], e2[j, 2]
            px = dy * bz - dz * by
            py = dz * bx - dx * bz
            pz = dx * by - dy * bx
            det = ax * px + ay * py + az * pz
            if abs(det) < 1e-14:
                continue
            inv = 1.0 / det
            tx = origin[0] - v0[j, 0]
            ty = origin[1] - v0[j, 1]
            tz = origin[2] - v0[j, 2]
            u = (tx * px + ty * py + tz * pz) * inv
            if u < 0.0 or u > 1.0:
                continue
            qx = ty * az - tz * ay
            qy = tz * ax - tx * az
            qz = tx * ay - ty * ax
            v = (dx * qx + dy * qy + dz * qz) * inv
            if v < 0.0 or u + v > 1.0:
                continue
            t = (bx * qx + by * qy + bz * qz) * inv
            if t >= min_range and t < best:
                best = t
                bi = j
        out_t[i] = best
        out_tri[i] = bi


@numba.njit(cache=True)
def _shade(points, tri, tri_quad, q_origin, q_u, q_v, q_tex, ambient, out):
    for i in range(points.shape[0]):
        if tri[i] < 0:
            out[i] = 0.0
            continue
        q = tri_quad[tri[i]]
        rx = points[i, 0] - q_origin[q, 0]
        ry = points[i, 1] - q_origin[q, 1]
        rz = points[i, 2] - q_origin[q, 2]
        s = rx * q_u[q, 0] + ry * q_u[q, 1] + rz * q_u[q, 2]
        t = rx * q_v[q, 0] + ry * q_v[q, 1] + rz * q_v[q, 2]
        val = _texture(int(q_tex[q, 0]), q_tex[q, 1], q_tex[q, 2], q_tex[q, 3], int(q_tex[q, 4]), s, t)
        out[i] = max(val, ambient)


@dataclass
class RenderResult:
    """Float64 ray-cast outputs next to the float32 scan built from them."""

    scan: OrganizedScan
    ranges: np.ndarray  # (rows, cols), noise-free, inf where no hit
    points: np.ndarray  # (rows, cols, 3) sensor frame, noise-free
    triangle: np.ndarray  # (rows, cols) hit triangle index or -1


class _Compiled:
    def __init__(self, world):
        self.world = world
        self.arrays = world.compile()


_CACHE = {}


def _compiled(world):
    key = id(world)
    hit = _CACHE.get(key)
    if hit is None or hit.world is not world or len(hit.world.quads) * 2 != len(hit.arrays[0]):
        hit = _Compiled(world)
        _CACHE.clear()
        _CACHE[key] = hit
    return hit.arrays


def render(world, sensor, pose, seed=0, timestamp=0.0):
    """Render one scan with its float64 side outputs."""
    v0, e1, e2, tri_quad, q_origin, q_u, q_v, q_tex = _compiled(world)
    dirs_s = sensor.directions().reshape(-1, 3)
    dirs_w = dirs_s @ pose.R.T
    n = len(dirs_s)
    t = np.empty(n)
    tri = np.empty(n, np.int64)
    if len(v0):
        _trace(pose.t.astype(np.float64), np.ascontiguousarray(dirs_w), v0, e1, e2, sensor.max_range, sensor.min_range, t, tri)
    else:
        t[:] = sensor.max_range
        tri[:] = -1
    hit = tri >= 0
    t[~hit] = np.inf
    pts_s = np.where(hit[:, None], dirs_s * np.where(hit, t, 0.0)[:, None], 0.0)
    pts_w = pose.t + dirs_w * np.where(hit, t, 0.0)[:, None]
    inten = np.zeros(n)
    _shade(pts_w, tri, tri_quad, q_origin, q_u, q_v, q_tex, world.ambient, inten)
    rng = np.random.default_rng(seed)
    noisy_t = t.copy()
    noisy_i = inten.copy()
    if sensor.range_noise > 0:
        noisy_t[hit] += rng.normal(0.0, sensor.range_noise, int(hit.sum()))
    if sensor.intensity_noise > 0:
        noisy_i[hit] += rng.normal(0.0, sensor.intensity_noise, int(hit.sum()))
    noisy_i = np.clip(noisy_i, 0.0, None)
    valid = hit & (noisy_t > 0)
    xyz = np.where(valid[:, None], dirs_s * np.where(valid, noisy_t, 0.0)[:, None], 0.0)
    shape = (sensor.rows, sensor.cols)
    scan = OrganizedScan(xyz.reshape(shape + (3,)), noisy_i.reshape(shape), valid.reshape(shape), timestamp)
    return RenderResult(scan, t.reshape(shape), pts_s.reshape(shape + (3,)), tri.reshape(shape))


def render_scan(world, sensor, pose, seed=0, timestamp=0.0):
    return render(world, sensor, pose, seed, timestamp).scan


# ---------------------------------------------------------------- scenarios


def _floor(world, x0, x1, y0, y1, z, seed, cell=0.5):
    world.add((x0, y0, z), (x1 - x0, 0, 0), (0, y1 - y0, 0), Texture(TEX_BLOCKS, cell, 20.0, 480.0, seed))


def corridor_world(half_width=2.0, height=3.0, x_range=(-60.0, 70.0)):
    """Two parallel textured walls, floor and ceiling; no end walls within sensor range."""
    w = World()
    x0, x1 = x_range
    z0 = -SENSOR_HEIGHT
    _floor(w, x0, x1, -half_width, half_width, z0, 101)
    w.add((x0, -half_width, z0), (x1 - x0, 0, 0), (0, 0, height), Texture(TEX_BLOCKS, 0.3, 20.0, 480.0, 102))
    w.add((x0, half_width, z0), (x1 - x0, 0, 0), (0, 0, height), Texture(TEX_BLOCKS, 0.3, 20.0, 480.0, 103))
    w.add((x0, -half_width, z0 + height), (x1 - x0, 0, 0), (0, 2 * half_width, 0), Texture(TEX_BLOCKS, 0.5, 20.0, 480.0, 104))
    return w


def _rounded_rect(a, b, r):
    """Arc-length parametrized closed path: straights of length ``a`` (along x) and ``b``, corner radius ``r``."""
    segs = []
    hx, hy = a / 2.0, b / 2.0
    # start at the middle of the bottom straight heading +x, counter-clockwise
    segs.append(("line", np.array([0.0, -hy - r]), 0.0, hx))
    segs.append(("arc", np.array([hx, -hy]), -math.pi / 2, math.pi / 2 * r))
    segs.append(("line", np.array([hx + r, -hy]), math.pi / 2, b))
    segs.append(("arc", np.array([hx, hy]), 0.0, math.pi / 2 * r))
    segs.append(("line", np.array([hx, hy + r]), math.pi, a))
    segs.append(("arc", np.array([-hx, hy]), math.pi / 2, math.pi / 2 * r))
    segs.append(("line", np.array([-hx - r, hy]), -math.pi / 2, b))
    segs.append(("arc", np.array([-hx, -hy]), math.pi, math.pi / 2 * r))
    segs.append(("line", np.array([-hx, -hy - r]), 0.0, hx))
    total = sum(s[3] for s in segs)

    def at(s):
        s = s % total
        for kind, p, ang, length in segs:
            if s <= length + 1e-12:
                if kind == "line":
                    pos = p + s * np.array([math.cos(ang), math.sin(ang)])
                    return pos, ang
                phi = ang + s / r
                pos = p + r * np.array([math.cos(phi), math.sin(phi)])
                return pos, phi + math.pi / 2
            s -= length
        kind, p, ang, length = segs[-1]
        return p + length * np.array([math.cos(ang), math.sin(ang)]), ang

    return at, total


LOOP_CORNER_RADIUS = 2.0
LOOP_CLEARANCE = 3.0
LOOP_OUTER_MARGIN = 4.0


def _loop_dims(perimeter):
    r = LOOP_CORNER_RADIUS
    a = max((perimeter - 2.0 * math.pi * r) / 3.0, 4.0)
    return a, a / 2.0, r


def loop_world(perimeter):
    a, b, r = _loop_dims(perimeter)
    hx, hy = a / 2 + r, b / 2 + r
    w = World()
    z0 = -SENSOR_HEIGHT
    ox, oy = hx + LOOP_OUTER_MARGIN, hy + LOOP_OUTER_MARGIN
    _floor(w, -ox, ox, -oy, oy, z0, 201)
    bx, by = max(hx - LOOP_CLEARANCE, 0.5), max(hy - LOOP_CLEARANCE, 0.5)
    w.add_box((0.0, 0.0, z0 + 2.0), (2 * bx, 2 * by, 4.0), seed=21, cell=0.3)
    wall_h = 6.0
    texs = [Texture(TEX_BLOCKS, 0.3, 20.0, 480.0, 210 + k) for k in range(4)]
    w.add((-ox, -oy, z0), (2 * ox, 0, 0), (0, 0, wall_h), texs[0])
    w.add((-ox, oy, z0), (2 * ox, 0, 0), (0, 0, wall_h), texs[1])
    w.add((-ox, -oy, z0), (0, 2 * oy, 0), (0, 0, wall_h), texs[2])
    w.add((ox, -oy, z0), (0, 2 * oy, 0), (0, 0, wall_h), texs[3])
    # a few pillars break the rectangular symmetry
    rng = np.random.default_rng(22)
    for k in range(6):
        side = k % 4
        s = rng.uniform(-0.8, 0.8)
        if side == 0:
            c = (s * ox, -oy + 1.0)
        elif side == 1:
            c = (s * ox, oy - 1.0)
        elif side == 2:
            c = (-ox + 1.0, s * oy)
        else:
            c = (ox - 1.0, s * oy)
        w.add_box((c[0], c[1], z0 + 1.5), (0.8, 0.8, 3.0), seed=30 + k, cell=0.2)
    return w


def slope_world(angle_deg=12.0, length=80.0, half_width=4.0):
    """Textured ground inclined about the y axis, bordered by two walls."""
    w = World()
    th = math.radians(angle_deg)
    d = np.array([math.cos(th), 0.0, math.sin(th)])
    x0 = -20.0
    o = np.array([x0 * math.cos(th), -half_width, x0 * math.sin(th) - SENSOR_HEIGHT / math.cos(th)])
    w.add(o, d * length, (0, 2 * half_width, 0), Texture(TEX_BLOCKS, 0.5, 20.0, 480.0, 301))
    for k, y in enumerate((-half_width, half_width)):
        oo = o.copy()
        oo[1] = y
        w.add(oo - np.array([0, 0, 1.0]), d * length, (0, 0, 5.0), Texture(TEX_BLOCKS, 0.3, 20.0, 480.0, 302 + k))
    return w, th


def parking_world(seed=7, half_size=20.0, n_boxes=18):
    """Flat ground, scattered car-sized boxes, perimeter walls."""
    w = World()
    z0 = -SENSOR_HEIGHT
    _floor(w, -half_size, half_size, -half_size, half_size, z0, 401)
    h = 10.0
    for k, (o, u) in enumerate(
        [
            ((-half_size, -half_size, z0), (2 * half_size, 0, 0)),
            ((-half_size, half_size, z0), (2 * half_size, 0, 0)),
            ((-half_size, -half_size, z0), (0, 2 * half_size, 0)),
            ((half_size, -half_size, z0), (0, 2 * half_size, 0)),
        ]
    ):
        w.add(o, u, (0, 0, h), Texture(TEX_BLOCKS, 0.4, 20.0, 480.0, 410 + k))
    rng = np.random.default_rng(seed)
    placed = 0
    while placed < n_boxes:
        cx, cy = rng.uniform(-half_size + 3, half_size - 3, 2)
        if abs(cy) < 3.0:  # keep the driving lane clear
            continue
        sx, sy = (4.5, 1.9) if rng.random() < 0.5 else (1.9, 4.5)
        w.add_box((cx, cy, z0 + 0.75), (sx, sy, 1.5), seed=50 + placed, cell=0.25)
        placed += 1
    return w


def _pose_xy_yaw(x, y, z, yaw, pitch=0.0):
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    Rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1.0]])
    Ry = np.array([[cp, 0, sp], [0, 1.0, 0], [-sp, 0, cp]])
    return Se3Pose(quat_from_matrix(Rz @ Ry), (x, y, z))


def scenario(name, steps, step_size):
    """World and ground-truth sensor poses for a named scenario."""
    if steps < 2:
        raise ValueError("steps must be >= 2")
    if name == "corridor":
        world = corridor_world()
        poses = [_pose_xy_yaw(k * step_size, 0.0, 0.0, 0.0) for k in range(steps)]
    elif name == "loop":
        perimeter = step_size * (steps - 1)
        world = loop_world(perimeter)
        at, total = _rounded_rect(*_loop_dims(perimeter))
        poses = []
        for k in range(steps):
            s = total * k / (steps - 1)
            if k == steps - 1:
                s = 0.0
            (x, y), yaw = at(s)
            poses.append(_pose_xy_yaw(x, y, 0.0, yaw))
    elif name == "slope":
        world, th = slope_world()
        poses = []
        for k in range(steps):
            s = k * step_size
            poses.append(_pose_xy_yaw(s * math.cos(th), 0.0, s * math.sin(th), 0.0, pitch=-th))
    elif name == "parking":
        world = parking_world()
        poses = []
        start = -0.4 * 20.0
        for k in range(steps):
            s = k * step_size
            x = start + s
            y = 0.6 * math.sin(0.15 * s)
            yaw = math.atan(0.6 * 0.15 * math.cos(0.15 * s))
            poses.append(_pose_xy_yaw(x, y, 0.0, yaw))
    else:
        raise ValueError(f"unknown scenario {name!r}; expected one of {SCENARIOS}")
    return world, poses


def make_sequence(name, steps, step_size, sensor=None, seed=0):
    """Rendered scans plus ground truth ``[(timestamp, pose)]``."""
    sensor = sensor or SensorModel()
    world, poses = scenario(name, steps, step_size)
    scans, truth = [], []
    for k, pose in enumerate(poses):
        ts = k * SCAN_PERIOD
        scans.append(render_scan(world, sensor, pose, seed=seed * 100003 + k, timestamp=ts))
        truth.append((ts, pose))
    return scans, truth


def write_sequence(out_dir, scans, truth):
    """Scan files ``000000.scan ...`` and ``ground_truth.txt`` into ``out_dir``."""
    from pathlib import Path

    from .scan_io import TrajectoryRecord, write_scan, write_trajectory

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for k, s in enumerate(scans):
        write_scan(s, out / f"{k:06d}.scan")
    write_trajectory([TrajectoryRecord(ts, p) for ts, p in truth], out / "ground_truth.txt")
    return out
