"""Organized scan container, binary scan files, trajectory text files.

Scan file layout (little endian)::

    b"OSCN" | u32 version=1 | u32 rows | u32 cols | f64 timestamp
    rows*cols records, row-major: f32 x, f32 y, f32 z, f32 intensity, u8 valid
"""

from __future__ import annotations

import math
import queue
import struct
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInput
from .geometry import Se3Pose

MAGIC = b"OSCN"
VERSION = 1
_HEADER = struct.Struct("<4sIIId")
_RECORD = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("i", "<f4"), ("v", "u1")])


@dataclass(eq=False)
class OrganizedScan:
    """One sensor revolution on its ring x azimuth grid.

    ``xyz`` is ``(rows, cols, 3)`` float32, ``intensity`` ``(rows, cols)``
    float32, ``valid`` ``(rows, cols)`` bool. Invalid cells are zeroed on
    construction.
    """

    xyz: np.ndarray
    intensity: np.ndarray
    valid: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        self.xyz = np.ascontiguousarray(self.xyz, dtype=np.float32)
        self.intensity = np.ascontiguousarray(self.intensity, dtype=np.float32)
        self.valid = np.ascontiguousarray(self.valid, dtype=bool)
        if self.xyz.ndim != 3 or self.xyz.shape[2] != 3:
            raise InvalidInput(f"xyz must be (rows, cols, 3), got {self.xyz.shape}")
        if self.intensity.shape != self.xyz.shape[:2] or self.valid.shape != self.xyz.shape[:2]:
            raise InvalidInput("xyz, intensity and valid grids disagree in shape")
        self.timestamp = float(self.timestamp)
        bad = self.valid & ~(np.isfinite(self.xyz).all(axis=2) & np.isfinite(self.intensity))
        if bad.any():
            raise InvalidInput(f"{int(bad.sum())} valid cells carry non-finite values")
        if (self.intensity[self.valid] < 0).any():
            raise InvalidInput("valid cells must have nonnegative intensity")
        inv = ~self.valid
        if inv.any():
            self.xyz[inv] = 0.0
            self.intensity[inv] = 0.0

    @property
    def rows(self):
        return self.xyz.shape[0]

    @property
    def cols(self):
        return self.xyz.shape[1]

    @property
    def num_valid(self):
        return int(self.valid.sum())

    @classmethod
    def empty(cls, rows, cols, timestamp=0.0):
        return cls(
            np.zeros((rows, cols, 3), np.float32),
            np.zeros((rows, cols), np.float32),
            np.zeros((rows, cols), bool),
            timestamp,
        )

    def valid_points(self):
        return self.xyz[self.valid].astype(np.float64)

    def same_as(self, other):
        return (
            self.timestamp == other.timestamp
            and np.array_equal(self.valid, other.valid)
            and self.xyz.tobytes() == other.xyz.tobytes()
            and self.intensity.tobytes() == other.intensity.tobytes()
        )


def write_scan(scan, path):
    rec = np.empty(scan.rows * scan.cols, dtype=_RECORD)
    flat = scan.xyz.reshape(-1, 3)
    rec["x"], rec["y"], rec["z"] = flat[:, 0], flat[:, 1], flat[:, 2]
    rec["i"] = scan.intensity.reshape(-1)
    rec["v"] = scan.valid.reshape(-1)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, scan.rows, scan.cols, scan.timestamp))
        fh.write(rec.tobytes())


def read_scan(path):
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than header")
    magic, version, rows, cols, stamp = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if rows == 0 or cols == 0:
        raise FormatError(f"{path}: empty grid {rows}x{cols}")
    expected = _HEADER.size + rows * cols * _RECORD.itemsize
    if len(data) != expected:
        raise FormatError(f"{path}: payload has {len(data)} bytes, header implies {expected}")
    rec = np.frombuffer(data, dtype=_RECORD, offset=_HEADER.size)
    xyz = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).reshape(rows, cols, 3)
    valid = (rec["v"] != 0).reshape(rows, cols)
    # a zero-range return is no return
    valid &= np.any(xyz != 0.0, axis=2)
    try:
        return OrganizedScan(xyz.copy(), rec["i"].reshape(rows, cols).copy(), valid, stamp)
    except InvalidInput as exc:
        raise FormatError(f"{path}: {exc}") from None


def list_scans(scans_dir):
    return sorted(p for p in Path(scans_dir).iterdir() if p.suffix == ".scan")


def iter_scans(paths, prefetch=True):
    """Yield scans in the given order, optionally reading one ahead in a thread."""
    paths = list(paths)
    if not prefetch or len(paths) < 2:
        for p in paths:
            yield read_scan(p)
        return
    q = queue.Queue(maxsize=2)
    done = object()

    def worker():
        try:
            for p in paths:
                q.put(read_scan(p))
        except BaseException as exc:  # surfaced in the consumer
            q.put(exc)
        q.put(done)

    threading.Thread(target=worker, daemon=True).start()
    while True:
        item = q.get()
        if item is done:
            return
        if isinstance(item, BaseException):
            raise item
        yield item


@dataclass
class TrajectoryRecord:
    timestamp: float
    pose: Se3Pose


def _num(v):
    s = f"{v:.9g}"
    return "0" if s == "-0" else s


def format_record(rec):
    q = rec.pose.quaternion
    t = rec.pose.t
    vals = [_num(v) for v in (*t, *q)]
    return f"{rec.timestamp:.9f} " + " ".join(vals)


def write_trajectory(records, path):
    records = list(records)
    for a, b in zip(records, records[1:]):
        if not b.timestamp > a.timestamp:
            raise InvalidInput(f"trajectory timestamps not increasing at {b.timestamp}")
    text = "".join(format_record(r) + "\n" for r in records)
    Path(path).write_text(text, encoding="utf-8")


def read_trajectory(path):
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise FormatError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
        v = [float(p) for p in parts]
        out.append(TrajectoryRecord(v[0], Se3Pose(v[4:8], v[1:4])))
    return out


def convert_ascii(path, rows, cols, timestamp=0.0):
    """Grid an ASCII ``x y z intensity ring`` cloud onto ``rows x cols`` cells.

    Column index follows the azimuth convention of the simulator
    (column 0 looks backwards, the center column looks along +x, azimuth
    decreases left to right). When two returns share a cell the nearer wins.
    """
    data = np.loadtxt(path, ndmin=2)
    if data.shape[1] < 5:
        raise FormatError(f"{path}: expected columns x y z intensity ring")
    x, y, z, inten, ring = data[:, 0], data[:, 1], data[:, 2], data[:, 3], data[:, 4].astype(int)
    az = np.arctan2(y, x)
    col = np.floor((math.pi - az) / (2 * math.pi) * cols).astype(int) % cols
    rng = np.sqrt(x * x + y * y + z * z)
    keep = (ring >= 0) & (ring < rows) & (rng > 0) & np.isfinite(rng)
    order = np.argsort(-rng[keep], kind="stable")  # far first, near overwrites
    idx = np.flatnonzero(keep)[order]
    scan = OrganizedScan.empty(rows, cols, timestamp)
    xyz = scan.xyz
    xyz[ring[idx], col[idx]] = np.stack([x[idx], y[idx], z[idx]], axis=1)
    inten_grid = scan.intensity
    inten_grid[ring[idx], col[idx]] = np.maximum(inten[idx], 0.0)
    valid = np.zeros((rows, cols), bool)
    valid[ring[idx], col[idx]] = True
    return OrganizedScan(xyz, inten_grid, valid, timestamp)
