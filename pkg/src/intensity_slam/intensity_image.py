"""8-bit intensity images from organized scans, with pixel -> point lookup."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidInput, InvalidParam, NoReturn


@dataclass(frozen=True)
class NormalizationParams:
    cap: float = 512.0
    row_gain_equalization: bool = False


@dataclass(eq=False)
class IntensityImage:
    pixels: np.ndarray  # (rows, cols) uint8
    index_map: np.ndarray  # (rows, cols) int64 flat scan-cell index, -1 when empty

    @property
    def rows(self):
        return self.pixels.shape[0]

    @property
    def cols(self):
        return self.pixels.shape[1]


def _equalize_rows(intensity, valid):
    out = intensity.astype(np.float64)
    vals = intensity[valid]
    if vals.size == 0:
        return out
    ref = float(np.median(vals))
    for r in range(intensity.shape[0]):
        row = intensity[r][valid[r]]
        if row.size:
            m = float(np.median(row))
            if m > 0:
                out[r] *= ref / m
    return out


def project(scan, params=NormalizationParams()):
    """Linear fixed-cap normalization: ``round(255 * clamp(i, 0, cap) / cap)``."""
    if not params.cap > 0:
        raise InvalidParam(f"intensity cap must be positive, got {params.cap}")
    inten = scan.intensity.astype(np.float64)
    if params.row_gain_equalization:
        inten = _equalize_rows(scan.intensity, scan.valid)
    scaled = 255.0 * np.clip(inten, 0.0, params.cap) / params.cap
    pixels = np.floor(scaled + 0.5).astype(np.uint8)
    pixels[~scan.valid] = 0
    index_map = np.where(scan.valid, np.arange(scan.valid.size).reshape(scan.valid.shape), -1)
    return IntensityImage(pixels, index_map)


def lookup_point(img, scan, pixel):
    r, c = pixel
    if not (0 <= r < img.rows and 0 <= c < img.cols):
        raise InvalidInput(f"pixel {pixel} outside {img.rows}x{img.cols} image")
    idx = img.index_map[r, c]
    if idx < 0:
        raise NoReturn(f"pixel {pixel} has no valid return")
    rr, cc = divmod(int(idx), scan.cols)
    return scan.xyz[rr, cc].astype(np.float64)


def write_pgm(img, path):
    header = f"P5\n{img.cols} {img.rows}\n255\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(img.pixels, dtype=np.uint8).tobytes())


def read_pgm(path):
    data = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None or int(m.group(3)) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = int(m.group(1)), int(m.group(2))
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=m.end()).reshape(h, w)
