"""Run configuration: typed defaults plus a ``key = value`` file loader."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class Config:
    # front end
    feature_cap: int = 200
    fast_threshold: int = 20
    max_hamming: int = 64
    match_ratio: float = 0.8
    min_matches: int = 8
    intensity_cap: float = 512.0
    row_gain_equalization: bool = False
    # map optimization
    ba_window: int = 5
    local_map_radius: float = 100.0
    huber_delta: float = 0.1
    plane_per_sector: int = 20
    ground_voxel: float = 0.4
    height_prior: float = -0.8
    ransac_iterations: int = 100
    ransac_seed: int = 42
    # pose graph / loops
    kf_dist: float = 1.0
    kf_angle: float = 0.2
    kf_min_matches: int = 50
    loop_gap: int = 50
    loop_sim_threshold: float = 0.15
    loop_min_inliers: int = 25
    loop_max_residual: float = 0.3
    vocabulary: str = ""
    vocab_branching: int = 10
    vocab_depth: int = 3
    # stage switches (ablations)
    use_intensity_odometry: bool = True
    use_ba: bool = True
    use_map_optimization: bool = True
    use_loop_closure: bool = True
    # synthetic odometry drift (body frame, per meter travelled) injected between mapping and the pose graph
    drift_translation_rate: float = 0.0
    drift_yaw_rate: float = 0.0

    def validate(self):
        positive = (
            "feature_cap", "fast_threshold", "max_hamming", "match_ratio", "min_matches",
            "intensity_cap", "ba_window", "local_map_radius", "huber_delta",
            "plane_per_sector", "ground_voxel", "ransac_iterations", "kf_dist", "kf_angle",
            "kf_min_matches", "loop_gap", "loop_sim_threshold", "loop_min_inliers",
            "loop_max_residual", "vocab_branching", "vocab_depth",
        )
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive", key=name)
        if self.feature_cap < self.min_matches:
            raise ConfigError("feature_cap must be >= min_matches", key="feature_cap")
        if self.match_ratio > 1.0:
            raise ConfigError("match_ratio must be <= 1", key="match_ratio")
        return self

    def replace(self, **changes):
        return dataclasses.replace(self, **changes).validate()


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(kind, raw):
    if kind == "bool":
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_config(text, source="<string>"):
    types = {f.name: f.type for f in fields(Config)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'", line=lineno)
        key, raw = (s.strip() for s in body.split("=", 1))
        if key not in types:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}", key=key, line=lineno)
        try:
            values[key] = _coerce(types[key], raw)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}", key=key, line=lineno) from None
    try:
        return Config(**values).validate()
    except ConfigError as exc:
        if exc.key is not None and exc.line is None:
            raise ConfigError(f"{source}: {exc}", key=exc.key) from None
        raise


def load_config(path):
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), source=str(path))
