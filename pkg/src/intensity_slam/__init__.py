"""LiDAR SLAM driven by features on intensity images.

Intensity odometry seeds a sliding-window scan-to-map optimizer; keyframes
feed a pose graph closed by bag-of-words place recognition.
"""

from .config import Config, load_config
from .errors import SlamError
from .evaluation import ape
from .geometry import Se3Pose
from .pipeline import Pipeline, run_sequence
from .scan_io import OrganizedScan, TrajectoryRecord, read_scan, read_trajectory, write_scan, write_trajectory

__version__ = "0.1.0"

__all__ = [
    "Config",
    "OrganizedScan",
    "Pipeline",
    "Se3Pose",
    "SlamError",
    "TrajectoryRecord",
    "ape",
    "load_config",
    "read_scan",
    "read_trajectory",
    "run_sequence",
    "write_scan",
    "write_trajectory",
]
