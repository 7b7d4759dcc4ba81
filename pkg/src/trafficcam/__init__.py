"""Traffic camera calibration from vehicle keypoints and lane density estimation."""

from .geometry import CameraParams, Rotation, back_project_to_plane, project
from .mvcalib import CalibResult, MVCalibConfig, calibrate

__version__ = "0.1.0"

__all__ = ["CameraParams", "Rotation", "project", "back_project_to_plane", "calibrate", "CalibResult", "MVCalibConfig"]
