"""Metric measurements on the calibrated road plane (``Z = 0``)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from .errors import MissingGroundTruth
from .geometry import CameraParams, ImageSize, back_project_to_plane


def ground_point(p, params: CameraParams, image_size: ImageSize) -> np.ndarray:
    return back_project_to_plane(p, params, image_size, 0.0)


def ground_distance(p1, p2, params: CameraParams, image_size: ImageSize) -> float:
    """Road-surface distance in metres between the points seen at pixels ``p1`` and ``p2``."""
    if np.array_equal(np.asarray(p1, float), np.asarray(p2, float)):
        return 0.0
    a = ground_point(p1, params, image_size)
    b = ground_point(p2, params, image_size)
    return float(np.linalg.norm(a - b))


def polyline_length(points, params: CameraParams, image_size: ImageSize) -> float:
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) < 2:
        raise ValueError("a polyline needs at least 2 points")
    return float(sum(ground_distance(pts[k], pts[k + 1], params, image_size) for k in range(len(pts) - 1)))


@dataclass
class GroundSegmentSet:
    """Marking points grouped into lines; segments join consecutive points within a line."""

    lines: List[np.ndarray]
    true_length_m: Optional[float] = None

    def __post_init__(self):
        self.lines = [np.asarray(l, dtype=float).reshape(-1, 2) for l in self.lines]
        for k, line in enumerate(self.lines):
            if len(line) < 2:
                raise ValueError(f"marking line {k} needs at least 2 points")
            if np.any(np.all(np.diff(line, axis=0) == 0, axis=1)):
                raise ValueError(f"marking line {k} has repeated consecutive points")

    def segments(self):
        for line in self.lines:
            for k in range(len(line) - 1):
                yield line[k], line[k + 1]

    @property
    def n_segments(self) -> int:
        return sum(len(l) - 1 for l in self.lines)

    def reversed(self) -> "GroundSegmentSet":
        return GroundSegmentSet([l[::-1] for l in self.lines[::-1]], self.true_length_m)


class ErrorMetrics(NamedTuple):
    rmse: float
    mae: float
    mape: float  # percent


def length_errors(estimated: Sequence[float], true_length: float) -> ErrorMetrics:
    est = np.asarray(estimated, dtype=float)
    err = est - true_length
    return ErrorMetrics(
        float(np.sqrt(np.mean(err**2))), float(np.mean(np.abs(err))), float(100.0 * np.mean(np.abs(err)) / true_length)
    )


def segment_lengths(segments: GroundSegmentSet, params: CameraParams, image_size: ImageSize) -> np.ndarray:
    return np.array([ground_distance(a, b, params, image_size) for a, b in segments.segments()])


def evaluate_markings(segments: GroundSegmentSet, params: CameraParams, image_size: ImageSize) -> ErrorMetrics:
    """RMSE, MAE (metres) and MAPE (%) of every segment against the common true length."""
    if segments.true_length_m is None:
        raise MissingGroundTruth("marking set has no true segment length")
    return length_errors(segment_lengths(segments, params, image_size), segments.true_length_m)


def lane_length(centerline, params: CameraParams, image_size: ImageSize) -> float:
    """Ground length of a lane's image-space centreline."""
    return polyline_length(centerline, params, image_size)
