"""Synthetic road scenes with known camera geometry.

World frame: X across the road, Y along the road away from the camera, Z up,
road surface at ``Z = 0``. The camera sits above the road looking down the
road. Only geometry is produced; no pixels are rendered.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from shapely.geometry import Point, Polygon

from .detection import BoundingBox, LaneGeometry
from .errors import PlacementFailure
from .geometry import CameraParams, ImageSize, Rotation, back_project_to_plane, look_at, project
from .vehicles import KEYPOINT_NAMES, VehicleAnnotation, VehicleModel, model_library


@dataclass
class CameraRanges:
    f: Tuple[float, float] = (200.0, 800.0)
    height_m: Tuple[float, float] = (4.0, 12.0)
    pitch_deg: Tuple[float, float] = (10.0, 45.0)
    yaw_deg: Tuple[float, float] = (-10.0, 10.0)  # camera heading relative to the road


@dataclass
class SceneConfig:
    image_size: ImageSize = (320, 240)
    camera: CameraRanges = field(default_factory=CameraRanges)
    vehicle_yaw_deg: float = 2.0  # vehicles follow their lane within this heading jitter
    lane_width_m: float = 3.5
    n_lanes: int = 3
    marking_lines: int = 2
    points_per_line: int = 7
    segment_m: float = 6.0
    min_vehicle_px: float = 40.0  # smallest bounding diagonal on which 8 keypoints are still annotatable
    min_visible_keypoints: int = 6
    vehicles_face_camera: bool = True
    max_camera_tries: int = 200
    max_vehicle_tries: int = 400


@dataclass(frozen=True)
class Placement:
    index: int
    model_index: int
    model_name: str
    position: np.ndarray  # ground (X, Y)
    heading: float  # radians, direction of the vehicle's +Y axis measured from world +Y toward +X
    world_keypoints: Dict[str, np.ndarray]


@dataclass(frozen=True)
class SyntheticLane:
    lane_id: int
    ground_polygon: np.ndarray  # (4, 3) world corners
    image_polygon: np.ndarray  # (4, 2)
    centerline_world: np.ndarray  # (2, 3)
    centerline_image: np.ndarray  # (2, 2)
    length_m: float


@dataclass
class Scene:
    seed: int
    image_size: ImageSize
    params: CameraParams
    annotations: List[VehicleAnnotation]
    placements: List[Placement]
    marking_lines_image: List[np.ndarray]
    marking_lines_world: List[np.ndarray]
    lanes: List[SyntheticLane]
    models: List[VehicleModel]
    noise_px: float


def heading_rotation(heading: float) -> np.ndarray:
    """Rotation about Z taking the model's +Y axis to the given heading."""
    c, s = math.cos(heading), math.sin(heading)
    return np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])


def _in_frame(uv: np.ndarray, image_size: ImageSize, margin: float = 0.0) -> np.ndarray:
    w, h = image_size
    return (uv[:, 0] >= margin) & (uv[:, 0] <= w - margin) & (uv[:, 1] >= margin) & (uv[:, 1] <= h - margin)


def _safe_project(P: np.ndarray, params: CameraParams, image_size: ImageSize):
    cam = P @ params.R.T + params.T
    front = cam[:, 2] > 1e-6
    uv = np.full((len(P), 2), np.nan)
    if front.any():
        uv[front] = project(P[front], params, image_size)
    return uv, front


def sample_camera(rng: np.random.Generator, ranges: CameraRanges) -> CameraParams:
    f = rng.uniform(*ranges.f)
    height = rng.uniform(*ranges.height_m)
    pitch = math.radians(rng.uniform(*ranges.pitch_deg))
    yaw = math.radians(rng.uniform(*ranges.yaw_deg))
    center = np.array([0.0, 0.0, height])
    forward = np.array([math.sin(yaw) * math.cos(pitch), math.cos(yaw) * math.cos(pitch), -math.sin(pitch)])
    R = look_at(center, center + forward)
    return CameraParams(f, Rotation.from_matrix(R), -R @ center)


def _place_markings(rng, params, cfg: SceneConfig):
    """Marking lines along the road; returns world lines or None if they cannot all be seen."""
    w, h = cfg.image_size
    try:
        gc = back_project_to_plane((w / 2.0, h / 2.0), params, cfg.image_size)
    except Exception:
        return None
    offsets = (np.arange(cfg.marking_lines) - (cfg.marking_lines - 1) / 2.0) * cfg.lane_width_m
    span = cfg.segment_m * (cfg.points_per_line - 1)
    starts = np.linspace(gc[1] - span * 1.5, gc[1] + span * 0.5, 81)
    ok_starts = []
    for y0 in starts:
        lines = [
            np.column_stack([np.full(cfg.points_per_line, gc[0] + dx), y0 + cfg.segment_m * np.arange(cfg.points_per_line),
                             np.zeros(cfg.points_per_line)])
            for dx in offsets
        ]
        allpts = np.vstack(lines)
        uv, front = _safe_project(allpts, params, cfg.image_size)
        if front.all() and _in_frame(uv, cfg.image_size, 2.0).all():
            ok_starts.append(lines)
    if not ok_starts:
        return None
    return ok_starts[int(rng.integers(len(ok_starts)))], gc[0]


def _lanes(params, cfg: SceneConfig, x_mid: float, y0: float, y1: float) -> List[SyntheticLane]:
    first = x_mid - cfg.n_lanes * cfg.lane_width_m / 2.0
    lanes = []
    for k in range(cfg.n_lanes):
        xa, xb = first + k * cfg.lane_width_m, first + (k + 1) * cfg.lane_width_m
        corners = np.array([[xa, y0, 0.0], [xb, y0, 0.0], [xb, y1, 0.0], [xa, y1, 0.0]])
        center = np.array([[(xa + xb) / 2.0, y0, 0.0], [(xa + xb) / 2.0, y1, 0.0]])
        lanes.append(SyntheticLane(k + 1, corners, project(corners, params, cfg.image_size), center,
                                   project(center, params, cfg.image_size), y1 - y0))
    return lanes


def generate_scene(
    seed: int,
    n_vehicles: int,
    models: Optional[Sequence[VehicleModel]] = None,
    noise_px: float = 0.0,
    config: Optional[SceneConfig] = None,
) -> Scene:
    """Sample a camera, road markings, lanes and ``n_vehicles`` annotated vehicles.

    Vehicles stand on the road without overlapping; keypoints that fall outside
    the frame are dropped. Raises ``PlacementFailure`` after bounded retries.
    """
    if n_vehicles < 1:
        raise ValueError("n_vehicles must be >= 1")
    cfg = config or SceneConfig()
    models = list(models) if models is not None else model_library()
    rng = np.random.default_rng(seed)
    w, h = cfg.image_size

    for _ in range(cfg.max_camera_tries):
        params = sample_camera(rng, cfg.camera)
        placed = _place_markings(rng, params, cfg)
        if placed is None:
            continue
        lines_world, x_mid = placed
        y0 = lines_world[0][0, 1]
        y1 = lines_world[0][-1, 1]
        vehicles = _place_vehicles(rng, params, models, n_vehicles, cfg, x_mid)
        if vehicles is not None:
            break
    else:
        raise PlacementFailure(f"could not build a scene with {n_vehicles} visible vehicles")

    placements, annotations = [], []
    for idx, (j, pos, heading, world_kp, uv) in enumerate(vehicles):
        placements.append(Placement(idx, j, models[j].name, pos, heading, world_kp))
        noisy = uv + rng.normal(0.0, noise_px, uv.shape) if noise_px > 0 else uv
        visible = {n: noisy[k] for k, n in enumerate(KEYPOINT_NAMES) if _in_frame(uv[k : k + 1], cfg.image_size)[0]}
        annotations.append(VehicleAnnotation(idx, visible))

    lines_image = [project(line, params, cfg.image_size) for line in lines_world]
    lanes = _lanes(params, cfg, x_mid, y0, y1)
    return Scene(seed, cfg.image_size, params, annotations, placements, lines_image, lines_world, lanes, models, noise_px)


def _visible_road_span(params, cfg: SceneConfig, x_mid: float) -> Tuple[float, float]:
    """Range of ground Y covered by the image along the road centre."""
    w, h = cfg.image_size
    near = back_project_to_plane((w / 2.0, h), params, cfg.image_size)[1]
    try:
        far = back_project_to_plane((w / 2.0, 0.1 * h), params, cfg.image_size)[1]
    except Exception:  # row above the horizon
        far = near + 80.0
    return near - 2.0, min(far, near + 80.0)


def _place_vehicles(rng, params, models, n_vehicles, cfg: SceneConfig, x_mid: float):
    y_lo, y_hi = _visible_road_span(params, cfg, x_mid)
    first = x_mid - cfg.n_lanes * cfg.lane_width_m / 2.0
    out, footprints = [], []
    base = math.pi if cfg.vehicles_face_camera else 0.0
    for _ in range(cfg.max_vehicle_tries):
        if len(out) == n_vehicles:
            return out
        j = int(rng.integers(len(models)))
        m = models[j].points()
        half_w = np.abs(m[:, 0]).max()
        half_l = np.abs(m[:, 1]).max()
        lane = int(rng.integers(cfg.n_lanes))
        slack = max(cfg.lane_width_m / 2.0 - half_w, 0.0)
        x = first + (lane + 0.5) * cfg.lane_width_m + rng.uniform(-slack, slack)
        g = np.array([x, rng.uniform(y_lo, y_hi)])
        heading = base + math.radians(rng.uniform(-cfg.vehicle_yaw_deg, cfg.vehicle_yaw_deg))
        Rz = heading_rotation(heading)
        world = m @ Rz.T + np.array([g[0], g[1], 0.0])
        uv, front = _safe_project(world, params, cfg.image_size)
        if not front.all():
            continue
        inside = _in_frame(uv, cfg.image_size)
        if inside.sum() < cfg.min_visible_keypoints:
            continue
        extent = np.nanmax(uv, axis=0) - np.nanmin(uv, axis=0)
        if np.hypot(*extent) < cfg.min_vehicle_px:
            continue
        rect = np.array([[-half_w, -half_l], [half_w, -half_l], [half_w, half_l], [-half_w, half_l]]) @ Rz[:2, :2].T
        fp = Polygon(rect + g)
        if any(fp.buffer(0.3).intersects(o) for o in footprints):
            continue
        footprints.append(fp)
        out.append((j, g.copy(), heading, dict(zip(KEYPOINT_NAMES, world)), uv))
    return out if len(out) == n_vehicles else None


def lane_geometries(scene: Scene):
    """The scene's lanes in image space, as used for counting."""
    return [LaneGeometry(l.lane_id, l.image_polygon, l.centerline_image, l.length_m) for l in scene.lanes]


def vehicle_boxes(scene: Scene, confidence: float = 1.0):
    """A perfect detector: one box per vehicle, centred on its projected ground position.

    Box size follows the vehicle's keypoint extent; only the centre matters
    for lane assignment.
    """
    boxes = []
    for pl in scene.placements:
        centre = project(np.array([pl.position[0], pl.position[1], 0.0]), scene.params, scene.image_size)
        kp = project(np.array(list(pl.world_keypoints.values())), scene.params, scene.image_size)
        half = np.maximum((kp.max(axis=0) - kp.min(axis=0)) / 2.0, 0.5)
        boxes.append(BoundingBox(*(centre - half), *(centre + half), confidence))
    return boxes


def planted_lane_counts(scene: Scene) -> Dict[int, int]:
    """Vehicles whose ground position lies inside each lane, decided in world coordinates."""
    counts = {}
    for lane in scene.lanes:
        poly = Polygon(lane.ground_polygon[:, :2])
        counts[lane.lane_id] = sum(poly.covers(Point(*map(float, pl.position))) for pl in scene.placements)
    return counts


def ground_truth_distance(scene: Scene, line: int, a: int, b: int) -> float:
    pts = scene.marking_lines_world[line]
    return float(np.linalg.norm(pts[b] - pts[a]))
