"""Detector output ingestion, lane assignment, per-lane counting and box metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from shapely.geometry import Point, Polygon

from .errors import InputError, OverlappingLanes, SchemaError, ZeroLaneLength

DEFAULT_CONFIDENCE_MIN = 0.25
MAP_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    confidence: float = 1.0

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise InputError(f"degenerate box ({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max})")
        if not (0.0 <= self.confidence <= 1.0):
            raise InputError(f"confidence {self.confidence} outside [0, 1]")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    @property
    def center(self) -> Tuple[float, float]:
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    def to_list(self, with_confidence: bool = True) -> list:
        out = [self.x_min, self.y_min, self.x_max, self.y_max]
        return out + [self.confidence] if with_confidence else out


@dataclass(frozen=True)
class DetectionFrame:
    timestamp: float  # UTC seconds
    camera_id: str
    boxes: Tuple[BoundingBox, ...] = ()


@dataclass(frozen=True)
class LaneGeometry:
    lane_id: int
    polygon: np.ndarray  # (n, 2) image-space vertices
    centerline: np.ndarray  # (m, 2) image-space polyline
    length_m: float

    def __post_init__(self):
        poly = np.asarray(self.polygon, dtype=float).reshape(-1, 2)
        object.__setattr__(self, "polygon", poly)
        object.__setattr__(self, "centerline", np.asarray(self.centerline, dtype=float).reshape(-1, 2))
        if len(poly) < 3 or not Polygon(poly).is_valid or Polygon(poly).area <= 0:
            raise InputError(f"lane {self.lane_id} polygon is not a simple polygon")
        if not self.length_m > 0:
            raise ZeroLaneLength(f"lane {self.lane_id} has non-positive length {self.length_m}")

    @property
    def shape(self) -> Polygon:
        return Polygon(self.polygon)


def check_lanes(lanes: Sequence[LaneGeometry], area_tol: float = 1e-9) -> None:
    """Reject duplicate ids and lanes whose interiors overlap (shared edges are fine)."""
    ids = [l.lane_id for l in lanes]
    if len(set(ids)) != len(ids):
        raise InputError("duplicate lane ids")
    shapes = [l.shape for l in lanes]
    for a in range(len(lanes)):
        for b in range(a + 1, len(lanes)):
            if shapes[a].intersection(shapes[b]).area > area_tol:
                raise OverlappingLanes(f"lanes {lanes[a].lane_id} and {lanes[b].lane_id} overlap")


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return float(inter / (a.area + b.area - inter))


class MatchResult(NamedTuple):
    tp: int
    fp: int
    fn: int
    matches: List[Tuple[int, int, float]]  # (pred index, truth index, iou)


def _confidence_order(preds: Sequence[BoundingBox]) -> List[int]:
    # stable: equal confidences keep input order
    return sorted(range(len(preds)), key=lambda i: -preds[i].confidence)


def match_detections(
    preds: Sequence[BoundingBox], truths: Sequence[BoundingBox], iou_threshold: float = 0.5
) -> MatchResult:
    """Greedy matching in descending confidence.

    Each prediction takes the unmatched truth with the highest IoU, provided
    that IoU reaches ``iou_threshold``; IoU ties go to the lower truth index.
    """
    if not 0.0 < iou_threshold < 1.0 + 1e-12:
        raise ValueError("iou_threshold must lie in (0, 1]")
    taken = [False] * len(truths)
    matches = []
    for i in _confidence_order(preds):
        best, best_iou = -1, -1.0
        for j, t in enumerate(truths):
            if taken[j]:
                continue
            o = iou(preds[i], t)
            if o > best_iou:
                best, best_iou = j, o
        if best >= 0 and best_iou >= iou_threshold:
            taken[best] = True
            matches.append((i, best, best_iou))
    tp = len(matches)
    return MatchResult(tp, len(preds) - tp, len(truths) - tp, matches)


def precision_recall(tp: int, fp: int, fn: int) -> Tuple[float, float]:
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be non-negative")
    precision = 1.0 if tp + fp == 0 else tp / (tp + fp)
    recall = 1.0 if tp + fn == 0 else tp / (tp + fn)
    return precision, recall


def _as_images(preds, truths):
    """Accept either one image (two box lists) or a list of per-image pairs."""
    if preds and isinstance(preds[0], BoundingBox) or truths and isinstance(truths[0], BoundingBox):
        return [(list(preds), list(truths))]
    if not preds and not truths:
        return [([], [])]
    return list(zip(preds, truths))


def pr_curve(preds, truths, iou_threshold: float = 0.5) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Precision and recall at every distinct confidence cutoff, highest cutoff first.

    ``preds``/``truths`` are box lists for a single image, or equal-length lists
    of per-image box lists. Returns ``(cutoffs, precision, recall)``.
    """
    images = _as_images(preds, truths)
    n_truth = sum(len(t) for _, t in images)
    scored = []
    for p, t in images:
        res = match_detections(p, t, iou_threshold)
        hit = set(m[0] for m in res.matches)
        scored += [(box.confidence, i in hit) for i, box in enumerate(p)]
    if not scored:
        return np.zeros(0), np.zeros(0), np.zeros(0)
    conf = np.array([s[0] for s in scored])
    is_tp = np.array([s[1] for s in scored])
    order = np.argsort(-conf, kind="stable")
    conf, is_tp = conf[order], is_tp[order]
    ctp = np.cumsum(is_tp)
    cfp = np.cumsum(~is_tp)
    # keep the last index of each group of equal confidences
    last = np.r_[np.nonzero(np.diff(conf))[0], len(conf) - 1]
    tp, fp = ctp[last], cfp[last]
    precision = tp / (tp + fp)
    recall = tp / n_truth if n_truth else np.ones(len(last))
    return conf[last], precision, recall


def average_precision(preds, truths, iou_threshold: float = 0.5) -> float:
    """Area under the all-point interpolated precision/recall curve.

    With no ground truth the result is 1 if there are also no predictions and
    0 otherwise.
    """
    images = _as_images(preds, truths)
    n_truth = sum(len(t) for _, t in images)
    n_pred = sum(len(p) for p, _ in images)
    if n_truth == 0:
        return 1.0 if n_pred == 0 else 0.0
    _, precision, recall = pr_curve(preds, truths, iou_threshold)
    if len(recall) == 0:
        return 0.0
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.r_[0.0, recall])
    return float(np.sum(steps * envelope))


def mean_average_precision(preds, truths, thresholds: Sequence[float] = MAP_THRESHOLDS) -> float:
    return float(np.mean([average_precision(preds, truths, t) for t in thresholds]))


def assign_lane(box: BoundingBox, lanes: Sequence[LaneGeometry]) -> Optional[int]:
    """Lane containing the box centre; points on a shared edge go to the lower lane id."""
    c = Point(*box.center)
    for lane in sorted(lanes, key=lambda l: l.lane_id):
        if lane.shape.covers(c):
            return lane.lane_id
    return None


def count_per_lane(
    frame: DetectionFrame, lanes: Sequence[LaneGeometry], confidence_min: float = DEFAULT_CONFIDENCE_MIN
) -> Dict[int, int]:
    if not 0.0 <= confidence_min <= 1.0:
        raise ValueError("confidence_min must lie in [0, 1]")
    counts = {l.lane_id: 0 for l in lanes}
    for box in frame.boxes:
        if box.confidence < confidence_min:
            continue
        lane = assign_lane(box, lanes)
        if lane is not None:
            counts[lane] += 1
    return counts


# ---------------------------------------------------------------- file formats


def _parse_box(raw, with_confidence: bool, line: int, k: int) -> BoundingBox:
    want = 5 if with_confidence else 4
    if not isinstance(raw, (list, tuple)) or len(raw) not in (4, 5) or (with_confidence and len(raw) != want):
        raise SchemaError(f"expected {want} numbers", field=f"boxes[{k}]", line=line)
    try:
        return BoundingBox(*[float(x) for x in raw])
    except InputError as exc:
        raise SchemaError(str(exc), field=f"boxes[{k}]", line=line) from None


def parse_frame(doc: dict, with_confidence: bool = True, line: Optional[int] = None) -> DetectionFrame:
    for key in ("ts", "camera", "boxes"):
        if key not in doc:
            raise SchemaError("missing", field=key, line=line)
    boxes = tuple(_parse_box(b, with_confidence, line, k) for k, b in enumerate(doc["boxes"]))
    return DetectionFrame(float(doc["ts"]), str(doc["camera"]), boxes)


def frame_to_dict(frame: DetectionFrame, with_confidence: bool = True) -> dict:
    return {
        "ts": frame.timestamp,
        "camera": frame.camera_id,
        "boxes": [b.to_list(with_confidence) for b in frame.boxes],
    }


def read_frames(lines: Iterable[str], with_confidence: bool = True) -> Iterator[DetectionFrame]:
    """Parse JSON-lines detections; timestamps must not decrease within a camera."""
    last: Dict[str, float] = {}
    for n, text in enumerate(lines, start=1):
        if not text.strip():
            continue
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"invalid JSON ({exc.msg})", line=n) from None
        frame = parse_frame(doc, with_confidence, n)
        if frame.timestamp < last.get(frame.camera_id, -np.inf):
            raise SchemaError("timestamp decreases within camera stream", field="ts", line=n)
        last[frame.camera_id] = frame.timestamp
        yield frame


def write_frames(frames: Iterable[DetectionFrame], with_confidence: bool = True) -> str:
    return "".join(json.dumps(frame_to_dict(f, with_confidence)) + "\n" for f in frames)


def lanes_from_dict(doc: dict) -> List[LaneGeometry]:
    lanes = []
    for k, raw in enumerate(doc.get("lanes", [])):
        for key in ("lane_id", "polygon", "centerline", "length_m"):
            if key not in raw:
                raise SchemaError("missing", field=f"lanes[{k}].{key}")
        try:
            lanes.append(LaneGeometry(int(raw["lane_id"]), raw["polygon"], raw["centerline"], float(raw["length_m"])))
        except (ZeroLaneLength, OverlappingLanes):
            raise
        except (InputError, ValueError) as exc:
            raise SchemaError(str(exc), field=f"lanes[{k}]") from None
    check_lanes(lanes)
    return lanes


def lanes_to_dict(lanes: Sequence[LaneGeometry]) -> dict:
    return {
        "lanes": [
            {
                "lane_id": l.lane_id,
                "polygon": l.polygon.tolist(),
                "centerline": l.centerline.tolist(),
                "length_m": l.length_m,
            }
            for l in lanes
        ]
    }
