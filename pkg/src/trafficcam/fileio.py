"""Versioned JSON file formats shared by the command line tools.

Every document carries a top-level ``schema_version``; documents written by a
newer version of this package are rejected rather than half-read.
"""

from __future__ import annotations

import json
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InputError, SchemaError
from .geometry import CameraParams, ImageSize, Rotation
from .measurement import GroundSegmentSet
from .mvcalib import CalibResult
from .vehicles import VehicleAnnotation, VehicleModel, check_keypoint_name

SCHEMA_VERSION = 1


def read_json(path: str) -> Any:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"invalid JSON in {path}: {exc.msg}", line=exc.lineno) from None


def write_json(path: str, doc: Any) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def versioned(doc: dict) -> dict:
    return {"schema_version": SCHEMA_VERSION, **doc}


def check_version(doc: Any, kind: str) -> dict:
    if not isinstance(doc, dict):
        raise SchemaError(f"{kind} file must hold a JSON object")
    if "schema_version" not in doc:
        raise SchemaError("missing", field="schema_version")
    v = doc["schema_version"]
    if not isinstance(v, int) or isinstance(v, bool) or v < 1:
        raise SchemaError(f"invalid version {v!r}", field="schema_version")
    if v > SCHEMA_VERSION:
        raise SchemaError(f"{kind} schema version {v} is newer than supported ({SCHEMA_VERSION})", field="schema_version")
    return doc


def _require(doc: dict, key: str, where: str = ""):
    if key not in doc:
        raise SchemaError("missing", field=f"{where}{key}")
    return doc[key]


def _nested(exc: SchemaError, where: str) -> SchemaError:
    return SchemaError(exc.message, field=where if exc.field is None else f"{where}.{exc.field}", line=exc.line)


def _vector(raw, n: int, field: str) -> np.ndarray:
    try:
        arr = np.asarray(raw, dtype=float)
    except (TypeError, ValueError):
        raise SchemaError(f"expected {n} numbers", field=field) from None
    if arr.shape != (n,) or not np.all(np.isfinite(arr)):
        raise SchemaError(f"expected {n} finite numbers", field=field)
    return arr


def _image_size(doc: dict) -> ImageSize:
    raw = _require(doc, "image_size")
    if not (isinstance(raw, list) and len(raw) == 2 and all(isinstance(v, int) and v > 0 for v in raw)):
        raise SchemaError("expected [width, height] in pixels", field="image_size")
    return int(raw[0]), int(raw[1])


# --------------------------------------------------------------- annotations


def annotations_to_dict(annotations: Sequence[VehicleAnnotation], image_size: ImageSize) -> dict:
    return versioned({
        "image_size": list(image_size),
        "vehicles": [
            {"index": a.index, "keypoints": {n: [float(v) for v in a.keypoints[n]] for n in a.names}}
            for a in annotations
        ],
    })


def annotations_from_dict(doc: dict) -> Tuple[List[VehicleAnnotation], ImageSize]:
    check_version(doc, "annotations")
    size = _image_size(doc)
    out = []
    for k, raw in enumerate(_require(doc, "vehicles")):
        where = f"vehicles[{k}]"
        kp = _require(raw, "keypoints", where + ".")
        if not isinstance(kp, dict):
            raise SchemaError("expected an object of name -> [u, v]", field=f"{where}.keypoints")
        for name in kp:
            check_keypoint_name(name, field=f"{where}.keypoints")
        pts = {n: _vector(v, 2, f"{where}.keypoints.{n}") for n, v in kp.items()}
        try:
            out.append(VehicleAnnotation(int(raw.get("index", k)), pts))
        except SchemaError as exc:
            raise _nested(exc, where) from None
    indices = [a.index for a in out]
    if len(set(indices)) != len(indices):
        raise SchemaError("duplicate vehicle index", field="vehicles")
    return out, size


# ---------------------------------------------------------------------- models


def models_to_dict(models: Sequence[VehicleModel]) -> dict:
    return versioned({
        "units": "m",
        "models": [
            {"name": m.name, "keypoints": {n: [float(v) for v in m.keypoints[n]] for n in m.keypoints}}
            for m in models
        ],
    })


def models_from_dict(doc: dict) -> List[VehicleModel]:
    check_version(doc, "models")
    out = []
    for k, raw in enumerate(_require(doc, "models")):
        where = f"models[{k}]"
        name = _require(raw, "name", where + ".")
        kp = _require(raw, "keypoints", where + ".")
        for n in kp:
            check_keypoint_name(n, field=f"{where}.keypoints")
        pts = {n: _vector(v, 3, f"{where}.keypoints.{n}") for n, v in kp.items()}
        try:
            out.append(VehicleModel(str(name), pts))
        except SchemaError as exc:
            raise _nested(exc, where) from None
    if not out:
        raise SchemaError("at least one model is required", field="models")
    return out


# ----------------------------------------------------------------- calibration


def camera_to_dict(params: CameraParams) -> dict:
    return {
        "f_px": float(params.f),
        "R": params.R.tolist(),
        "axis_angle": params.rotation.axis_angle.tolist(),
        "T_m": params.T.tolist(),
    }


def camera_from_dict(doc: dict, where: str = "") -> CameraParams:
    f = _require(doc, "f_px", where)
    if not isinstance(f, (int, float)) or not f > 0:
        raise SchemaError("focal length must be positive", field=f"{where}f_px")
    T = _vector(_require(doc, "T_m", where), 3, f"{where}T_m")
    if "R" in doc:
        R = np.asarray(doc["R"], dtype=float)
        if R.shape != (3, 3):
            raise SchemaError("expected a 3x3 matrix", field=f"{where}R")
        try:
            rot = Rotation.from_matrix(R)
        except InputError as exc:
            raise SchemaError(str(exc), field=f"{where}R") from None
    else:
        rot = Rotation.from_axis_angle(_vector(_require(doc, "axis_angle", where), 3, f"{where}axis_angle"))
    return CameraParams(float(f), rot, T)


def calibration_to_dict(result: CalibResult, image_size: ImageSize) -> dict:
    return versioned({
        "image_size": list(image_size),
        "camera": camera_to_dict(result.params),
        "anchor_vehicle": result.anchor_index,
        "matched_models": {str(k): v for k, v in sorted(result.matched_models.items())},
        "stage_losses": {k: float(v) for k, v in result.stage_losses.items()},
        "final_loss": float(result.final_loss),
        "stages": result.stages,
        "rematch_rounds": result.rematch_rounds,
        "alpha": result.alpha,
        "tau_per_m": result.tau,
        "skipped": [list(s) for s in result.skipped],
    })


def calibration_from_dict(doc: dict) -> Tuple[CameraParams, ImageSize, dict]:
    """Camera parameters, image size and the remaining metadata."""
    check_version(doc, "calibration")
    size = _image_size(doc)
    params = camera_from_dict(_require(doc, "camera"), "camera.")
    return params, size, doc


# -------------------------------------------------------------------- markings


def markings_to_dict(lines: Sequence[np.ndarray], image_size: ImageSize, true_length_m: Optional[float]) -> dict:
    return versioned({
        "image_size": list(image_size),
        "true_segment_length_m": true_length_m,
        "lines": [np.asarray(l, float).tolist() for l in lines],
    })


def markings_from_dict(doc: dict) -> Tuple[GroundSegmentSet, ImageSize]:
    check_version(doc, "markings")
    size = _image_size(doc)
    lines = []
    for k, raw in enumerate(_require(doc, "lines")):
        arr = np.asarray(raw, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != 2 or len(arr) < 2:
            raise SchemaError("expected a list of at least two [u, v] points", field=f"lines[{k}]")
        lines.append(arr)
    true_len = doc.get("true_segment_length_m")
    if true_len is not None and not (isinstance(true_len, (int, float)) and true_len > 0):
        raise SchemaError("must be a positive number", field="true_segment_length_m")
    try:
        return GroundSegmentSet(lines, None if true_len is None else float(true_len)), size
    except ValueError as exc:
        raise SchemaError(str(exc), field="lines") from None
