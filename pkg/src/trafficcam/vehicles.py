"""Vehicle keypoint schema and the built-in 3D model library.

Model frames are ground-anchored: origin at the centre of the footprint on
the road surface, X to the vehicle's right, Y forward, Z up (metres).
"""

from __future__ import annotations

from dataclasses import dataclass
from types import MappingProxyType
from typing import Dict, List, Mapping, Sequence

import numpy as np

from .errors import SchemaError

KEYPOINT_NAMES = (
    "left_headlight",
    "right_headlight",
    "front_plate_center",
    "front_wiper_center",
    "left_wing_mirror",
    "right_wing_mirror",
    "back_left_corner",
    "back_right_corner",
)


def check_keypoint_name(name: str, field: str = "keypoints") -> str:
    if name not in KEYPOINT_NAMES:
        raise SchemaError(f"unknown keypoint name {name!r}; expected one of {', '.join(KEYPOINT_NAMES)}", field=f"{field}.{name}")
    return name


@dataclass(frozen=True)
class VehicleAnnotation:
    index: int
    keypoints: Mapping[str, np.ndarray]

    def __post_init__(self):
        if not 1 <= len(self.keypoints) <= len(KEYPOINT_NAMES):
            raise SchemaError(f"vehicle {self.index} must have 1..8 keypoints, got {len(self.keypoints)}", field="keypoints")
        for name in self.keypoints:
            check_keypoint_name(name)
        kp = {}
        for name in KEYPOINT_NAMES:  # canonical order
            if name in self.keypoints:
                kp[name] = np.asarray(self.keypoints[name], dtype=float).reshape(2)
        object.__setattr__(self, "keypoints", MappingProxyType(kp))

    @property
    def names(self) -> List[str]:
        return list(self.keypoints)

    def points(self, names: Sequence[str] = None) -> np.ndarray:
        names = self.names if names is None else names
        return np.array([self.keypoints[n] for n in names]).reshape(-1, 2)

    def __len__(self):
        return len(self.keypoints)


@dataclass(frozen=True)
class VehicleModel:
    name: str
    keypoints: Mapping[str, np.ndarray]

    def __post_init__(self):
        missing = [n for n in KEYPOINT_NAMES if n not in self.keypoints]
        if missing:
            raise SchemaError(f"model {self.name!r} lacks keypoints {missing}", field="keypoints")
        for name in self.keypoints:
            check_keypoint_name(name)
        kp = {n: np.asarray(self.keypoints[n], dtype=float).reshape(3) for n in KEYPOINT_NAMES}
        pts = np.array(list(kp.values()))
        if np.any(pts[:, 2] < 0):
            raise SchemaError(f"model {self.name!r} has keypoints below the ground plane", field="keypoints")
        d = np.linalg.norm(pts[:, None] - pts[None], axis=2)
        if np.any(d[np.triu_indices(len(pts), 1)] <= 0):
            raise SchemaError(f"model {self.name!r} has coincident keypoints", field="keypoints")
        object.__setattr__(self, "keypoints", MappingProxyType(kp))

    def points(self, names: Sequence[str] = None) -> np.ndarray:
        names = KEYPOINT_NAMES if names is None else names
        return np.array([self.keypoints[n] for n in names]).reshape(-1, 3)


def _sedan(name, length, width, headlight_z, plate_z, hood, wiper_z, mirror_z, rear_z):
    half_l, half_w = length / 2.0, width / 2.0
    return VehicleModel(
        name,
        {
            "left_headlight": (-(half_w - 0.22), half_l - 0.12, headlight_z),
            "right_headlight": (half_w - 0.22, half_l - 0.12, headlight_z),
            "front_plate_center": (0.0, half_l, plate_z),
            "front_wiper_center": (0.0, half_l - hood, wiper_z),
            "left_wing_mirror": (-(half_w + 0.08), half_l - hood - 0.35, mirror_z),
            "right_wing_mirror": (half_w + 0.08, half_l - hood - 0.35, mirror_z),
            "back_left_corner": (-(half_w - 0.06), -half_l + 0.05, rear_z),
            "back_right_corner": (half_w - 0.06, -half_l + 0.05, rear_z),
        },
    )


# Approximate manufacturer exterior dimensions; keypoint offsets are nominal.
DEFAULT_MODELS: List[VehicleModel] = [
    _sedan("Toyota Corolla", 4.63, 1.78, 0.72, 0.45, 1.05, 0.98, 1.00, 1.02),
    _sedan("Toyota Prius", 4.54, 1.76, 0.76, 0.50, 0.92, 0.94, 1.03, 1.07),
    _sedan("Honda Civic", 4.67, 1.80, 0.69, 0.41, 1.12, 0.95, 0.97, 0.99),
    _sedan("BMW Series 4", 4.77, 1.83, 0.66, 0.39, 1.27, 0.96, 0.96, 0.97),
    _sedan("Tesla Model S", 4.98, 1.96, 0.71, 0.46, 1.19, 0.99, 1.02, 1.06),
]


def model_library(names: Sequence[str] = None) -> List[VehicleModel]:
    if names is None:
        return list(DEFAULT_MODELS)
    by_name: Dict[str, VehicleModel] = {m.name: m for m in DEFAULT_MODELS}
    return [by_name[n] for n in names]
