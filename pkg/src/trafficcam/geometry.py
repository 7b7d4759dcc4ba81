"""Pinhole camera model with a centred principal point.

Conventions
-----------
World points are metres, image points are pixels with the origin at the
top-left corner, ``u`` to the right and ``v`` downwards. A camera is
``s * [u, v, 1]^T = K [R | T] [X, Y, Z, 1]^T`` with
``K = [[f, 0, w/2], [0, f, h/2], [0, 0, 1]]``; ``f`` is in pixels.

Rotations are carried either as a 3x3 matrix or as an axis-angle vector
``theta * d`` (Rodrigues), which reduces the calibration unknowns
``(f, R, T)`` from 13 numbers to 7.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Tuple

import numpy as np

from .errors import NotARotation, PointBehindCamera, RayParallelToPlane

ImageSize = Tuple[int, int]

ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class Intrinsics:
    f: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.f > 0 and self.w > 0 and self.h > 0):
            raise ValueError(f"intrinsics must be positive, got f={self.f} w={self.w} h={self.h}")

    @property
    def principal_point(self) -> Tuple[float, float]:
        return self.w / 2.0, self.h / 2.0

    @property
    def K(self) -> np.ndarray:
        return intrinsic_matrix(self.f, (self.w, self.h))


def intrinsic_matrix(f: float, image_size: ImageSize) -> np.ndarray:
    w, h = image_size
    return np.array([[f, 0.0, w / 2.0], [0.0, f, h / 2.0], [0.0, 0.0, 1.0]])


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix ``[v]_x`` so that ``skew(a) @ b == cross(a, b)``."""
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def axis_angle_to_matrix(theta_vec: Sequence[float]) -> np.ndarray:
    """Rodrigues: ``R = cos t I + (1 - cos t) d d^T + sin t [d]_x``."""
    rv = np.asarray(theta_vec, dtype=float)
    theta = float(np.linalg.norm(rv))
    if theta == 0.0:
        return np.eye(3)
    d = rv / theta
    c, s = np.cos(theta), np.sin(theta)
    return c * np.eye(3) + (1.0 - c) * np.outer(d, d) + s * skew(d)


def axis_angle_to_matrix_batch(theta_vecs: np.ndarray) -> np.ndarray:
    """Vectorised Rodrigues for an ``(m, 3)`` stack; returns ``(m, 3, 3)``."""
    rv = np.asarray(theta_vecs, dtype=float)
    theta = np.linalg.norm(rv, axis=1)
    safe = np.where(theta > 0.0, theta, 1.0)
    d = rv / safe[:, None]
    c = np.cos(theta)[:, None, None]
    s = np.sin(theta)[:, None, None]
    K = np.zeros((rv.shape[0], 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -d[:, 2], d[:, 1]
    K[:, 1, 0], K[:, 1, 2] = d[:, 2], -d[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -d[:, 1], d[:, 0]
    ddT = d[:, :, None] * d[:, None, :]
    R = c * np.eye(3)[None] + (1.0 - c) * ddT + s * K
    R[theta == 0.0] = np.eye(3)
    return R


def check_rotation(R: np.ndarray, tol: float = ORTHO_TOL) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise NotARotation(f"expected a finite 3x3 matrix, got shape {R.shape}")
    if np.abs(R.T @ R - np.eye(3)).max() > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise NotARotation("matrix is not orthonormal with determinant +1")
    return R


def matrix_to_axis_angle(R: np.ndarray) -> np.ndarray:
    """Inverse Rodrigues. The angle comes from the trace, the axis from ``R d = d``.

    Returns ``theta * d`` with ``theta`` in ``[0, pi]``. At ``theta == pi`` the
    sign of ``d`` is arbitrary.
    """
    R = check_rotation(R)
    cos_t = (np.trace(R) - 1.0) / 2.0
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    sin_t = float(np.linalg.norm(vee))
    # atan2 keeps full precision near 0 where arccos of the trace term does not
    theta = float(np.arctan2(sin_t, np.clip(cos_t, -1.0, 1.0)))
    if theta < 1e-12:
        return vee.copy()
    if theta < np.pi / 2:
        return theta * vee / sin_t
    # near pi the antisymmetric part vanishes; read the axis off the symmetric part
    B = (R + R.T) / 2.0 - np.cos(theta) * np.eye(3)
    k = int(np.argmax(np.diag(B)))
    d = B[:, k] / np.sqrt(B[k, k] * (1.0 - np.cos(theta)))
    d /= np.linalg.norm(d)
    if d @ vee < 0:
        d = -d
    return theta * d


@dataclass(frozen=True)
class Rotation:
    matrix: np.ndarray = field(repr=False)
    axis_angle: np.ndarray

    @classmethod
    def from_matrix(cls, R) -> "Rotation":
        R = check_rotation(R)
        return cls(R.copy(), matrix_to_axis_angle(R))

    @classmethod
    def from_axis_angle(cls, theta_vec) -> "Rotation":
        rv = np.asarray(theta_vec, dtype=float).reshape(3)
        return cls(axis_angle_to_matrix(rv), rv.copy())

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.eye(3), np.zeros(3))

    @property
    def angle(self) -> float:
        return float(np.linalg.norm(self.axis_angle))

    @property
    def axis(self) -> np.ndarray:
        t = self.angle
        return self.axis_angle / t if t > 0 else np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class CameraParams:
    """Calibration unknowns: focal length (px), rotation and translation (m)."""

    f: float
    rotation: Rotation
    translation: np.ndarray

    def __post_init__(self):
        if not self.f > 0:
            raise ValueError(f"focal length must be positive, got {self.f}")
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @property
    def R(self) -> np.ndarray:
        return self.rotation.matrix

    @property
    def T(self) -> np.ndarray:
        return self.translation

    def to_vector(self) -> np.ndarray:
        """The reduced 7-vector ``(f, theta*d, T)``."""
        return np.concatenate([[self.f], self.rotation.axis_angle, self.translation])

    @classmethod
    def from_vector(cls, x) -> "CameraParams":
        x = np.asarray(x, dtype=float)
        if x.shape != (7,):
            raise ValueError(f"expected 7 parameters, got shape {x.shape}")
        return cls(float(x[0]), Rotation.from_axis_angle(x[1:4]), x[4:7])

    @classmethod
    def from_rt(cls, f: float, R: np.ndarray, T) -> "CameraParams":
        return cls(float(f), Rotation.from_matrix(R), np.asarray(T, dtype=float))

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates, ``-R^T T``."""
        return -self.R.T @ self.T

    def projection_matrix(self, image_size: ImageSize) -> np.ndarray:
        return intrinsic_matrix(self.f, image_size) @ np.hstack([self.R, self.T[:, None]])


def project(P, params: CameraParams, image_size: ImageSize) -> np.ndarray:
    """Project world point(s) ``(3,)`` or ``(n, 3)`` to pixels."""
    P = np.asarray(P, dtype=float)
    single = P.ndim == 1
    Pn = np.atleast_2d(P)
    cam = Pn @ params.R.T + params.T
    s = cam[:, 2]
    if np.any(s <= 0):
        raise PointBehindCamera(f"{int(np.sum(s <= 0))} point(s) at or behind the camera plane")
    w, h = image_size
    uv = np.column_stack([params.f * cam[:, 0] / s + w / 2.0, params.f * cam[:, 1] / s + h / 2.0])
    return uv[0] if single else uv


def normalized_coords(p, f: float, image_size: ImageSize) -> np.ndarray:
    """``((u - w/2) / f, (v - h/2) / f)``."""
    p = np.asarray(p, dtype=float)
    w, h = image_size
    return (p - np.array([w / 2.0, h / 2.0])) / f


def back_project_ray(p, params: CameraParams, image_size: ImageSize):
    """The ray of world points that project to pixel ``p``.

    Returns ``(origin, direction)``: the camera centre and a unit vector.
    """
    ut, vt = normalized_coords(p, params.f, image_size)
    d = params.R.T @ np.array([ut, vt, 1.0])
    return params.center, d / np.linalg.norm(d)


def intersect_plane(ray, plane_z: float) -> np.ndarray:
    """Point where the line through ``ray`` meets the horizontal plane ``Z = plane_z``."""
    origin, direction = (np.asarray(a, dtype=float) for a in ray)
    if abs(direction[2]) < 1e-12:
        raise RayParallelToPlane("ray is parallel to the plane")
    t = (plane_z - origin[2]) / direction[2]
    point = origin + t * direction
    point[2] = plane_z
    return point


def back_project_to_plane(p, params: CameraParams, image_size: ImageSize, plane_z: float = 0.0) -> np.ndarray:
    """Ground point seen at pixel ``p``; raises if the plane is behind the camera."""
    origin, direction = back_project_ray(p, params, image_size)
    if abs(direction[2]) < 1e-12:
        raise RayParallelToPlane("ray is parallel to the plane")
    t = (plane_z - origin[2]) / direction[2]
    if t <= 0:
        raise PointBehindCamera("plane intersection lies behind the camera")
    return intersect_plane((origin, direction), plane_z)


def look_at(camera_center, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera rotation for a camera at ``camera_center`` facing ``target``.

    Camera axes: x right, y down, z forward.
    """
    c = np.asarray(camera_center, dtype=float)
    z = np.asarray(target, dtype=float) - c
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=float))
    n = np.linalg.norm(x)
    if n < 1e-12:
        raise ValueError("viewing direction is parallel to the up vector")
    x /= n
    y = np.cross(z, x)
    return np.vstack([x, y, z])
