"""Camera model, pinhole projection and quaternion helpers.

Frames: the robot base frame is right-handed with z up. Quaternions are
stored as ``(w, x, y, z)`` tuples.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import BadDepth, ConfigError

Vec3 = tuple[float, float, float]
Quat = tuple[float, float, float, float]

ORTHO_TOL = 1e-9


def quat_multiply(a: Sequence[float], b: Sequence[float]) -> Quat:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return (
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    )


def quat_conjugate(q: Sequence[float]) -> Quat:
    w, x, y, z = q
    return (w, -x, -y, -z)


def quat_normalize(q: Sequence[float]) -> Quat:
    n = math.sqrt(sum(c * c for c in q))
    if n == 0.0 or not math.isfinite(n):
        raise ValueError(f"cannot normalize quaternion {tuple(q)}")
    return tuple(float(c) / n for c in q)  # type: ignore[return-value]


def quat_from_yaw(yaw: float) -> Quat:
    return (math.cos(yaw / 2.0), 0.0, 0.0, math.sin(yaw / 2.0))


def yaw_of(q: Sequence[float]) -> float:
    """Heading of the quaternion's x axis projected on the base xy plane."""
    w, x, y, z = q
    return math.atan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z))


def top_down(yaw: float = 0.0) -> Quat:
    """Gripper orientation with its z axis anti-parallel to base z."""
    # 180 deg about x flips z; yaw is applied about base z afterwards
    return quat_multiply(quat_from_yaw(yaw), (0.0, 1.0, 0.0, 0.0))


def quat_to_matrix(q: Sequence[float]) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotate(q: Sequence[float], v: Sequence[float]) -> Vec3:
    r = quat_to_matrix(q) @ np.asarray(v, dtype=float)
    return (float(r[0]), float(r[1]), float(r[2]))


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics plus the rigid transform from camera to base frame."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: tuple[tuple[float, float, float], ...] = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    translation: Vec3 = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")
        R = np.asarray(self.rotation, dtype=float)
        if R.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if np.abs(R @ R.T - np.eye(3)).max() > ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation must be orthonormal with determinant +1")

    @property
    def R(self) -> np.ndarray:
        return np.asarray(self.rotation, dtype=float)

    @property
    def t(self) -> np.ndarray:
        return np.asarray(self.translation, dtype=float)

    def contains(self, u: float, v: float) -> bool:
        return 0 <= u < self.width and 0 <= v < self.height

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        try:
            rot = [float(x) for x in d["rotation"]]
            if len(rot) != 9:
                raise ValueError("rotation needs 9 values")
            return cls(
                fx=float(d["fx"]),
                fy=float(d["fy"]),
                cx=float(d["cx"]),
                cy=float(d["cy"]),
                width=int(d["width"]),
                height=int(d["height"]),
                rotation=(tuple(rot[0:3]), tuple(rot[3:6]), tuple(rot[6:9])),
                translation=tuple(float(x) for x in d["translation"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"bad camera calibration: {e}") from e

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "rotation": [c for row in self.rotation for c in row],
            "translation": list(self.translation),
        }

    @classmethod
    def load(cls, path: str | Path) -> "CameraModel":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read calibration {path}: {e}") from e


def look_down_camera(
    position: Sequence[float], fx: float = 300.0, fy: float = 300.0, width: int = 320, height: int = 240
) -> CameraModel:
    """Camera above the table looking straight down.

    Image u grows towards base -y and image v towards base -x.
    """
    return CameraModel(
        fx=fx,
        fy=fy,
        cx=width / 2.0,
        cy=height / 2.0,
        width=width,
        height=height,
        rotation=((0.0, -1.0, 0.0), (-1.0, 0.0, 0.0), (0.0, 0.0, -1.0)),
        translation=tuple(float(c) for c in position),
    )


def pixel_to_base(pixel: Sequence[float], depth: float, cam: CameraModel) -> Vec3:
    """Back-project a pixel with metric depth into the base frame."""
    if not math.isfinite(depth) or depth <= 0:
        raise BadDepth(f"invalid depth {depth!r} at pixel {tuple(pixel)}")
    u, v = pixel
    p_cam = np.array([(u - cam.cx) * depth / cam.fx, (v - cam.cy) * depth / cam.fy, depth])
    p = cam.R @ p_cam + cam.t
    return (float(p[0]), float(p[1]), float(p[2]))


def base_to_pixel(point: Sequence[float], cam: CameraModel) -> tuple[float, float, float]:
    """Forward projection: returns ``(u, v, depth)``."""
    p_cam = cam.R.T @ (np.asarray(point, dtype=float) - cam.t)
    z = float(p_cam[2])
    return (cam.fx * p_cam[0] / z + cam.cx, cam.fy * p_cam[1] / z + cam.cy, z)
