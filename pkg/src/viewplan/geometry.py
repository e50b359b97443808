"""Rigid transforms, camera models, and ray casting.

Conventions: world frame is right-handed with +z up and the table plane at
z = 0. Camera frames look down their own +z axis; a camera pose maps camera
coordinates to world coordinates. The ray for integer pixel (u, v) of a
rendered image is cast through (u + 0.5, v + 0.5); the casting functions
themselves take the (possibly fractional) pixel coordinate literally.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from viewplan.errors import ConfigError, DomainError, IOFailure

ORTHONORMAL_TOL = 1e-6
UNIT_TOL = 1e-9


def _as_f64(x, shape):
    a = np.asarray(x, dtype=np.float64)
    if a.shape != shape:
        raise ConfigError(f"expected array of shape {shape}, got {a.shape}")
    return a


@dataclass(frozen=True)
class RigidPose:
    """Rotation (3x3 orthonormal, det +1) plus translation in meters."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = _as_f64(self.rotation, (3, 3))
        t = _as_f64(self.translation, (3,))
        if not np.allclose(r.T @ r, np.eye(3), atol=ORTHONORMAL_TOL):
            raise ConfigError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ConfigError("rotation must have determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidPose":
        return RigidPose(np.eye(3), np.zeros(3))

    def inverse(self) -> "RigidPose":
        rt = self.rotation.T
        return RigidPose(rt, -rt @ self.translation)

    def apply(self, points):
        """Transform one point (3,) or a batch (N, 3) into the parent frame."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def rotate(self, vectors):
        v = np.asarray(vectors, dtype=np.float64)
        return v @ self.rotation.T

    def matrix_3x4(self) -> np.ndarray:
        return np.hstack([self.rotation, self.translation[:, None]])

    @staticmethod
    def from_matrix_3x4(m) -> "RigidPose":
        m = _as_f64(m, (3, 4))
        return RigidPose(m[:, :3], m[:, 3])


def compose(a: RigidPose, b: RigidPose) -> RigidPose:
    """Composition applying b first and a second."""
    return RigidPose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def rotation_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=np.float64)


def rotation_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=np.float64)


def rotation_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)


def rotation_angle(r: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, in radians."""
    tr = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.arccos(tr))


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels. Defaults mirror the 640x480 capture rig."""

    fx: float = 450.0
    fy: float = 450.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ConfigError("principal point must lie within the image")

    def scaled(self, factor: float) -> "Intrinsics":
        """Uniformly rescale the image size and focal lengths."""
        return Intrinsics(
            self.fx * factor,
            self.fy * factor,
            self.cx * factor,
            self.cy * factor,
            int(round(self.width * factor)),
            int(round(self.height * factor)),
        )


@dataclass(frozen=True)
class Ray:
    """Origin in meters, unit-norm direction."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = _as_f64(self.origin, (3,))
        d = _as_f64(self.direction, (3,))
        if abs(np.linalg.norm(d) - 1.0) > UNIT_TOL:
            raise ConfigError("ray direction must be unit norm")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


class Projection(enum.Enum):
    PERSPECTIVE = "perspective"
    ORTHOGRAPHIC = "orthographic"


@dataclass(frozen=True)
class CameraModel:
    pose: RigidPose
    intrinsics: Intrinsics
    projection: Projection

    def ray(self, u: float, v: float) -> Ray:
        if self.projection is Projection.PERSPECTIVE:
            return pixel_to_ray_perspective(self, u, v)
        return pixel_to_ray_orthographic(self, u, v)

    def rays(self, us, vs):
        """Vectorized ray casting; returns (origins (N,3), directions (N,3))."""
        us = np.asarray(us, dtype=np.float64)
        vs = np.asarray(vs, dtype=np.float64)
        _check_bounds(self.intrinsics, us, vs)
        k = self.intrinsics
        r, t = self.pose.rotation, self.pose.translation
        xn = (us - k.cx) / k.fx
        yn = (vs - k.cy) / k.fy
        if self.projection is Projection.PERSPECTIVE:
            d = np.stack([xn, yn, np.ones_like(xn)], axis=-1) @ r.T
            d /= np.linalg.norm(d, axis=-1, keepdims=True)
            o = np.broadcast_to(t, d.shape).copy()
        else:
            o = t + np.stack([xn, yn, np.zeros_like(xn)], axis=-1) @ r.T
            d = np.broadcast_to(r[:, 2], o.shape).copy()
        return o, d

    def pixel_grid_rays(self):
        """Rays through every pixel center, row-major; returns (H*W, 3) pairs."""
        k = self.intrinsics
        us, vs = np.meshgrid(
            np.arange(k.width) + 0.5, np.arange(k.height) + 0.5, indexing="xy"
        )
        return self.rays(us.ravel(), vs.ravel())

    def project(self, point):
        """World point -> fractional pixel coordinate (u, v)."""
        p = self.pose.inverse().apply(np.asarray(point, dtype=np.float64))
        k = self.intrinsics
        if self.projection is Projection.PERSPECTIVE:
            if p[2] <= 0:
                raise DomainError("point is behind the camera")
            return np.array([k.fx * p[0] / p[2] + k.cx, k.fy * p[1] / p[2] + k.cy])
        return np.array([k.fx * p[0] + k.cx, k.fy * p[1] + k.cy])


def _check_bounds(k: Intrinsics, us, vs):
    if np.any(us < 0) or np.any(us > k.width) or np.any(vs < 0) or np.any(vs > k.height):
        raise DomainError("pixel coordinate outside image bounds")


def pixel_to_ray_perspective(cam: CameraModel, u: float, v: float) -> Ray:
    """Ray through pixel (u, v): origin at the camera center, direction
    R @ ((u-cx)/fx, (v-cy)/fy, 1) normalized."""
    if cam.projection is not Projection.PERSPECTIVE:
        raise ConfigError("camera is not perspective")
    _check_bounds(cam.intrinsics, np.asarray(u), np.asarray(v))
    k = cam.intrinsics
    d = np.array([(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0])
    d = cam.pose.rotation @ d
    return Ray(cam.pose.translation.copy(), d / np.linalg.norm(d))


def pixel_to_ray_orthographic(cam: CameraModel, u: float, v: float) -> Ray:
    """Parallel ray for pixel (u, v): origin offset in the image plane by
    ((u-cx)/fx, (v-cy)/fy, 0), direction R @ (0, 0, 1)."""
    if cam.projection is not Projection.ORTHOGRAPHIC:
        raise ConfigError("camera is not orthographic")
    _check_bounds(cam.intrinsics, np.asarray(u), np.asarray(v))
    k = cam.intrinsics
    o = cam.pose.translation + cam.pose.rotation @ np.array(
        [(u - k.cx) / k.fx, (v - k.cy) / k.fy, 0.0]
    )
    return Ray(o, cam.pose.rotation[:, 2].copy())


# ---------------------------------------------------------------------------
# Pose manifest: JSON listing per-image camera-to-world transforms plus the
# shared intrinsics block. Field names are part of the on-disk contract.
# ---------------------------------------------------------------------------


def write_pose_manifest(path, frames, intrinsics: Intrinsics):
    """Write a manifest; frames is a list of (file_path, RigidPose)."""
    doc = {
        "frames": [
            {"file_path": str(name), "transform_3x4": pose.matrix_3x4().tolist()}
            for name, pose in frames
        ],
        "intrinsics": {
            "fx": intrinsics.fx,
            "fy": intrinsics.fy,
            "cx": intrinsics.cx,
            "cy": intrinsics.cy,
            "width": intrinsics.width,
            "height": intrinsics.height,
        },
    }
    try:
        Path(path).write_text(json.dumps(doc, indent=2))
    except OSError as e:
        raise IOFailure(f"cannot write pose manifest {path}: {e}") from e


def read_pose_manifest(path):
    """Read a manifest; returns (frames, Intrinsics) with frames as
    (file_path, RigidPose) tuples."""
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as e:
        raise IOFailure(f"cannot read pose manifest {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed pose manifest {path}: {e}") from e
    try:
        k = doc["intrinsics"]
        intr = Intrinsics(k["fx"], k["fy"], k["cx"], k["cy"], int(k["width"]), int(k["height"]))
        frames = [
            (f["file_path"], RigidPose.from_matrix_3x4(np.array(f["transform_3x4"])))
            for f in doc["frames"]
        ]
    except (KeyError, TypeError) as e:
        raise ConfigError(f"pose manifest {path} missing field: {e}") from e
    return frames, intr
