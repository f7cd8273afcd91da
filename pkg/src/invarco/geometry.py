"""SE(3) pose algebra, pinhole projection and hemisphere camera sampling.

Conventions: poses are camera-to-world (or frame-to-world) rigid transforms.
The camera looks along its +z axis, +x is image-right, +y is image-down,
and image coordinates (u, v) are normalized to [0, 1] with v growing
downward. Cameras always aim at the workspace center with world-z up.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import BehindCameraError, DegenerateSceneError, InvalidInputError

WORKSPACE_CENTER = np.zeros(3)

_ORTHO_TOL = 1e-9


def _orthonormalize(r: np.ndarray) -> np.ndarray:
    """Project a near-rotation onto SO(3) via SVD."""
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] = -u[:, -1]
        out = u @ vt
    return out


@dataclass(frozen=True)
class Pose:
    """Rigid transform: x_world = rotation @ x_local + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not (np.isfinite(r).all() and np.isfinite(t).all()):
            raise InvalidInputError("pose contains non-finite values")
        drift = np.linalg.norm(r.T @ r - np.eye(3))
        if drift > _ORTHO_TOL or np.linalg.det(r) < 0:
            r = _orthonormalize(r)
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=float).reshape(4, 4)
        return Pose(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def apply(self, p: np.ndarray) -> np.ndarray:
        """Map local-frame points (..., 3) into the world frame."""
        p = np.asarray(p, dtype=float)
        return p @ self.rotation.T + self.translation

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return np.allclose(self.rotation, other.rotation, atol=atol) and np.allclose(
            self.translation, other.translation, atol=atol
        )


def compose(a: Pose, b: Pose) -> Pose:
    """Apply b, then a."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def relative_pose(e_k: Pose, e_l: Pose) -> Pose:
    """Transform of frame l expressed in frame k."""
    return compose(e_k.inverse(), e_l)


def rot_x(angle: float) -> Pose:
    c, s = math.cos(angle), math.sin(angle)
    return Pose(np.array([[1, 0, 0], [0, c, -s], [0, s, c]]), np.zeros(3))


def rot_z(angle: float) -> Pose:
    c, s = math.cos(angle), math.sin(angle)
    return Pose(np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]]), np.zeros(3))


def translate(x: float, y: float, z: float) -> Pose:
    return Pose(np.eye(3), np.array([x, y, z], dtype=float))


def translation_scale(extrinsics) -> float:
    """Per-scene normalization: mean distance of camera positions from their centroid."""
    poses = list(extrinsics)
    if len(poses) < 2:
        raise InvalidInputError("translation_scale needs at least 2 poses")
    positions = np.stack([p.translation for p in poses])
    centroid = positions.mean(axis=0)
    z = float(np.linalg.norm(positions - centroid, axis=1).mean())
    if z < 1e-9:
        raise DegenerateSceneError("all cameras coincide; no translation scale")
    return z


@dataclass(frozen=True)
class PoseTarget:
    """Flattened relative rotation (row-major) plus scale-normalized translation."""

    vector: np.ndarray  # 12 values

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=float).reshape(12)
        r = v[:9].reshape(3, 3)
        if np.linalg.norm(r.T @ r - np.eye(3)) > 1e-6:
            raise InvalidInputError("rotation block of pose target is not orthonormal")
        v.flags.writeable = False
        object.__setattr__(self, "vector", v)

    @property
    def rotation_block(self) -> np.ndarray:
        return self.vector[:9].reshape(3, 3)

    @property
    def translation_block(self) -> np.ndarray:
        return self.vector[9:]


def pose_target(rel: Pose, z: float) -> PoseTarget:
    if z <= 0:
        raise InvalidInputError(f"normalization scale must be positive, got {z}")
    return PoseTarget(np.concatenate([rel.rotation.reshape(9), rel.translation / z]))


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; extrinsics are camera-to-world."""

    extrinsics: Pose
    fov: float = math.radians(55.0)  # vertical, radians
    width: int = 48
    height: int = 48

    def __post_init__(self):
        if not 0 < self.fov < math.pi:
            raise InvalidInputError(f"fov out of range: {self.fov}")
        if self.width < 8 or self.height < 8:
            raise InvalidInputError("image size must be at least 8x8")

    @property
    def position(self) -> np.ndarray:
        return self.extrinsics.translation


def project(p: np.ndarray, cam: Camera):
    """Project world point(s) to normalized (u, v) in [0,1]^2 plus depth.

    Accepts a single 3-vector or an (n, 3) array; returns (uv, depth) with
    matching leading shape. Raises if any point is at or behind the camera.
    """
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    pts = np.atleast_2d(p)
    inv = cam.extrinsics.inverse()
    local = pts @ inv.rotation.T + inv.translation
    depth = local[:, 2]
    if np.any(depth <= 1e-6):
        raise BehindCameraError("point at or behind the camera plane")
    half_h = math.tan(cam.fov / 2.0)
    aspect = cam.width / cam.height
    u = 0.5 + local[:, 0] / (2.0 * depth * half_h * aspect)
    v = 0.5 + local[:, 1] / (2.0 * depth * half_h)
    uv = np.stack([u, v], axis=1)
    if single:
        return uv[0], float(depth[0])
    return uv, depth


def look_at(position: np.ndarray, target: np.ndarray = WORKSPACE_CENTER) -> Pose:
    """Camera-to-world pose aiming at target, world-z up, roll fixed."""
    position = np.asarray(position, dtype=float)
    forward = np.asarray(target, dtype=float) - position
    norm = np.linalg.norm(forward)
    if norm < 1e-9:
        raise InvalidInputError("camera position coincides with its target")
    forward = forward / norm
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, up)
    rnorm = np.linalg.norm(right)
    if rnorm < 1e-9:
        # straight-down view; pick +x as image-right
        right = np.array([1.0, 0.0, 0.0])
    else:
        right = right / rnorm
    down = np.cross(forward, right)
    return Pose(np.stack([right, down, forward], axis=1), position)


class PerturbationRegime(enum.Enum):
    NOMINAL = "nominal"
    ROT30 = "rot30"
    ROT60_TRANSLATE = "rot60_translate"
    UNIFORM_HEMISPHERE = "uniform_hemisphere"


def sample_camera(rng: np.random.Generator, regime: PerturbationRegime, base: Camera) -> Camera:
    """Perturb a base camera per the evaluation regime, re-aiming at the center.

    ROT30/ROT60 rotate the camera position about the workspace-center vertical
    axis by the signed angle; ROT60 additionally offsets the camera laterally
    by 0.3 units. UNIFORM_HEMISPHERE resamples the position outright.
    """
    if regime is PerturbationRegime.NOMINAL:
        return base
    if regime is PerturbationRegime.UNIFORM_HEMISPHERE:
        azimuth = rng.uniform(0.0, 2.0 * math.pi)
        elevation = rng.uniform(math.radians(15.0), math.radians(80.0))
        radius = rng.uniform(1.5, 3.0)
        return _camera_on_hemisphere(azimuth, elevation, radius, base)

    position = base.position.copy()
    if regime is PerturbationRegime.ROT30:
        angle = math.radians(30.0) * rng.choice([-1.0, 1.0])
    elif regime is PerturbationRegime.ROT60_TRANSLATE:
        angle = math.radians(60.0) * rng.choice([-1.0, 1.0])
    else:
        raise InvalidInputError(f"unknown regime: {regime}")
    position = rot_z(angle).apply(position)
    if regime is PerturbationRegime.ROT60_TRANSLATE:
        toward = WORKSPACE_CENTER - position
        lateral = np.cross(toward, np.array([0.0, 0.0, 1.0]))
        lateral = lateral / max(np.linalg.norm(lateral), 1e-9)
        position = position + 0.3 * lateral * rng.choice([-1.0, 1.0])
    return Camera(look_at(position), base.fov, base.width, base.height)


def _camera_on_hemisphere(azimuth: float, elevation: float, radius: float, base: Camera) -> Camera:
    position = np.array(
        [
            radius * math.cos(elevation) * math.cos(azimuth),
            radius * math.cos(elevation) * math.sin(azimuth),
            radius * math.sin(elevation),
        ]
    )
    return Camera(look_at(position), base.fov, base.width, base.height)


def camera_at(azimuth: float, elevation: float = math.radians(40.0), radius: float = 2.2,
              width: int = 48, height: int = 48) -> Camera:
    """Canonical camera on the viewing hemisphere, aimed at the workspace center."""
    return _camera_on_hemisphere(azimuth, elevation, radius, Camera(Pose.identity(), width=width, height=height))
