"""Deterministic quasistatic tabletop world.

State, delta-Cartesian dynamics, a painter's-algorithm software renderer,
ground-truth bounding boxes, a scripted expert, and success checks. The
workspace is [-1, 1] x [-1, 1] on the table plane with z in [0, 0.6].
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import BehindCameraError, CorruptBlobError, InvalidActionError, InvalidInputError
from .geometry import Camera, project

WORKSPACE_LO = np.array([-1.0, -1.0, 0.0])
WORKSPACE_HI = np.array([1.0, 1.0, 0.6])

TRANS_LIMIT = 0.05
ROT_LIMIT = 0.1

GRASP_XY = 0.05
GRASP_Z = 0.08
SUCCESS_RADIUS = 0.08

OBJECT_RADIUS = 0.05
CONTAINER_RADIUS = 0.1
EE_MARKER_RADIUS = 0.06

MIN_CLUTTER_CLEARANCE = 0.15


class GoalKind(enum.IntEnum):
    PLACE_IN_CONTAINER = 0
    REACH_TARGET = 1


@dataclass(frozen=True)
class Goal:
    kind: GoalKind

    def one_hot(self) -> np.ndarray:
        v = np.zeros(len(GoalKind))
        v[int(self.kind)] = 1.0
        return v


@dataclass(frozen=True)
class SceneState:
    ee_position: np.ndarray  # 3-vector
    ee_yaw: float
    gripper_closed: bool
    object_position: np.ndarray  # 2-vector on the table plane
    object_attached: bool
    container_position: np.ndarray  # 2-vector
    object_color: tuple = (0.9, 0.25, 0.2)
    container_color: tuple = (0.2, 0.4, 0.9)

    def __post_init__(self):
        object.__setattr__(self, "ee_position", _frozen(self.ee_position, 3))
        object.__setattr__(self, "object_position", _frozen(self.object_position, 2))
        object.__setattr__(self, "container_position", _frozen(self.container_position, 2))

    def proprio(self) -> np.ndarray:
        """Low-dimensional end-effector readout fed to the policy conditioner."""
        return np.concatenate(
            [self.ee_position, [self.ee_yaw, 1.0 if self.gripper_closed else -1.0]]
        )


def _frozen(v, n):
    v = np.asarray(v, dtype=float).reshape(n)
    v.flags.writeable = False
    return v


@dataclass(frozen=True)
class LightingParams:
    intensity: float = 1.0
    tint: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if not 0.4 <= self.intensity <= 1.6:
            raise InvalidInputError(f"intensity out of [0.4, 1.6]: {self.intensity}")
        if any(not 0.7 <= g <= 1.3 for g in self.tint):
            raise InvalidInputError(f"tint gains out of [0.7, 1.3]: {self.tint}")


@dataclass(frozen=True)
class Distractor:
    position: np.ndarray  # 2-vector
    radius: float
    color: tuple

    def __post_init__(self):
        object.__setattr__(self, "position", _frozen(self.position, 2))
        if not 0.03 <= self.radius <= 0.12:
            raise InvalidInputError(f"distractor radius out of [0.03, 0.12]: {self.radius}")


@dataclass(frozen=True)
class ClutterSet:
    distractors: tuple = ()

    def __len__(self):
        return len(self.distractors)


@dataclass(frozen=True)
class ObservationConfig:
    camera: Camera
    lighting: LightingParams
    clutter: ClutterSet


@dataclass(frozen=True)
class Action:
    """7-vector: xyz deltas, Euler deltas, gripper command in [-1, 1]."""

    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=float).reshape(7)
        if not np.isfinite(v).all():
            raise InvalidActionError("action contains non-finite components")
        v.flags.writeable = False
        object.__setattr__(self, "vector", v)

    @property
    def translation(self) -> np.ndarray:
        return np.clip(self.vector[:3], -TRANS_LIMIT, TRANS_LIMIT)

    @property
    def rotation(self) -> np.ndarray:
        return np.clip(self.vector[3:6], -ROT_LIMIT, ROT_LIMIT)

    @property
    def gripper(self) -> float:
        return float(np.clip(self.vector[6], -1.0, 1.0))


ZERO_ACTION = Action(np.zeros(7))


def step(state: SceneState, action: Action) -> SceneState:
    """Advance the quasistatic dynamics by one clipped delta action."""
    ee = np.clip(state.ee_position + action.translation, WORKSPACE_LO, WORKSPACE_HI)
    yaw = state.ee_yaw + action.rotation[2]
    close = action.gripper >= 0.0

    attached = state.object_attached
    obj = np.array(state.object_position)
    if not close:
        attached = False
    elif not attached:
        near_xy = np.linalg.norm(obj - ee[:2]) <= GRASP_XY
        near_z = ee[2] <= GRASP_Z
        if near_xy and near_z:
            attached = True
    if attached:
        obj = ee[:2].copy()
    return replace(
        state,
        ee_position=ee,
        ee_yaw=yaw,
        gripper_closed=close,
        object_position=obj,
        object_attached=attached,
    )


def is_success(state: SceneState, goal: Goal) -> bool:
    if goal.kind is GoalKind.PLACE_IN_CONTAINER:
        placed = np.linalg.norm(state.object_position - state.container_position) <= SUCCESS_RADIUS
        return bool(placed and not state.object_attached)
    return bool(np.linalg.norm(state.ee_position[:2] - state.container_position) <= SUCCESS_RADIUS)


# --- scripted expert ---------------------------------------------------------

HOVER_Z = 0.25
GRASP_HEIGHT = 0.05
EXPERT_GAIN = 0.8
EXPERT_NOISE = 0.005
ALIGN_XY = 0.03


def expert_action(state: SceneState, goal: Goal, rng: np.random.Generator) -> Action:
    """Phase controller standing in for teleoperated demonstrations."""
    if goal.kind is GoalKind.REACH_TARGET:
        target = np.array([*state.container_position, HOVER_Z])
        grip = -1.0
    elif not state.object_attached:
        above = np.linalg.norm(state.object_position - state.ee_position[:2]) <= ALIGN_XY
        if not above:
            target = np.array([*state.object_position, HOVER_Z])
            grip = -1.0
        else:
            # descend; close once within grasp range
            target = np.array([*state.object_position, GRASP_HEIGHT])
            grip = 1.0 if state.ee_position[2] <= GRASP_Z else -1.0
    else:
        over_container = (
            np.linalg.norm(state.container_position - state.ee_position[:2]) <= ALIGN_XY + 0.01
        )
        if state.ee_position[2] < HOVER_Z - 0.02 and not over_container:
            target = np.array([*state.ee_position[:2], HOVER_Z])  # lift first
            grip = 1.0
        elif not over_container:
            target = np.array([*state.container_position, HOVER_Z])
            grip = 1.0
        else:
            target = np.array([*state.container_position, HOVER_Z])
            grip = -1.0  # release over the container
    delta = EXPERT_GAIN * (target - state.ee_position)
    delta = np.clip(delta, -TRANS_LIMIT, TRANS_LIMIT)
    delta = delta + rng.uniform(-EXPERT_NOISE, EXPERT_NOISE, size=3)
    return Action(np.array([*delta, 0.0, 0.0, 0.0, grip]))


def sample_scene(rng: np.random.Generator, n_distractors: int = 0):
    """Random (state, goal, clutter) with object and container well separated."""
    if n_distractors < 0:
        raise InvalidInputError("n_distractors must be >= 0")
    while True:
        obj = rng.uniform(-0.7, 0.7, size=2)
        container = rng.uniform(-0.7, 0.7, size=2)
        if np.linalg.norm(obj - container) >= 0.3:
            break
    ee = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(0.2, 0.4)])
    state = SceneState(
        ee_position=ee,
        ee_yaw=rng.uniform(-math.pi, math.pi),
        gripper_closed=False,
        object_position=obj,
        object_attached=False,
        container_position=container,
        object_color=tuple(rng.uniform(0.6, 1.0, size=3)),
        container_color=tuple(rng.uniform(0.1, 0.6, size=3)),
    )
    goal = Goal(GoalKind(int(rng.integers(len(GoalKind)))))
    clutter = sample_clutter(rng, n_distractors, state)
    return state, goal, clutter


def sample_clutter(rng: np.random.Generator, n: int, state: SceneState) -> ClutterSet:
    """Distractors kept clear of the object and container so task semantics hold."""
    out = []
    attempts = 0
    while len(out) < n and attempts < 1000:
        attempts += 1
        pos = rng.uniform(-0.9, 0.9, size=2)
        if np.linalg.norm(pos - state.object_position) < MIN_CLUTTER_CLEARANCE:
            continue
        if np.linalg.norm(pos - state.container_position) < MIN_CLUTTER_CLEARANCE:
            continue
        out.append(
            Distractor(pos, float(rng.uniform(0.03, 0.12)), tuple(rng.uniform(0.2, 1.0, size=3)))
        )
    return ClutterSet(tuple(out))


def sample_lighting(rng: np.random.Generator, randomized: bool = True) -> LightingParams:
    if not randomized:
        return LightingParams()
    return LightingParams(
        intensity=float(rng.uniform(0.4, 1.6)),
        tint=tuple(rng.uniform(0.7, 1.3, size=3)),
    )


# --- rendering ---------------------------------------------------------------

TABLE_COLOR = np.array([0.45, 0.42, 0.36])
BACKGROUND_COLOR = np.array([0.08, 0.09, 0.12])
EE_COLOR = np.array([0.85, 0.85, 0.9])
EE_TICK_COLOR = np.array([0.1, 0.1, 0.1])

# world-units-to-pixels factor: entity of radius r at depth d spans
# r / (d * tan(fov/2)) of the image half-height
def _pixel_radius(radius: float, depth: float, cam: Camera) -> float:
    return radius / (depth * math.tan(cam.fov / 2.0)) * cam.height / 2.0


@dataclass(frozen=True)
class Image:
    """8-bit RGB raster, row-major."""

    pixels: np.ndarray  # (height, width, 3) uint8

    def __post_init__(self):
        p = np.asarray(self.pixels)
        if p.ndim != 3 or p.shape[2] != 3 or p.dtype != np.uint8:
            raise InvalidInputError("image must be (h, w, 3) uint8")
        p.flags.writeable = False
        object.__setattr__(self, "pixels", p)

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    def as_float(self) -> np.ndarray:
        return self.pixels.astype(np.float64) / 255.0


def render(state: SceneState, config: ObservationConfig) -> Image:
    """Deterministic painter's-algorithm raster of the scene."""
    cam = config.camera
    h, w = cam.height, cam.width
    # behind-camera guard: the workspace center must project
    project(np.zeros(3), cam)

    img = np.empty((h, w, 3), dtype=np.float64)
    _paint_table(img, cam)

    objects = []  # (depth, center3, radius, color, kind)
    objects.append(
        (np.array([*state.container_position, 0.005]), CONTAINER_RADIUS, state.container_color, "disc")
    )
    for d in config.clutter.distractors:
        objects.append((np.array([*d.position, 0.01]), d.radius, d.color, "disc"))
    obj_z = state.ee_position[2] if state.object_attached else 0.02
    objects.append((np.array([*state.object_position, obj_z]), OBJECT_RADIUS, state.object_color, "disc"))
    objects.append((state.ee_position, EE_MARKER_RADIUS, tuple(EE_COLOR), "ee"))

    drawable = []
    for center, radius, color, kind in objects:
        try:
            uv, depth = project(center, cam)
        except BehindCameraError:
            continue
        drawable.append((depth, uv, radius, color, kind, center))
    drawable.sort(key=lambda item: -item[0])  # far to near

    ui, vi = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    for depth, uv, radius, color, kind, center in drawable:
        px = _pixel_radius(radius, depth, cam)
        cx, cy = uv[0] * w, uv[1] * h
        d2 = (ui - cx) ** 2 + (vi - cy) ** 2
        if kind == "disc":
            mask = d2 <= px * px
            img[mask] = color
        else:  # ee: square marker with a yaw tick
            mask = (np.abs(ui - cx) <= px) & (np.abs(vi - cy) <= px)
            img[mask] = color
            tick_dir = np.array([math.cos(state.ee_yaw), math.sin(state.ee_yaw), 0.0])
            try:
                tip_uv, _ = project(center + tick_dir * radius, cam)
                tx, ty = tip_uv[0] * w, tip_uv[1] * h
                tmask = (ui - tx) ** 2 + (vi - ty) ** 2 <= (px * 0.45) ** 2
                img[tmask] = EE_TICK_COLOR
            except BehindCameraError:
                pass

    light = config.lighting
    img *= light.intensity
    img *= np.asarray(light.tint)
    np.clip(img, 0.0, 1.0, out=img)
    return Image((img * 255.0).round().astype(np.uint8))


def _paint_table(img: np.ndarray, cam: Camera):
    """Background: table color where the view ray hits the tabletop square."""
    h, w = img.shape[:2]
    half_h = math.tan(cam.fov / 2.0)
    aspect = w / h
    u = (np.arange(w) + 0.5) / w
    v = (np.arange(h) + 0.5) / h
    uu, vv = np.meshgrid(u, v)
    dirs_local = np.stack(
        [(uu - 0.5) * 2.0 * half_h * aspect, (vv - 0.5) * 2.0 * half_h, np.ones_like(uu)], axis=-1
    )
    rot = cam.extrinsics.rotation
    dirs_world = dirs_local @ rot.T
    origin = cam.position
    dz = dirs_world[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -origin[2] / dz
    hit_x = origin[0] + t * dirs_world[..., 0]
    hit_y = origin[1] + t * dirs_world[..., 1]
    on_table = (t > 0) & (np.abs(hit_x) <= 1.0) & (np.abs(hit_y) <= 1.0)
    img[...] = BACKGROUND_COLOR
    img[on_table] = TABLE_COLOR


def ground_truth_bboxes(state: SceneState, config: ObservationConfig):
    """Normalized (cx, cy, w, h) for the object then the container.

    Returns (boxes: 8-vector, visible: (bool, bool)). Off-screen or
    behind-camera entities yield an all-zero box and a False flag.
    """
    obj_z = state.ee_position[2] if state.object_attached else 0.02
    entities = [
        (np.array([*state.object_position, obj_z]), OBJECT_RADIUS),
        (np.array([*state.container_position, 0.005]), CONTAINER_RADIUS),
    ]
    boxes = np.zeros(8)
    visible = []
    for idx, (center, radius) in enumerate(entities):
        try:
            uv, depth = project(center, config.camera)
        except BehindCameraError:
            visible.append(False)
            continue
        px = _pixel_radius(radius, depth, config.camera)
        half_u = px / config.camera.width
        half_v = px / config.camera.height
        lo_u, hi_u = uv[0] - half_u, uv[0] + half_u
        lo_v, hi_v = uv[1] - half_v, uv[1] + half_v
        # clip to image bounds
        lo_u, hi_u = max(lo_u, 0.0), min(hi_u, 1.0)
        lo_v, hi_v = max(lo_v, 0.0), min(hi_v, 1.0)
        if hi_u <= lo_u or hi_v <= lo_v:
            visible.append(False)
            continue
        boxes[4 * idx : 4 * idx + 4] = [
            (lo_u + hi_u) / 2.0,
            (lo_v + hi_v) / 2.0,
            hi_u - lo_u,
            hi_v - lo_v,
        ]
        visible.append(True)
    return boxes, tuple(visible)


# --- observation blob format -------------------------------------------------

QSOB_MAGIC = b"QSOB"


def encode_image(img: Image) -> bytes:
    header = QSOB_MAGIC + struct.pack("<HHB", img.width, img.height, 3)
    return header + img.pixels.tobytes()


def decode_image(blob: bytes) -> Image:
    if len(blob) < 9 or blob[:4] != QSOB_MAGIC:
        raise CorruptBlobError("bad image blob header")
    width, height, channels = struct.unpack("<HHB", blob[4:9])
    if channels != 3:
        raise CorruptBlobError(f"unsupported channel count: {channels}")
    expected = width * height * 3
    payload = blob[9:]
    if len(payload) != expected:
        raise CorruptBlobError(f"blob payload length {len(payload)} != {expected}")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return Image(pixels.copy())
