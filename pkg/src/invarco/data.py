"""Multi-view demonstration and static datasets.

Collection rolls out the scripted expert (demos) or freezes sampled states
(static clusters), rendering each timestep under several observation
configurations. Storage is a JSON manifest plus QSOB image blobs. Sampling
implements the positive/negative pair rule and batch composition used by
the co-training loss.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    CrossKindError,
    DatasetVersionError,
    EmptySourceError,
    GenerationFailedError,
    InvalidInputError,
    MissingBlobError,
)
from . import world as W
from .geometry import (
    Camera,
    PerturbationRegime,
    Pose,
    camera_at,
    pose_target,
    relative_pose,
    sample_camera,
    translation_scale,
)

MANIFEST_VERSION = 1

DEMO_AZIMUTHS = tuple(math.radians(a) for a in (0.0, 90.0, 180.0, 270.0))
CAMERA_SET_RESAMPLE_EVERY = 10
MAX_EPISODE_STEPS = 120
CHUNK_LEN = 8


@dataclass(frozen=True)
class ObservationRecord:
    record_id: int
    image: W.Image
    config: W.ObservationConfig
    bboxes: np.ndarray  # 8-vector
    visible: tuple  # (object, container)
    scene_id: int
    timestep: int
    view_index: int


@dataclass
class DemoTrajectory:
    traj_id: int
    goal: W.Goal
    states: list  # T+1 SceneStates (initial through final)
    actions: list  # T Actions
    observations: list  # per timestep t in [0, T): list of ObservationRecord

    @property
    def length(self):
        return len(self.actions)

    def camera_poses(self):
        seen = {}
        for obs_set in self.observations:
            for rec in obs_set:
                key = tuple(np.round(rec.config.camera.extrinsics.translation, 12))
                seen[key] = rec.config.camera.extrinsics
        return list(seen.values())

    @property
    def translation_z(self) -> float:
        if not hasattr(self, "_z"):
            self._z = translation_scale(self.camera_poses())
        return self._z

    def action_chunk(self, t: int) -> np.ndarray:
        """CHUNK_LEN actions starting at t, padded by repeating the last action."""
        chunk = []
        for i in range(t, t + CHUNK_LEN):
            chunk.append(self.actions[min(i, self.length - 1)].vector)
        return np.stack(chunk)


@dataclass
class StaticCluster:
    scene_id: int
    goal: W.Goal
    state: W.SceneState
    records: list  # ObservationRecord under distinct configs

    @property
    def translation_z(self) -> float:
        if not hasattr(self, "_z"):
            self._z = translation_scale([r.config.camera.extrinsics for r in self.records])
        return self._z


@dataclass
class DemoDataset:
    trajectories: list = field(default_factory=list)

    def __len__(self):
        return len(self.trajectories)

    def all_records(self):
        for traj in self.trajectories:
            for obs_set in traj.observations:
                yield traj, obs_set


@dataclass
class StaticDataset:
    clusters: list = field(default_factory=list)

    def __len__(self):
        return len(self.clusters)


@dataclass
class Dataset:
    demo: DemoDataset = field(default_factory=DemoDataset)
    static: StaticDataset = field(default_factory=StaticDataset)
    seed: int | None = None
    image_size: int = 48

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        a, ablobs = to_manifest(self)
        b, bblobs = to_manifest(other)
        return a == b and ablobs == bblobs


# --- pair rule ---------------------------------------------------------------


class PairLabel(enum.Enum):
    DEMO_POSITIVE = "demo_positive"
    DEMO_NEGATIVE = "demo_negative"
    STATIC_POSITIVE = "static_positive"
    STATIC_NEGATIVE = "static_negative"

    @property
    def is_positive(self):
        return self in (PairLabel.DEMO_POSITIVE, PairLabel.STATIC_POSITIVE)


def classify_pair(a, b, epsilon: int = 3) -> PairLabel:
    """Label a pair of (kind, trajectory/scene id, timestep) index triples.

    Demo pairs are positive when they come from the same trajectory within
    `epsilon` timesteps; static pairs when they share a cluster. Pairs across
    dataset kinds are rejected.
    """
    kind_a, m, i = a
    kind_b, n, j = b
    if epsilon < 1:
        raise InvalidInputError("epsilon must be >= 1")
    if kind_a != kind_b:
        raise CrossKindError(f"cannot pair {kind_a} with {kind_b}")
    if kind_a == "demo":
        if m == n and abs(i - j) < epsilon:
            return PairLabel.DEMO_POSITIVE
        return PairLabel.DEMO_NEGATIVE
    if kind_a == "static":
        return PairLabel.STATIC_POSITIVE if m == n else PairLabel.STATIC_NEGATIVE
    raise InvalidInputError(f"unknown dataset kind: {kind_a}")


# --- collection --------------------------------------------------------------


def _demo_camera_set(rng, views_per_step: int, regime: PerturbationRegime,
                     image_size: int) -> list:
    """One camera per view slot, cycling the canonical azimuth ring."""
    order = rng.permutation(len(DEMO_AZIMUTHS))
    cams = []
    for v in range(views_per_step):
        base = camera_at(DEMO_AZIMUTHS[order[v % len(order)]],
                         width=image_size, height=image_size)
        cams.append(sample_camera(rng, regime, base))
    return cams


def _rollout_expert(rng, state, goal, max_steps=MAX_EPISODE_STEPS):
    states = [state]
    actions = []
    for _ in range(max_steps):
        a = W.expert_action(state, goal, rng)
        state = W.step(state, a)
        states.append(state)
        actions.append(a)
        if W.is_success(state, goal):
            return states, actions, True
    return states, actions, False


def collect_demos(rng: np.random.Generator, n_trajectories: int, views_per_step: int = 3,
                  camera_regime: PerturbationRegime = PerturbationRegime.NOMINAL,
                  n_distractors: int = 0, lighting_variation: bool = True,
                  image_size: int = 48, _id_start: int = 0) -> DemoDataset:
    """Expert rollouts rendered from a per-block camera set.

    The camera set is resampled every CAMERA_SET_RESAMPLE_EVERY trajectories.
    Only successful episodes are retained; an expert failure rate above 20%
    aborts generation.
    """
    if n_trajectories < 1 or views_per_step < 1:
        raise InvalidInputError("need n_trajectories >= 1 and views_per_step >= 1")
    dataset = DemoDataset()
    next_record = _id_start
    cameras = None
    failures = 0
    attempts = 0
    while len(dataset.trajectories) < n_trajectories:
        idx = len(dataset.trajectories)
        if idx % CAMERA_SET_RESAMPLE_EVERY == 0 and attempts == idx + failures:
            cameras = _demo_camera_set(rng, views_per_step, camera_regime, image_size)
        attempts += 1
        state, goal, _ = W.sample_scene(rng, 0)
        states, actions, ok = _rollout_expert(rng, state, goal)
        if not ok:
            failures += 1
            if attempts >= 10 and failures / attempts > 0.2:
                raise GenerationFailedError(
                    f"expert failed {failures}/{attempts} episodes; dynamics or expert broken"
                )
            continue
        clutters = [W.sample_clutter(rng, n_distractors, state) for _ in range(views_per_step)]
        observations = []
        for t in range(len(actions)):
            obs_set = []
            for v, cam in enumerate(cameras):
                cfg = W.ObservationConfig(cam, W.sample_lighting(rng, lighting_variation),
                                          clutters[v])
                img = W.render(states[t], cfg)
                boxes, visible = W.ground_truth_bboxes(states[t], cfg)
                obs_set.append(
                    ObservationRecord(next_record, img, cfg, boxes, visible, idx, t, v)
                )
                next_record += 1
            observations.append(obs_set)
        dataset.trajectories.append(DemoTrajectory(idx, goal, states, actions, observations))
    return dataset


def collect_static(rng: np.random.Generator, n_scenes: int, views_per_state: int = 10,
                   lighting_variation: bool = True, clutter_counts=(0, 1, 3),
                   camera_regime: PerturbationRegime = PerturbationRegime.UNIFORM_HEMISPHERE,
                   image_size: int = 48, _id_start: int = 1_000_000) -> StaticDataset:
    """Frozen mid-trajectory states rendered under independently sampled configs."""
    if n_scenes < 1:
        raise InvalidInputError("n_scenes must be >= 1")
    if views_per_state < 2:
        raise InvalidInputError("views_per_state must be >= 2")
    dataset = StaticDataset()
    next_record = _id_start
    base = camera_at(0.0, width=image_size, height=image_size)
    for scene_id in range(n_scenes):
        state, goal, _ = W.sample_scene(rng, 0)
        # freeze a mid-trajectory state so clusters cover the task manifold
        n_steps = int(rng.integers(0, 80))
        for _ in range(n_steps):
            state = W.step(state, W.expert_action(state, goal, rng))
            if W.is_success(state, goal):
                break
        records = []
        for v in range(views_per_state):
            cam = sample_camera(rng, camera_regime, base)
            clutter = W.sample_clutter(rng, int(rng.choice(clutter_counts)), state)
            cfg = W.ObservationConfig(cam, W.sample_lighting(rng, lighting_variation), clutter)
            img = W.render(state, cfg)
            boxes, visible = W.ground_truth_bboxes(state, cfg)
            records.append(
                ObservationRecord(next_record, img, cfg, boxes, visible, scene_id, 0, v)
            )
            next_record += 1
        dataset.clusters.append(StaticCluster(scene_id, goal, state, records))
    return dataset


# --- batch sampling ----------------------------------------------------------


@dataclass(frozen=True)
class SamplerConfig:
    in_task_probability: float = 0.5
    epsilon: int = 3
    batch_size: int = 32
    n_pos_pairs: int = 16
    n_neg_pairs: int = 16
    n_ext_pairs: int = 8
    n_bbox_items: int = 16

    def __post_init__(self):
        if not 0.0 <= self.in_task_probability <= 1.0:
            raise InvalidInputError("in_task_probability must lie in [0, 1]")
        if self.epsilon < 1:
            raise InvalidInputError("epsilon must be >= 1")


@dataclass(frozen=True)
class BCItem:
    image: W.Image
    goal: W.Goal
    proprio: np.ndarray
    chunk: np.ndarray  # (CHUNK_LEN, 7)


@dataclass(frozen=True)
class AlignPair:
    image_a: W.Image
    goal_a: W.Goal
    image_b: W.Image
    goal_b: W.Goal
    label: PairLabel
    index_a: tuple = None
    index_b: tuple = None


@dataclass(frozen=True)
class ExtPair:
    image_a: W.Image
    image_b: W.Image
    goal: W.Goal
    target: np.ndarray  # 12-vector pose target


@dataclass(frozen=True)
class BBoxItem:
    image: W.Image
    goal: W.Goal
    target: np.ndarray  # 8-vector
    coord_mask: np.ndarray  # 8 bools


@dataclass
class TrainingBatch:
    bc_items: list = field(default_factory=list)
    align_pairs: list = field(default_factory=list)
    ext_pairs: list = field(default_factory=list)
    bbox_items: list = field(default_factory=list)


def _pick_record(rng, records):
    return records[int(rng.integers(len(records)))]


def _sample_bc_item(rng, demo: DemoDataset) -> BCItem:
    traj = demo.trajectories[int(rng.integers(len(demo.trajectories)))]
    t = int(rng.integers(traj.length))
    rec = _pick_record(rng, traj.observations[t])
    return BCItem(rec.image, traj.goal, traj.states[t].proprio(), traj.action_chunk(t))


def _demo_view(rng, traj: DemoTrajectory, t: int) -> ObservationRecord:
    return _pick_record(rng, traj.observations[t])


def _sample_align_pair(rng, demo, static, cfg: SamplerConfig, positive: bool) -> AlignPair:
    kinds = []
    if len(demo):
        kinds.append("demo")
    if len(static):
        kinds.append("static")
    if not kinds:
        raise EmptySourceError("no dataset available for alignment pairs")
    kind = kinds[int(rng.integers(len(kinds)))]
    if kind == "demo":
        trajs = demo.trajectories
        m = int(rng.integers(len(trajs)))
        ta = trajs[m]
        i = int(rng.integers(ta.length))
        if positive:
            lo = max(0, i - cfg.epsilon + 1)
            hi = min(ta.length - 1, i + cfg.epsilon - 1)
            j = int(rng.integers(lo, hi + 1))
            n = m
        else:
            in_task = rng.random() < cfg.in_task_probability
            far = [j for j in range(ta.length) if abs(i - j) >= cfg.epsilon]
            if in_task and far:
                n, j = m, far[int(rng.integers(len(far)))]
            else:
                if len(trajs) < 2:
                    raise EmptySourceError("need >= 2 trajectories for cross-task negatives")
                n = int(rng.integers(len(trajs)))
                while n == m:
                    n = int(rng.integers(len(trajs)))
                j = int(rng.integers(trajs[n].length))
        tb = trajs[n]
        ra = _demo_view(rng, ta, i)
        rb = _demo_view(rng, tb, j)
        ia, ib = ("demo", m, i), ("demo", n, j)
        ga, gb = ta.goal, tb.goal
    else:
        clusters = static.clusters
        m = int(rng.integers(len(clusters)))
        if positive:
            n = m
        else:
            if len(clusters) < 2:
                raise EmptySourceError("need >= 2 static clusters for negatives")
            same_goal = [
                k for k in range(len(clusters))
                if k != m and clusters[k].goal == clusters[m].goal
            ]
            in_task = rng.random() < cfg.in_task_probability
            if in_task and same_goal:
                n = same_goal[int(rng.integers(len(same_goal)))]
            else:
                n = int(rng.integers(len(clusters)))
                while n == m:
                    n = int(rng.integers(len(clusters)))
        ra = _pick_record(rng, clusters[m].records)
        rb = _pick_record(rng, clusters[n].records)
        if positive and rb.record_id == ra.record_id and len(clusters[m].records) > 1:
            while rb.record_id == ra.record_id:
                rb = _pick_record(rng, clusters[m].records)
        ia, ib = ("static", m, 0), ("static", n, 0)
        ga, gb = clusters[m].goal, clusters[n].goal
    label = classify_pair(ia, ib, cfg.epsilon)
    assert label.is_positive == positive
    return AlignPair(ra.image, ga, rb.image, gb, label, ia, ib)


def _sample_ext_pair(rng, demo: DemoDataset, static: StaticDataset) -> ExtPair:
    """Two views of one frozen state, with the scale-normalized relative pose."""
    sources = []
    if any(len(t.observations[0]) >= 2 for t in demo.trajectories):
        sources.append("demo")
    if any(len(c.records) >= 2 for c in static.clusters):
        sources.append("static")
    if not sources:
        raise EmptySourceError(
            "extrinsics pairs need >= 2 views of the same state in demo or static data"
        )
    kind = sources[int(rng.integers(len(sources)))]
    if kind == "demo":
        candidates = [t for t in demo.trajectories if len(t.observations[0]) >= 2]
        traj = candidates[int(rng.integers(len(candidates)))]
        t = int(rng.integers(traj.length))
        views = traj.observations[t]
        z = traj.translation_z
        goal = traj.goal
    else:
        candidates = [c for c in static.clusters if len(c.records) >= 2]
        cluster = candidates[int(rng.integers(len(candidates)))]
        views = cluster.records
        z = cluster.translation_z
        goal = cluster.goal
    k = int(rng.integers(len(views)))
    l = int(rng.integers(len(views)))
    while l == k:
        l = int(rng.integers(len(views)))
    rk, rl = views[k], views[l]
    rel = relative_pose(rk.config.camera.extrinsics, rl.config.camera.extrinsics)
    target = pose_target(rel, z)
    return ExtPair(rk.image, rl.image, goal, target.vector)


def _sample_bbox_item(rng, demo: DemoDataset, static: StaticDataset) -> BBoxItem:
    pools = []
    for traj in demo.trajectories:
        pools.append(("demo", traj))
    for cluster in static.clusters:
        pools.append(("static", cluster))
    if not pools:
        raise EmptySourceError("no records available for bbox items")
    kind, src = pools[int(rng.integers(len(pools)))]
    if kind == "demo":
        t = int(rng.integers(src.length))
        rec = _pick_record(rng, src.observations[t])
        goal = src.goal
    else:
        rec = _pick_record(rng, src.records)
        goal = src.goal
    mask = np.repeat(np.asarray(rec.visible, dtype=bool), 4)
    return BBoxItem(rec.image, goal, rec.bboxes, mask)


def sample_batch(demo: DemoDataset, static: StaticDataset, cfg: SamplerConfig,
                 rng: np.random.Generator) -> TrainingBatch:
    batch = TrainingBatch()
    if cfg.batch_size:
        if not len(demo):
            raise EmptySourceError("behavior cloning items need a demo dataset")
        batch.bc_items = [_sample_bc_item(rng, demo) for _ in range(cfg.batch_size)]
    batch.align_pairs = [
        _sample_align_pair(rng, demo, static, cfg, positive=True) for _ in range(cfg.n_pos_pairs)
    ] + [
        _sample_align_pair(rng, demo, static, cfg, positive=False) for _ in range(cfg.n_neg_pairs)
    ]
    batch.ext_pairs = [_sample_ext_pair(rng, demo, static) for _ in range(cfg.n_ext_pairs)]
    batch.bbox_items = [_sample_bbox_item(rng, demo, static) for _ in range(cfg.n_bbox_items)]
    return batch


# --- serialization -----------------------------------------------------------


def _state_to_json(s: W.SceneState) -> dict:
    return {
        "ee_position": list(s.ee_position),
        "ee_yaw": s.ee_yaw,
        "gripper_closed": s.gripper_closed,
        "object_position": list(s.object_position),
        "object_attached": s.object_attached,
        "container_position": list(s.container_position),
        "object_color": list(s.object_color),
        "container_color": list(s.container_color),
    }


def _state_from_json(d: dict) -> W.SceneState:
    return W.SceneState(
        ee_position=np.array(d["ee_position"]),
        ee_yaw=d["ee_yaw"],
        gripper_closed=d["gripper_closed"],
        object_position=np.array(d["object_position"]),
        object_attached=d["object_attached"],
        container_position=np.array(d["container_position"]),
        object_color=tuple(d["object_color"]),
        container_color=tuple(d["container_color"]),
    )


def _config_to_json(cfg: W.ObservationConfig) -> dict:
    return {
        "extrinsics": [float(x) for x in cfg.camera.extrinsics.matrix().reshape(-1)],
        "fov_rad": cfg.camera.fov,
        "width": cfg.camera.width,
        "height": cfg.camera.height,
        "lighting": {"intensity": cfg.lighting.intensity, "tint": list(cfg.lighting.tint)},
        "clutter": [
            {"position": list(d.position), "radius": d.radius, "color": list(d.color)}
            for d in cfg.clutter.distractors
        ],
    }


def _config_from_json(d: dict) -> W.ObservationConfig:
    cam = Camera(
        Pose.from_matrix(np.array(d["extrinsics"]).reshape(4, 4)),
        d["fov_rad"],
        d["width"],
        d["height"],
    )
    lighting = W.LightingParams(d["lighting"]["intensity"], tuple(d["lighting"]["tint"]))
    clutter = W.ClutterSet(
        tuple(
            W.Distractor(np.array(c["position"]), c["radius"], tuple(c["color"]))
            for c in d["clutter"]
        )
    )
    return W.ObservationConfig(cam, lighting, clutter)


def _record_entry(rec: ObservationRecord) -> dict:
    entry = _config_to_json(rec.config)
    entry.update(
        {
            "blob": f"obs_{rec.record_id:08d}.bin",
            "bbox": [float(b) for b in rec.bboxes],
            "visible": [bool(v) for v in rec.visible],
            "timestep": rec.timestep,
            "view": rec.view_index,
        }
    )
    return entry


def to_manifest(ds: Dataset):
    """Returns (manifest dict, {blob name: bytes})."""
    records = {}
    blobs = {}

    def add(rec: ObservationRecord):
        entry = _record_entry(rec)
        records[str(rec.record_id)] = entry
        blobs[entry["blob"]] = W.encode_image(rec.image)

    trajectories = []
    for traj in ds.demo.trajectories:
        for obs_set in traj.observations:
            for rec in obs_set:
                add(rec)
        trajectories.append(
            {
                "id": traj.traj_id,
                "goal": int(traj.goal.kind),
                "states": [_state_to_json(s) for s in traj.states],
                "actions": [[float(x) for x in a.vector] for a in traj.actions],
                "records": [[r.record_id for r in obs_set] for obs_set in traj.observations],
            }
        )
    clusters = []
    for cluster in ds.static.clusters:
        for rec in cluster.records:
            add(rec)
        clusters.append(
            {
                "id": cluster.scene_id,
                "goal": int(cluster.goal.kind),
                "state": _state_to_json(cluster.state),
                "records": [r.record_id for r in cluster.records],
            }
        )
    manifest = {
        "version": MANIFEST_VERSION,
        "seed": ds.seed,
        "image_size": ds.image_size,
        "trajectories": trajectories,
        "static_clusters": clusters,
        "records": records,
    }
    return manifest, blobs


def write_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    (path / "blobs").mkdir(parents=True, exist_ok=True)
    manifest, blobs = to_manifest(ds)
    for name, payload in blobs.items():
        (path / "blobs" / name).write_bytes(payload)
    (path / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))


def read_dataset(path) -> Dataset:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise MissingBlobError(f"no manifest.json under {path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("version") != MANIFEST_VERSION:
        raise DatasetVersionError(f"unsupported manifest version: {manifest.get('version')}")

    def load_record(rid, scene_id):
        entry = manifest["records"][str(rid)]
        blob_path = path / "blobs" / entry["blob"]
        if not blob_path.exists():
            raise MissingBlobError(f"missing blob {entry['blob']} (record {rid})")
        try:
            image = W.decode_image(blob_path.read_bytes())
        except Exception as exc:
            raise type(exc)(f"record {rid} ({entry['blob']}): {exc}") from exc
        return ObservationRecord(
            int(rid),
            image,
            _config_from_json(entry),
            np.array(entry["bbox"]),
            tuple(entry["visible"]),
            scene_id,
            entry["timestep"],
            entry["view"],
        )

    demo = DemoDataset()
    for tj in manifest["trajectories"]:
        demo.trajectories.append(
            DemoTrajectory(
                tj["id"],
                W.Goal(W.GoalKind(tj["goal"])),
                [_state_from_json(s) for s in tj["states"]],
                [W.Action(np.array(a)) for a in tj["actions"]],
                [[load_record(rid, tj["id"]) for rid in obs] for obs in tj["records"]],
            )
        )
    static = StaticDataset()
    for cj in manifest["static_clusters"]:
        static.clusters.append(
            StaticCluster(
                cj["id"],
                W.Goal(W.GoalKind(cj["goal"])),
                _state_from_json(cj["state"]),
                [load_record(rid, cj["id"]) for rid in cj["records"]],
            )
        )
    return Dataset(demo, static, manifest.get("seed"), manifest.get("image_size", 48))


# --- validation --------------------------------------------------------------


def validate_dataset(ds: Dataset, bbox_tol: float = 1e-9) -> dict:
    """Replay, bbox-reprojection and blob-integrity audit; returns statistics."""
    stats = {
        "trajectories": len(ds.demo),
        "static_clusters": len(ds.static),
        "records": 0,
        "replay_ok": True,
        "bbox_ok": True,
    }
    for traj in ds.demo.trajectories:
        state = traj.states[0]
        for t, action in enumerate(traj.actions):
            state = W.step(state, action)
            stored = traj.states[t + 1]
            if not np.allclose(state.ee_position, stored.ee_position, atol=1e-9):
                stats["replay_ok"] = False
        for obs_set in traj.observations:
            for rec in obs_set:
                stats["records"] += 1
                boxes, visible = W.ground_truth_bboxes(
                    traj.states[rec.timestep], rec.config
                )
                if visible != rec.visible or not np.allclose(boxes, rec.bboxes, atol=bbox_tol):
                    stats["bbox_ok"] = False
    for cluster in ds.static.clusters:
        for rec in cluster.records:
            stats["records"] += 1
            boxes, visible = W.ground_truth_bboxes(cluster.state, rec.config)
            if visible != rec.visible or not np.allclose(boxes, rec.bboxes, atol=bbox_tol):
                stats["bbox_ok"] = False
    return stats
