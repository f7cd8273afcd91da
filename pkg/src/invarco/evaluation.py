"""Closed-loop policy evaluation, the nearest-neighbor representation
diagnostic, and the scale/diversity ablation grid.

Evaluation seeds are odd by convention (training seeds even), so evaluation
scenes are disjoint from every training dataset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidInputError
from . import world as W
from .data import Dataset, DemoDataset, SamplerConfig, StaticDataset, collect_demos, collect_static
from .geometry import PerturbationRegime, camera_at, look_at, rot_z, sample_camera, Camera
from .model import ModelConfig, NoiseSchedule, conditioner_input, encode, mlp_forward, sample_actions
from .training import Checkpoint, TrainConfig, train

MAX_STEPS = 120
HANDHELD_DRIFT = math.radians(10.0)


@dataclass(frozen=True)
class EvalCell:
    regime: PerturbationRegime = PerturbationRegime.NOMINAL
    distractors: int = 0
    lighting_randomized: bool = False
    handheld: bool = False

    @property
    def name(self):
        parts = [self.regime.value, f"d{self.distractors}"]
        parts.append("randlight" if self.lighting_randomized else "nomlight")
        if self.handheld:
            parts.append("handheld")
        return "+".join(parts)


@dataclass(frozen=True)
class EvalSuite:
    cells: tuple
    episodes: int = 50
    max_steps: int = MAX_STEPS
    action_samples: int = 4

    def __post_init__(self):
        if self.episodes < 1 or not self.cells:
            raise InvalidInputError("need episodes >= 1 and a non-empty cell list")


def suite_by_name(name: str, episodes: int = 50) -> EvalSuite:
    nominal = EvalCell()
    named = {
        "default": (
            nominal,
            EvalCell(regime=PerturbationRegime.UNIFORM_HEMISPHERE),
            EvalCell(distractors=3),
            EvalCell(lighting_randomized=True),
        ),
        "perspective": (
            nominal,
            EvalCell(regime=PerturbationRegime.ROT30),
            EvalCell(regime=PerturbationRegime.ROT60_TRANSLATE),
            EvalCell(regime=PerturbationRegime.UNIFORM_HEMISPHERE),
        ),
        "distractor": (
            nominal,
            EvalCell(distractors=1),
            EvalCell(distractors=3),
            EvalCell(distractors=5),
        ),
        "lighting": (nominal, EvalCell(lighting_randomized=True)),
        "handheld": (nominal, EvalCell(handheld=True, regime=PerturbationRegime.UNIFORM_HEMISPHERE)),
    }
    if name not in named:
        raise InvalidInputError(f"unknown suite: {name}")
    return EvalSuite(named[name], episodes=episodes)


@dataclass
class EvalResult:
    cell: EvalCell
    episodes: int
    successes: int
    mean_length: float

    @property
    def success_rate(self):
        return self.successes / self.episodes

    @property
    def wilson(self):
        return wilson_interval(self.successes, self.episodes)


def wilson_interval(successes: int, n: int, z: float = 1.959963984540054):
    """95% Wilson score interval for a binomial proportion."""
    if n == 0:
        return 0.0, 1.0
    p = successes / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, center - half), min(1.0, center + half)


class DiffusionPolicy:
    """Render -> encode -> condition -> sample an averaged action chunk."""

    def __init__(self, params: dict, config: ModelConfig, schedule: NoiseSchedule,
                 action_samples: int = 4):
        self.params = params
        self.config = config
        self.schedule = schedule
        self.action_samples = action_samples

    def act(self, image: W.Image, state: W.SceneState, goal: W.Goal,
            rng: np.random.Generator) -> W.Action:
        emb = encode(self.params, self.config, image, goal)
        cin = conditioner_input(self.config, emb, state.proprio(), goal.one_hot())
        c, _ = mlp_forward(self.params, self.config, "cond", cin[None, :])
        chunk = sample_actions(
            self.params, self.config, self.schedule, c[0], rng, self.action_samples
        )
        return W.Action(chunk[0])


class ExpertPolicy:
    """The scripted expert routed through the same observe/act interface."""

    def act(self, image, state, goal, rng):
        return W.expert_action(state, goal, rng)


class ZeroPolicy:
    def act(self, image, state, goal, rng):
        return W.ZERO_ACTION


def policy_from_checkpoint(ckpt: Checkpoint, action_samples: int = 4) -> DiffusionPolicy:
    schedule = NoiseSchedule.linear(ckpt.config.model.diffusion_steps)
    return DiffusionPolicy(ckpt.params, ckpt.config.model, schedule, action_samples)


def rollout(policy, cell: EvalCell, rng: np.random.Generator, max_steps: int = MAX_STEPS,
            image_size: int = 48):
    """One closed-loop episode; returns (success flag, episode length)."""
    state, goal, clutter = W.sample_scene(rng, cell.distractors)
    base = camera_at(rng.uniform(0.0, 2.0 * math.pi), width=image_size, height=image_size)
    camera = sample_camera(rng, cell.regime, base)
    lighting = W.sample_lighting(rng, cell.lighting_randomized)
    for t in range(max_steps):
        if cell.handheld:
            camera = _drift_camera(camera, rng)
        cfg = W.ObservationConfig(camera, lighting, clutter)
        image = W.render(state, cfg)
        action = policy.act(image, state, goal, rng)
        state = W.step(state, action)
        if W.is_success(state, goal):
            return True, t + 1
    return False, max_steps


def _drift_camera(camera: Camera, rng: np.random.Generator) -> Camera:
    """Handheld mode: bounded per-step azimuth drift about the scene center."""
    angle = rng.uniform(-HANDHELD_DRIFT, HANDHELD_DRIFT)
    position = rot_z(angle).apply(camera.position)
    return Camera(look_at(position), camera.fov, camera.width, camera.height)


def evaluate(ckpt_or_policy, suite: EvalSuite, seed: int = 1, image_size: int = 48):
    """Per-cell aggregation over `suite.episodes` rollouts with odd eval seeds."""
    if seed % 2 != 1:
        raise InvalidInputError("evaluation seeds are odd by convention")
    if isinstance(ckpt_or_policy, Checkpoint):
        policy = policy_from_checkpoint(ckpt_or_policy, suite.action_samples)
        image_size = ckpt_or_policy.config.model.image_size
    else:
        policy = ckpt_or_policy
    results = []
    for ci, cell in enumerate(suite.cells):
        successes = 0
        lengths = []
        for ep in range(suite.episodes):
            rng = np.random.default_rng((seed, ci, ep))
            ok, length = rollout(policy, cell, rng, suite.max_steps, image_size)
            successes += ok
            lengths.append(length)
        results.append(EvalResult(cell, suite.episodes, successes, float(np.mean(lengths))))
    return results


RESULTS_HEADER = "regime,distractors,lighting,handheld,episodes,success,ci_low,ci_high,mean_len"


def results_to_csv(results) -> str:
    lines = [RESULTS_HEADER]
    for r in results:
        lo, hi = r.wilson
        lines.append(
            f"{r.cell.regime.value},{r.cell.distractors},"
            f"{'randomized' if r.cell.lighting_randomized else 'nominal'},"
            f"{int(r.cell.handheld)},{r.episodes},{r.success_rate:.4f},"
            f"{lo:.4f},{hi:.4f},{r.mean_length:.2f}"
        )
    return "\n".join(lines) + "\n"


# --- nearest-neighbor representation diagnostic ------------------------------


@dataclass
class RetrievalReport:
    same_trajectory_top1: float
    cross_trajectory_top1: float
    queries: int
    skipped_clusters: int


SIMILAR_STATE_DIST = 0.1


def _state_distance(a: W.SceneState, b: W.SceneState) -> float:
    return float(
        np.linalg.norm(a.ee_position - b.ee_position)
        + np.linalg.norm(a.object_position - b.object_position)
    )


def nn_diagnostic(ckpt: Checkpoint, static: StaticDataset, demo: DemoDataset | None = None,
                  max_queries: int = 200) -> RetrievalReport:
    """Top-1 same-state retrieval across held-out viewpoints.

    Same-trajectory pool: for each query view of a cluster, candidates are the
    other views of every cluster; a hit retrieves a view of the query's own
    cluster. Cross-trajectory pool: candidates restricted to clusters of
    *different* scenes, and a hit is a cluster whose state lies within
    SIMILAR_STATE_DIST of the query's.
    """
    from .model import apply_head

    config = ckpt.config.model
    clusters = [c for c in static.clusters if len(c.records) >= 2]
    skipped = len(static.clusters) - len(clusters)
    if not clusters:
        raise InvalidInputError("need clusters with >= 2 views")

    embs = []  # (cluster idx, record idx) -> f-head output
    for c in clusters:
        rows = np.stack(
            [apply_head(ckpt.params, config, "align",
                        encode(ckpt.params, config, r.image, c.goal)) for r in c.records]
        )
        embs.append(rows)

    same_hits = same_total = 0
    cross_hits = cross_total = 0
    for qi, cluster in enumerate(clusters):
        if same_total >= max_queries:
            break
        qv = 0
        query = embs[qi][qv]

        # pool 1: every other stored view, own cluster included
        best = None
        for cj in range(len(clusters)):
            for vj in range(len(embs[cj])):
                if cj == qi and vj == qv:
                    continue
                d = float(np.sum((query - embs[cj][vj]) ** 2))
                if best is None or d < best[0]:
                    best = (d, cj)
        same_hits += best[1] == qi
        same_total += 1

        # pool 2: disjoint scenes only; hit = similar underlying state
        similar = [
            cj
            for cj in range(len(clusters))
            if cj != qi and _state_distance(clusters[cj].state, cluster.state) < SIMILAR_STATE_DIST
        ]
        if not similar:
            continue
        best = None
        for cj in range(len(clusters)):
            if cj == qi:
                continue
            for vj in range(len(embs[cj])):
                d = float(np.sum((query - embs[cj][vj]) ** 2))
                if best is None or d < best[0]:
                    best = (d, cj)
        cross_hits += best[1] in similar
        cross_total += 1

    return RetrievalReport(
        same_trajectory_top1=same_hits / same_total if same_total else 0.0,
        cross_trajectory_top1=cross_hits / cross_total if cross_total else float("nan"),
        queries=same_total,
        skipped_clusters=skipped,
    )


# --- scale/diversity ablation grid -------------------------------------------


def ablation_grid(base_cfg: TrainConfig, scene_counts=(25, 100, 400),
                  views_per_state=(2, 5, 10), data_seed: int = 0, eval_seed: int = 1,
                  episodes: int = 30, demo_trajectories: int = 20, steps: int = 3000,
                  progress=None):
    """Train one full-variant model per (scenes, views) cell; returns CSV rows.

    Cells that fail are recorded with error text and the grid continues.
    """
    rows = ["scenes,views_per_state,status,success_uniform,success_distractor"]
    for n_scenes in scene_counts:
        for views in views_per_state:
            try:
                rng = np.random.default_rng(data_seed)
                demo = collect_demos(rng, demo_trajectories, views_per_step=3,
                                     image_size=base_cfg.model.image_size)
                static = collect_static(rng, n_scenes, views_per_state=views,
                                        image_size=base_cfg.model.image_size)
                cfg = replace(base_cfg, steps=steps)
                ckpt, _ = train(demo, static, cfg)
                suite = EvalSuite(
                    (
                        EvalCell(regime=PerturbationRegime.UNIFORM_HEMISPHERE),
                        EvalCell(distractors=3),
                    ),
                    episodes=episodes,
                )
                res = evaluate(ckpt, suite, seed=eval_seed)
                rows.append(
                    f"{n_scenes},{views},ok,{res[0].success_rate:.4f},{res[1].success_rate:.4f}"
                )
            except Exception as exc:  # per-cell failures must not kill the grid
                rows.append(f'{n_scenes},{views},"error: {exc}",,')
            if progress is not None:
                progress(rows[-1])
    return rows
