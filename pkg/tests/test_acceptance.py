"""End-to-end acceptance gate.

Each criterion prints exactly one summary line (PASS/FAIL plus elapsed time
against its pinned budget) directly to the terminal, bypassing pytest's
capture, so a full run always shows the ten-line scoreboard. Criterion 10,
the scale/diversity ablation grid, is the only long-running criterion and is
excluded from the default profile via the ``slow`` marker
(run it with ``pytest -m slow tests/test_acceptance.py``).

Criteria 6-8 share one set of co-training runs (session-scoped); the
experiment configuration is pinned in the EXP_* constants below.
"""

import itertools
import sys
import time
from contextlib import contextmanager
from dataclasses import replace

import numpy as np
import pytest

from invarco import data as D
from invarco import evaluation as E
from invarco import geometry as G
from invarco import losses as L
from invarco import model as M
from invarco import training as T
from invarco.cli import run_reference_grad_check
from invarco.errors import CrossKindError
from invarco.geometry import PerturbationRegime

# --- pinned tolerances and budgets -------------------------------------------

GRAD_TOL = 1e-4                 # criterion 1: max relative error vs central FD
LINEARITY_TOL = 1e-10           # criterion 3: lambda-linearity of L_total
GEOMETRY_TOL = 1e-9             # criterion 4: Z on a circle of radius d
MEMORIZATION_TOL = 0.05         # criterion 5: per-coordinate absolute error
COTRAIN_GAP = 0.15              # criterion 6: Full - BCOnly success gap
ABLATION_GAP = 0.05             # criterion 7: Full - NoAux success gap
AUXONLY_CEILING = 0.2           # criterion 7: AuxOnly success ceiling
RETRIEVAL_FLOOR = 0.8           # criterion 8: same-state top-1 retrieval
EXPERT_FLOOR = 0.95             # criterion 9: expert nominal success

BUDGETS = {1: 60, 2: 5, 3: 5, 4: 5, 5: 120, 6: 1800, 7: 1200, 8: 120, 9: 60,
           10: 7200}

# --- pinned co-training experiment (criteria 6-8) ----------------------------

EXP_DEMOS = 150                 # expert trajectories, cameras on the 4-azimuth ring
EXP_DEMO_VIEWS = 2              # rendered views per timestep
EXP_STATIC_SCENES = 100         # frozen scenes for the invariance losses
EXP_STATIC_VIEWS = 3            # hemisphere views per frozen scene
EXP_SEED = 0                    # data + training seed (even by convention)
EXP_STEPS = 12000
EXP_LR = 1e-3
EXP_HIDDEN = (512, 512)         # denoiser width (defaults are desk-tiny)
EVAL_SEEDS = (1, 3, 5)          # odd by convention
EVAL_EPISODES = 50
EVAL_ACTION_SAMPLES = 8         # M averaged diffusion chains per control step


@contextmanager
def criterion(number: int, name: str):
    budget = BUDGETS[number]
    start = time.monotonic()
    body_ok = False
    try:
        yield
        body_ok = True
    finally:
        elapsed = time.monotonic() - start
        ok = body_ok and elapsed <= budget
        print(f"criterion {number:2d} [{name}]: {'PASS' if ok else 'FAIL'} "
              f"({elapsed:.1f}s / budget {budget}s)",
              file=sys.__stdout__, flush=True)
    assert elapsed <= budget, f"criterion {number} over budget: {elapsed:.1f}s"


# --- shared co-training state -------------------------------------------------


class Experiment:
    """Lazily trains and evaluates the four variants on one shared dataset."""

    def __init__(self):
        self._data = None
        self._ckpts = {}
        self._success = {}

    @property
    def data(self):
        if self._data is None:
            rng = np.random.default_rng(EXP_SEED)
            demo = D.collect_demos(rng, EXP_DEMOS, views_per_step=EXP_DEMO_VIEWS)
            static = D.collect_static(rng, EXP_STATIC_SCENES,
                                      views_per_state=EXP_STATIC_VIEWS)
            self._data = (demo, static)
        return self._data

    def config(self, variant: T.Variant) -> T.TrainConfig:
        model = replace(M.ModelConfig(), denoiser_hidden=EXP_HIDDEN)
        return T.TrainConfig(seed=EXP_SEED, variant=variant, model=model,
                             learning_rate=EXP_LR, steps=EXP_STEPS)

    def checkpoint(self, variant: T.Variant) -> T.Checkpoint:
        if variant not in self._ckpts:
            demo, static = self.data
            ckpt, _ = T.train(demo, static, self.config(variant))
            self._ckpts[variant] = ckpt
        return self._ckpts[variant]

    def mean_success(self, variant: T.Variant) -> float:
        if variant not in self._success:
            ckpt = self.checkpoint(variant)
            cell = E.EvalCell(regime=PerturbationRegime.UNIFORM_HEMISPHERE)
            suite = E.EvalSuite(cells=(cell,), episodes=EVAL_EPISODES,
                                action_samples=EVAL_ACTION_SAMPLES)
            rates = [E.evaluate(ckpt, suite, seed=s)[0].success_rate
                     for s in EVAL_SEEDS]
            self._success[variant] = float(np.mean(rates))
        return self._success[variant]


@pytest.fixture(scope="session")
def experiment():
    return Experiment()


# --- criteria ----------------------------------------------------------------


def test_criterion_01_gradient_soundness():
    with criterion(1, "gradient soundness"):
        report = run_reference_grad_check(seed=0)
        assert report.passed
        assert report.max_error <= GRAD_TOL, report.per_tensor


def test_criterion_02_pair_rule_oracle():
    with criterion(2, "pair-rule oracle"):
        demo = [("demo", m, i) for m in range(4) for i in range(6)]
        static = [("static", n, j) for n in range(6) for j in range(2)]

        def brute_force(a, b, eps):
            # independent restatement of the labeling rule
            if a[0] == "demo":
                same = a[1] == b[1] and abs(a[2] - b[2]) < eps
                return ("demo", same)
            return ("static", a[1] == b[1])

        mismatches = 0
        for eps in (1, 2, 3, 5):
            for group in (demo, static):
                for a, b in itertools.product(group, group):
                    label = D.classify_pair(a, b, epsilon=eps)
                    kind, positive = brute_force(a, b, eps)
                    expected = {
                        ("demo", True): D.PairLabel.DEMO_POSITIVE,
                        ("demo", False): D.PairLabel.DEMO_NEGATIVE,
                        ("static", True): D.PairLabel.STATIC_POSITIVE,
                        ("static", False): D.PairLabel.STATIC_NEGATIVE,
                    }[(kind, positive)]
                    mismatches += label is not expected
        assert mismatches == 0
        with pytest.raises(CrossKindError):
            D.classify_pair(demo[0], static[0])


def test_criterion_03_loss_arithmetic():
    with criterion(3, "loss arithmetic"):
        margin = 0.5
        far = (np.array([1.0, 0.0]), np.array([0.0, 0.0]))  # d^2 = 1 >= margin
        assert L.loss_neg([far], margin=margin) == 0.0
        same = (np.array([0.3, -0.2]), np.array([0.3, -0.2]))
        assert L.loss_neg([same], margin=margin) == margin == 0.5
        assert L.loss_pos([same]) == 0.0

        rng = np.random.default_rng(0)
        fa = rng.standard_normal((8, 4))
        fb = rng.standard_normal((8, 4))
        positive = np.arange(8) % 2 == 0
        l_pos, l_neg, *_ = L.alignment_losses(fa, fb, positive, margin)
        pos_pairs = [(fa[i], fb[i]) for i in range(8) if positive[i]]
        neg_pairs = [(fa[i], fb[i]) for i in range(8) if not positive[i]]
        assert l_pos == L.loss_pos(pos_pairs)
        assert l_neg == L.loss_neg(neg_pairs, margin)
        l_alignment = l_pos + l_neg  # exact by definition

        terms = dict(l_bc=0.731, l_alignment=l_alignment, l_ext=1.37,
                     l_bbox=0.055)
        for lam in (0.0, 0.25, 1.0, 3.0):
            w = L.LossWeights(lambda_align=lam, lambda_ext=lam, lambda_bbox=lam)
            w0 = L.LossWeights(lambda_align=0.0, lambda_ext=0.0, lambda_bbox=0.0)
            total = L.loss_total(weights=w, **terms)
            base = L.loss_total(weights=w0, **terms)
            expected = base + lam * (terms["l_alignment"] + terms["l_ext"]
                                     + terms["l_bbox"])
            assert abs(total - expected) <= LINEARITY_TOL


def test_criterion_04_geometry_and_reduction():
    with criterion(4, "geometry + denoise-step reduction"):
        rng = np.random.default_rng(3)
        for d in (0.5, 1.0, 2.7):
            # evenly spaced ring: the centroid is the circle center exactly
            angles = np.linspace(0.0, 2.0 * np.pi, 12, endpoint=False)
            center = rng.standard_normal(3)
            poses = []
            for a in angles:
                pos = center + d * np.array([np.cos(a), np.sin(a), 0.0])
                poses.append(G.look_at(pos))
            z = G.translation_scale(poses)
            assert abs(z - d) <= GEOMETRY_TOL

            # invariance under a global rigid motion
            motion = G.compose(G.translate(0.4, -1.1, 0.7), G.rot_z(1.2))
            moved = [G.compose(motion, p) for p in poses]
            assert abs(G.translation_scale(moved) - z) <= GEOMETRY_TOL

        # pose round trip: compose with inverse returns identity
        p = G.compose(G.translate(0.2, 0.3, -0.4), G.rot_x(0.8))
        ident = G.compose(p, p.inverse())
        assert np.allclose(ident.rotation, np.eye(3), atol=1e-12)
        assert np.allclose(ident.translation, 0.0, atol=1e-12)

        # zero denoiser, zero noise: a^{k-1} = alpha_k * a^k exactly
        cfg = M.ModelConfig().tiny()
        schedule = M.NoiseSchedule.linear(cfg.diffusion_steps)
        params = M.init_params(1, cfg)
        for name in list(params):
            if name.startswith("den."):
                params[name] = np.zeros_like(params[name])
        a_k = rng.standard_normal((cfg.chunk_len, cfg.action_dim))
        c = np.zeros(cfg.cond_dim)
        for k in (1, 2, cfg.diffusion_steps):
            out = M.denoise_step(params, cfg, schedule, c, a_k, k,
                                 noise=np.zeros_like(a_k))
            alpha = 1.0 / np.sqrt(1.0 - schedule.betas[k - 1])
            assert np.array_equal(out, alpha * a_k)


def test_criterion_05_memorization_oracle():
    with criterion(5, "diffusion memorization oracle"):
        rng = np.random.default_rng(5)
        cfg = M.ModelConfig()
        target = rng.uniform(-0.7, 0.7, size=(cfg.chunk_len, cfg.action_dim))
        target = target * M.ACTION_HI  # keep the constant inside action bounds
        params, c, cfg2, schedule = T.train_constant_denoiser(target, steps=2000,
                                                              seed=0)
        out = M.sample_actions(params, cfg2, schedule, c,
                               np.random.default_rng(1), n_samples=64)
        err = np.max(np.abs(out - target))
        assert err <= MEMORIZATION_TOL, f"max per-coordinate error {err:.4f}"


def test_criterion_06_cotraining_gap(experiment):
    with criterion(6, "viewpoint co-training gap"):
        full = experiment.mean_success(T.Variant.FULL)
        bc = experiment.mean_success(T.Variant.BC_ONLY)
        print(f"    Full={full:.3f} BCOnly={bc:.3f}",
              file=sys.__stdout__, flush=True)
        assert full >= bc + COTRAIN_GAP, f"Full={full:.3f} BCOnly={bc:.3f}"


def test_criterion_07_auxiliary_ablation(experiment):
    with criterion(7, "auxiliary-loss ablation"):
        full = experiment.mean_success(T.Variant.FULL)
        noaux = experiment.mean_success(T.Variant.NO_AUX)
        auxonly = experiment.mean_success(T.Variant.AUX_ONLY)
        print(f"    Full={full:.3f} NoAux={noaux:.3f} AuxOnly={auxonly:.3f}",
              file=sys.__stdout__, flush=True)
        assert full >= noaux + ABLATION_GAP, f"Full={full:.3f} NoAux={noaux:.3f}"
        assert auxonly <= AUXONLY_CEILING, f"AuxOnly={auxonly:.3f}"


def test_criterion_08_representation_retrieval(experiment):
    ckpt = experiment.checkpoint(T.Variant.FULL)  # training billed to criterion 6
    with criterion(8, "representation retrieval"):
        rng = np.random.default_rng(8)  # held out from the training stream
        static = D.collect_static(rng, 60, views_per_state=4)
        trained = E.nn_diagnostic(ckpt, static)
        untrained_ckpt = T.Checkpoint(
            M.init_params(1, ckpt.config.model), {}, 0, ckpt.config,
            np.random.default_rng(0).bit_generator.state)
        untrained = E.nn_diagnostic(untrained_ckpt, static)
        print(f"    trained same={trained.same_trajectory_top1:.3f} "
              f"cross={trained.cross_trajectory_top1:.3f}; untrained "
              f"same={untrained.same_trajectory_top1:.3f} "
              f"cross={untrained.cross_trajectory_top1:.3f}",
              file=sys.__stdout__, flush=True)
        assert trained.same_trajectory_top1 >= RETRIEVAL_FLOOR
        assert trained.same_trajectory_top1 > untrained.same_trajectory_top1
        assert trained.cross_trajectory_top1 > untrained.cross_trajectory_top1


def test_criterion_09_harness_validity():
    with criterion(9, "evaluation harness validity"):
        suite = E.EvalSuite(cells=(E.EvalCell(),), episodes=200)
        res = E.evaluate(E.ExpertPolicy(), suite, seed=1)
        assert res[0].episodes == 200
        assert res[0].success_rate >= EXPERT_FLOOR, res[0].success_rate


@pytest.mark.slow
def test_criterion_10_ablation_grid(tmp_path):
    with criterion(10, "scale/diversity ablation grid"):
        base = T.TrainConfig(seed=0, steps=3000)
        rows = E.ablation_grid(base, scene_counts=(25, 100, 400),
                               views_per_state=(2, 5, 10),
                               demo_trajectories=20, steps=3000, episodes=30)
        (tmp_path / "ablation.csv").write_text("\n".join(rows) + "\n")
        assert len(rows) == 10  # header + 3x3 grid
        assert all("error" not in row for row in rows[1:])
        assert all(len(row.split(",")) == len(rows[0].split(","))
                   for row in rows[1:])
