"""Command-line entry point.

Exit codes: 0 success, 2 usage, 3 data generation failure, 4 numeric failure,
5 I/O (dataset/checkpoint load) failure.
"""

from __future__ import annotations

import json
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from . import data as D
from . import evaluation as E
from . import model as M
from . import report as R
from . import training as T
from . import world as W
from .errors import (
    GenerationFailedError,
    InvarcoError,
    NumericFailureError,
)
from .geometry import PerturbationRegime

EXIT_GENERATION = 3
EXIT_NUMERIC = 4
EXIT_IO = 5


def _apply_thread_cap():
    cap = os.environ.get("QSC_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, cap)


@click.group()
def main():
    """Invariance co-training on a synthetic tabletop world."""
    _apply_thread_cap()


REGIMES = {r.value: r for r in PerturbationRegime}


@main.command("gen-data")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--demos", default=20, show_default=True)
@click.option("--scenes", default=40, show_default=True)
@click.option("--views", default=3, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--distractors", default=0, show_default=True)
@click.option("--demo-regime", default="nominal", type=click.Choice(sorted(REGIMES)),
              show_default=True)
@click.option("--image-size", default=48, show_default=True)
def gen_data(out_path, demos, scenes, views, seed, distractors, demo_regime, image_size):
    """Generate demonstration and static datasets into a directory."""
    if seed % 2 != 0:
        raise click.UsageError("dataset seeds are even by convention (eval seeds odd)")
    try:
        rng = np.random.default_rng(seed)
        demo = D.collect_demos(
            rng, demos, views_per_step=views, camera_regime=REGIMES[demo_regime],
            n_distractors=distractors, image_size=image_size,
        )
        static = (
            D.collect_static(rng, scenes, views_per_state=max(views, 2), image_size=image_size)
            if scenes > 0
            else D.StaticDataset()
        )
        ds = D.Dataset(demo, static, seed=seed, image_size=image_size)
        D.write_dataset(ds, out_path)
    except GenerationFailedError as exc:
        click.echo(f"generation failed: {exc}", err=True)
        sys.exit(EXIT_GENERATION)
    click.echo(f"wrote {len(demo)} trajectories, {len(static)} static clusters -> {out_path}")
    for traj in demo.trajectories[:5]:
        click.echo(f"  trajectory {traj.traj_id}: len={traj.length} Z={traj.translation_z:.4f}")
    for cluster in static.clusters[:5]:
        click.echo(
            f"  cluster {cluster.scene_id}: views={len(cluster.records)} "
            f"Z={cluster.translation_z:.4f}"
        )


def _load_dataset(path) -> D.Dataset:
    try:
        return D.read_dataset(path)
    except InvarcoError as exc:
        click.echo(f"cannot load dataset: {exc}", err=True)
        sys.exit(EXIT_IO)


VARIANTS = {v.value: v for v in T.Variant}


@main.command("train")
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--variant", default="full", type=click.Choice(sorted(VARIANTS)), show_default=True)
@click.option("--steps", default=5000, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True),
              help="JSON file mirroring TrainConfig; overrides flags.")
def train_cmd(data_path, variant, steps, seed, out_dir, config_path):
    """Co-train a policy on a generated dataset."""
    ds = _load_dataset(data_path)
    cfg = T.TrainConfig(variant=VARIANTS[variant], steps=steps, seed=seed)
    if config_path:
        overrides = json.loads(Path(config_path).read_text())
        base = cfg.to_json()
        base.update(overrides)
        cfg = T.TrainConfig.from_json(base)
        for key in overrides:
            click.echo(f"config: {key} = {base[key]} (from {config_path})")
    if not len(ds.static):
        click.echo("warning: dataset has no static clusters; using demo-derived pairs only",
                   err=True)
    try:
        ckpt, metrics = T.train(ds.demo, ds.static, cfg, out_dir=out_dir, quiet=False)
    except NumericFailureError as exc:
        click.echo(f"numeric failure in term {exc.term}: {exc}", err=True)
        sys.exit(EXIT_NUMERIC)
    R.plot_metrics(metrics, Path(out_dir) / "metrics.png")
    click.echo(f"final l_total={metrics[-1][1].l_total:.4f}; checkpoint in {out_dir}")


def _load_checkpoint(path) -> T.Checkpoint:
    try:
        return T.load_checkpoint(path)
    except InvarcoError as exc:
        click.echo(f"cannot load checkpoint: {exc}", err=True)
        sys.exit(EXIT_IO)


@main.command("eval")
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--suite", default="default",
              type=click.Choice(["default", "perspective", "distractor", "lighting", "handheld"]),
              show_default=True)
@click.option("--episodes", default=50, show_default=True)
@click.option("--seed", default=1, show_default=True)
@click.option("--out", "out_csv", required=True, type=click.Path())
def eval_cmd(ckpt_path, suite, episodes, seed, out_csv):
    """Closed-loop evaluation under the perturbation regimes."""
    if seed % 2 != 1:
        raise click.UsageError("evaluation seeds are odd by convention")
    ckpt = _load_checkpoint(ckpt_path)
    results = E.evaluate(ckpt, E.suite_by_name(suite, episodes), seed=seed)
    csv = E.results_to_csv(results)
    Path(out_csv).write_text(csv)
    R.plot_eval_results(results, Path(out_csv).with_suffix(".png"))
    click.echo(csv.rstrip())


@main.command("nn-diag")
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
def nn_diag(ckpt_path, data_path):
    """Nearest-neighbor same-state retrieval diagnostic."""
    ckpt = _load_checkpoint(ckpt_path)
    ds = _load_dataset(data_path)
    report = E.nn_diagnostic(ckpt, ds.static, ds.demo)
    click.echo(
        f"same-trajectory top-1: {report.same_trajectory_top1:.3f}\n"
        f"cross-trajectory top-1: {report.cross_trajectory_top1:.3f}\n"
        f"queries: {report.queries} (skipped clusters: {report.skipped_clusters})"
    )


@main.command("grad-check")
@click.option("--seed", default=0, show_default=True)
def grad_check_cmd(seed):
    """Finite-difference verification of the hand-written gradients."""
    report = run_reference_grad_check(seed)
    for name, err in sorted(report.per_tensor.items()):
        click.echo(f"  {name}: {err:.2e}")
    if report.passed:
        click.echo(f"gradient check passed (max rel err {report.max_error:.2e})")
    else:
        click.echo(f"gradient check FAILED (max rel err {report.max_error:.2e})", err=True)
        sys.exit(EXIT_NUMERIC)


def run_reference_grad_check(seed: int = 0, max_coords: int = 200) -> M.GradReport:
    """Grad check on the tiny configuration with a freshly generated batch."""
    rng = np.random.default_rng(2)
    demo = D.collect_demos(rng, 2, views_per_step=3, image_size=8)
    static = D.collect_static(rng, 3, views_per_state=4, image_size=8)
    cfg = M.ModelConfig().tiny()
    schedule = M.NoiseSchedule.linear(cfg.diffusion_steps)
    scfg = D.SamplerConfig(batch_size=2, n_pos_pairs=2, n_neg_pairs=2, n_ext_pairs=2,
                           n_bbox_items=2)
    batch = D.sample_batch(demo, static, scfg, rng)
    params = M.init_params(1 if seed == 0 else seed, cfg)
    return M.grad_check(params, cfg, schedule, batch, seed=7, max_coords=max_coords)


@main.command("ablate")
@click.option("--grid", "grid_path", type=click.Path(exists=True),
              help="JSON: {scenes: [...], views: [...], episodes, steps, demos}")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", default=0, show_default=True)
def ablate(grid_path, out_dir, seed):
    """Scale/diversity ablation grid (long-running)."""
    spec = json.loads(Path(grid_path).read_text()) if grid_path else {}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = T.TrainConfig(seed=seed)
    rows = E.ablation_grid(
        base,
        scene_counts=tuple(spec.get("scenes", (25, 100, 400))),
        views_per_state=tuple(spec.get("views", (2, 5, 10))),
        data_seed=seed,
        episodes=int(spec.get("episodes", 30)),
        steps=int(spec.get("steps", 3000)),
        demo_trajectories=int(spec.get("demos", 20)),
        progress=lambda row: click.echo(row),
    )
    (out / "ablation.csv").write_text("\n".join(rows) + "\n")
    R.plot_ablation_grid(rows, out / "ablation.png")
    click.echo(f"grid written to {out / 'ablation.csv'}")


@main.command("inspect")
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
def inspect(data_path):
    """Validate a dataset: replay, bbox reprojection, blob integrity."""
    ds = _load_dataset(data_path)
    stats = D.validate_dataset(ds)
    for key, value in stats.items():
        click.echo(f"{key}: {value}")
    if not (stats["replay_ok"] and stats["bbox_ok"]):
        click.echo("dataset validation FAILED", err=True)
        sys.exit(EXIT_IO)


if __name__ == "__main__":
    main()
