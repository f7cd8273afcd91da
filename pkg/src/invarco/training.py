"""Co-training loop: Adam, method variants, metrics and checkpointing.

Training is fully deterministic per (datasets, config, seed): one Generator
drives batch sampling and the diffusion noise draws, and its state is stored
in checkpoints so resumed runs continue the exact metric stream.

Seed convention: training (and dataset generation) seeds are even, evaluation
seeds odd, so evaluation scenes can never collide with training ones.
"""

from __future__ import annotations

import enum
import io
import json
import math
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, NumericFailureError, ResumeError
from .losses import LossReport, LossWeights
from .data import DemoDataset, SamplerConfig, StaticDataset, sample_batch
from .model import ModelConfig, NoiseSchedule, forward_losses, init_params

CHECKPOINT_VERSION = 1
CHECKPOINT_EVERY = 1000


class Variant(enum.Enum):
    FULL = "full"
    BC_ONLY = "bc"
    NO_AUX = "noaux"
    AUX_ONLY = "auxonly"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    steps: int = 5000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    variant: Variant = Variant.FULL
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.learning_rate <= 0 or self.steps < 1:
            raise InvalidInputError("need learning_rate > 0 and steps >= 1")
        if self.seed % 2 != 0:
            raise InvalidInputError("training seeds are even by convention (eval seeds odd)")

    def effective_weights(self) -> LossWeights:
        w = self.weights
        if self.variant is Variant.BC_ONLY:
            return replace(w, lambda_align=0.0, lambda_ext=0.0, lambda_bbox=0.0)
        if self.variant is Variant.NO_AUX:
            return replace(w, lambda_ext=0.0, lambda_bbox=0.0)
        return w

    @property
    def bc_weight(self) -> float:
        return 0.0 if self.variant is Variant.AUX_ONLY else 1.0

    def to_json(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d

    @staticmethod
    def from_json(d: dict) -> "TrainConfig":
        d = dict(d)
        d["variant"] = Variant(d["variant"])
        d["weights"] = LossWeights(**d["weights"])
        d["sampler"] = SamplerConfig(**d["sampler"])
        m = dict(d["model"])
        m["encoder_hidden"] = tuple(m["encoder_hidden"])
        m["denoiser_hidden"] = tuple(m["denoiser_hidden"])
        if isinstance(m.get("cond_hidden"), list):
            m["cond_hidden"] = tuple(m["cond_hidden"])
        d["model"] = ModelConfig(**m)
        return TrainConfig(**d)


def adam_init(params: dict) -> dict:
    return {
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
        "t": 0,
    }


def adam_step(params: dict, grads: dict, state: dict, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Standard bias-corrected Adam update; returns (params, state) in place."""
    state["t"] += 1
    t = state["t"]
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericFailureError(f"non-finite gradient for {name}", term=name)
        m = state["m"][name]
        v = state["v"][name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        params[name] = params[name] - lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


@dataclass
class Checkpoint:
    params: dict
    opt_state: dict
    step: int
    config: TrainConfig
    rng_state: dict


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    arrays = {}
    for name, v in ckpt.params.items():
        arrays[f"p/{name}"] = v
    for name, v in ckpt.opt_state["m"].items():
        arrays[f"m/{name}"] = v
    for name, v in ckpt.opt_state["v"].items():
        arrays[f"v/{name}"] = v
    meta = {
        "version": CHECKPOINT_VERSION,
        "step": ckpt.step,
        "adam_t": ckpt.opt_state["t"],
        "config": ckpt.config.to_json(),
        "rng_state": ckpt.rng_state,
    }
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    try:
        with np.load(Path(path), allow_pickle=False) as z:
            meta = json.loads(bytes(z["__meta__"]).decode())
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ResumeError(f"unsupported checkpoint version: {meta.get('version')}")
            params = {k[2:]: z[k] for k in z.files if k.startswith("p/")}
            opt_state = {
                "m": {k[2:]: z[k] for k in z.files if k.startswith("m/")},
                "v": {k[2:]: z[k] for k in z.files if k.startswith("v/")},
                "t": meta["adam_t"],
            }
    except ResumeError:
        raise
    except Exception as exc:
        raise ResumeError(f"cannot load checkpoint {path}: {exc}") from exc
    return Checkpoint(
        params, opt_state, meta["step"], TrainConfig.from_json(meta["config"]), meta["rng_state"]
    )


def train(demo: DemoDataset, static: StaticDataset, cfg: TrainConfig, out_dir=None,
          start: Checkpoint | None = None, log_every: int = 100, quiet: bool = True):
    """Runs the co-training loop; returns (Checkpoint, list[LossReport rows]).

    `out_dir`, when given, receives metrics.csv and periodic checkpoint files.
    `start` continues a previous run (resume) up to cfg.steps total steps.
    """
    schedule = NoiseSchedule.linear(cfg.model.diffusion_steps)
    sampler = replace(cfg.sampler, batch_size=cfg.batch_size)
    weights = cfg.effective_weights()

    if start is None:
        params = init_params(cfg.seed, cfg.model)
        opt_state = adam_init(params)
        rng = np.random.default_rng(cfg.seed)
        step0 = 0
    else:
        if set(start.params) != set(init_params(0, cfg.model)):
            raise ResumeError("checkpoint parameter set does not match the model config")
        params = {k: v.copy() for k, v in start.params.items()}
        opt_state = {
            "m": {k: v.copy() for k, v in start.opt_state["m"].items()},
            "v": {k: v.copy() for k, v in start.opt_state["v"].items()},
            "t": start.opt_state["t"],
        }
        rng = np.random.default_rng()
        rng.bit_generator.state = start.rng_state
        step0 = start.step

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    metrics = []
    last_good = None
    for step in range(step0 + 1, cfg.steps + 1):
        batch = sample_batch(demo, static, sampler, rng)
        try:
            report, grads = forward_losses(
                params, cfg.model, schedule, batch, rng, weights, bc_weight=cfg.bc_weight,
            )
            adam_step(params, grads, opt_state, cfg.learning_rate, cfg.beta1, cfg.beta2,
                      cfg.adam_eps)
        except NumericFailureError as exc:
            exc.last_checkpoint = last_good
            raise
        metrics.append((step, report))
        last_good = Checkpoint(
            {k: v.copy() for k, v in params.items()},
            {
                "m": {k: v.copy() for k, v in opt_state["m"].items()},
                "v": {k: v.copy() for k, v in opt_state["v"].items()},
                "t": opt_state["t"],
            },
            step,
            cfg,
            rng.bit_generator.state,
        ) if (step % CHECKPOINT_EVERY == 0 or step == cfg.steps) else last_good
        if out_dir is not None and step % CHECKPOINT_EVERY == 0:
            save_checkpoint(last_good, out_dir / f"ckpt_{step:07d}.npz")
        if not quiet and step % log_every == 0:
            print(f"step {step}: l_total={report.l_total:.4f} l_bc={report.l_bc:.4f}")

    final = Checkpoint(params, opt_state, cfg.steps, cfg, rng.bit_generator.state)
    if out_dir is not None:
        save_checkpoint(final, out_dir / "ckpt_final.npz")
        write_metrics(metrics, out_dir / "metrics.csv")
    return final, metrics


def write_metrics(metrics, path) -> None:
    lines = [LossReport.CSV_HEADER]
    for step, report in metrics:
        lines.append(report.csv_row(step))
    Path(path).write_text("\n".join(lines) + "\n")


def train_constant_denoiser(constant_chunk: np.ndarray, steps: int = 2000,
                            learning_rate: float = 5e-3, batch_size: int = 256,
                            seed: int = 0, model: ModelConfig | None = None):
    """Overfit oracle: fit the denoiser to a single constant action chunk.

    Trains only the denoiser network against the noise-prediction objective
    with a fixed (zero) conditioning vector. With the returned parameters,
    `sample_actions` should reproduce the constant to within a small
    per-coordinate error, which checks the reverse-process update end to end.
    Returns (params, conditioning, config, schedule).
    """
    from .model import chunk_scale, mlp_backward, mlp_forward, time_embedding

    cfg = model if model is not None else replace(ModelConfig(), denoiser_hidden=(256, 256))
    schedule = NoiseSchedule.linear(cfg.diffusion_steps)
    target = np.asarray(constant_chunk, dtype=np.float64).reshape(-1)
    if target.size != cfg.chunk_len * cfg.action_dim:
        raise InvalidInputError(
            f"constant chunk has {target.size} values, expected "
            f"{cfg.chunk_len * cfg.action_dim}"
        )
    target = target / chunk_scale(cfg)
    rng = np.random.default_rng(seed)
    params = {k: v for k, v in init_params(1, cfg).items() if k.startswith("den.")}
    opt_state = adam_init(params)
    c = np.zeros(cfg.cond_dim)
    for _ in range(steps):
        ks = rng.integers(1, schedule.steps + 1, size=batch_size)
        eps = rng.standard_normal((batch_size, target.size))
        abar = schedule.alpha_bars[ks - 1][:, None]
        corrupted = np.sqrt(abar) * target + np.sqrt(1.0 - abar) * eps
        temb = time_embedding(ks, cfg.time_embed_dim)
        x = np.concatenate([np.tile(c, (batch_size, 1)), corrupted, temb], axis=1)
        pred, cache = mlp_forward(params, cfg, "den", x)
        grads = {}
        mlp_backward(params, cfg, cache, 2.0 * (pred - eps) / pred.size, grads)
        adam_step(params, grads, opt_state, learning_rate)
    return params, c, cfg, schedule


def resume(checkpoint: Checkpoint, demo: DemoDataset, static: StaticDataset,
           out_dir=None, **overrides):
    """Continue training from a checkpoint, optionally overriding config fields."""
    cfg = replace(checkpoint.config, **overrides) if overrides else checkpoint.config
    return train(demo, static, cfg, out_dir=out_dir, start=checkpoint)
