"""Trainable networks: vision encoder, projection heads, policy conditioner
and the diffusion denoiser, all as hand-written MLPs over float64 numpy with
reverse-mode gradients and a finite-difference gradient checker.

Parameters live in a flat dict of named tensors; every network is a stack of
affine layers with ReLU between them (linear output unless noted).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, NumericFailureError, ShapeMismatchError
from .world import GoalKind, Goal, Image, TRANS_LIMIT, ROT_LIMIT


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 48
    goal_dim: int = len(GoalKind)
    proprio_dim: int = 5
    embedding_dim: int = 64
    encoder_hidden: tuple = (128, 128)
    head_hidden: int = 64
    align_dim: int = 32
    ext_dim: int = 12
    bbox_dim: int = 8
    cond_hidden: int = 64
    cond_dim: int = 64
    denoiser_hidden: tuple = (128, 128)
    chunk_len: int = 8
    action_dim: int = 7
    time_embed_dim: int = 16
    diffusion_steps: int = 50

    @property
    def pixel_dim(self):
        return self.image_size * self.image_size * 3

    @property
    def chunk_dim(self):
        return self.chunk_len * self.action_dim

    def layer_sizes(self, net: str):
        if net == "enc":
            return [self.pixel_dim + self.goal_dim, *self.encoder_hidden, self.embedding_dim]
        if net == "head_align":
            return [self.embedding_dim, self.head_hidden, self.align_dim]
        if net == "head_ext":
            return [self.embedding_dim, self.head_hidden, self.ext_dim]
        if net == "head_bbox":
            return [self.embedding_dim, self.head_hidden, self.bbox_dim]
        if net == "cond":
            hidden = (self.cond_hidden if isinstance(self.cond_hidden, tuple)
                      else (self.cond_hidden,))
            return [
                self.embedding_dim + self.proprio_dim + self.goal_dim,
                *hidden,
                self.cond_dim,
            ]
        if net == "den":
            return [
                self.cond_dim + self.chunk_dim + self.time_embed_dim,
                *self.denoiser_hidden,
                self.chunk_dim,
            ]
        raise InvalidInputError(f"unknown network: {net}")

    def tiny(self) -> "ModelConfig":
        """Small-enough variant for exhaustive finite differencing."""
        return ModelConfig(
            image_size=8,
            embedding_dim=8,
            encoder_hidden=(16,),
            head_hidden=8,
            cond_hidden=8,
            cond_dim=8,
            denoiser_hidden=(16,),
            time_embed_dim=8,
            diffusion_steps=10,
        )


NETWORKS = ("enc", "head_align", "head_ext", "head_bbox", "cond", "den")


def init_params(seed: int, config: ModelConfig) -> dict:
    """Scaled-uniform fan-in weights, zero biases, deterministic per seed."""
    rng = np.random.default_rng(seed)
    params = {}
    for net in NETWORKS:
        sizes = config.layer_sizes(net)
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / math.sqrt(fan_in)
            params[f"{net}.w{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            params[f"{net}.b{i}"] = np.zeros(fan_out)
    return params


def n_layers(config: ModelConfig, net: str) -> int:
    return len(config.layer_sizes(net)) - 1


def mlp_forward(params: dict, config: ModelConfig, net: str, x: np.ndarray,
                sigmoid_out: bool = False):
    """Returns (output, cache) for a ReLU MLP; cache feeds mlp_backward."""
    depth = n_layers(config, net)
    h = np.asarray(x, dtype=np.float64)
    pre = []
    acts = [h]
    for i in range(depth):
        z = h @ params[f"{net}.w{i}"] + params[f"{net}.b{i}"]
        pre.append(z)
        if i < depth - 1:
            h = np.maximum(z, 0.0)
        elif sigmoid_out:
            h = 1.0 / (1.0 + np.exp(-z))
        else:
            h = z
        acts.append(h)
    return acts[-1], (net, pre, acts, sigmoid_out)


def mlp_backward(params: dict, config: ModelConfig, cache, dout: np.ndarray, grads: dict):
    """Accumulates parameter grads into `grads`; returns gradient w.r.t. input."""
    net, pre, acts, sigmoid_out = cache
    depth = len(pre)
    d = np.asarray(dout, dtype=np.float64)
    for i in reversed(range(depth)):
        if i == depth - 1 and sigmoid_out:
            s = acts[-1]
            d = d * s * (1.0 - s)
        elif i < depth - 1:
            d = d * (pre[i] > 0.0)
        w = f"{net}.w{i}"
        b = f"{net}.b{i}"
        grads[w] = grads.get(w, 0.0) + acts[i].T @ d
        grads[b] = grads.get(b, 0.0) + d.sum(axis=0)
        d = d @ params[w].T
    return d


def encoder_input(config: ModelConfig, image: Image, goal: Goal) -> np.ndarray:
    if image.width != config.image_size or image.height != config.image_size:
        raise ShapeMismatchError(
            f"image {image.width}x{image.height} != configured {config.image_size}"
        )
    # center pixels at zero: all-positive inputs make first-layer weight
    # updates move in lockstep, which kills ReLU units at practical step sizes
    return np.concatenate([image.as_float().reshape(-1) - 0.5, goal.one_hot()])


def encode(params: dict, config: ModelConfig, image: Image, goal: Goal) -> np.ndarray:
    out, _ = mlp_forward(params, config, "enc", encoder_input(config, image, goal)[None, :])
    return out[0]


def encode_batch(params: dict, config: ModelConfig, inputs: np.ndarray):
    return mlp_forward(params, config, "enc", inputs)


HEAD_KINDS = {"align": "head_align", "ext": "head_ext", "bbox": "head_bbox"}


def apply_head(params: dict, config: ModelConfig, kind: str, embedding: np.ndarray) -> np.ndarray:
    if kind not in HEAD_KINDS:
        raise InvalidInputError(f"unknown head kind: {kind}")
    emb = np.atleast_2d(embedding)
    out, _ = mlp_forward(params, config, HEAD_KINDS[kind], emb, sigmoid_out=(kind == "bbox"))
    return out[0] if np.ndim(embedding) == 1 else out


# --- diffusion ---------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta schedule with the ancestral-sampling coefficients.

    Arrays are indexed by step-1 for steps k = 1..K.
    """

    betas: np.ndarray
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or np.any(betas <= 0) or np.any(betas >= 1):
            raise InvalidInputError("betas must lie in (0, 1)")
        if np.any(np.diff(betas) <= 0):
            raise InvalidInputError("betas must be strictly increasing")
        betas.flags.writeable = False
        object.__setattr__(self, "betas", betas)
        bars = np.cumprod(1.0 - betas)
        bars.flags.writeable = False
        object.__setattr__(self, "alpha_bars", bars)

    @staticmethod
    def linear(steps: int = 50, beta_lo: float = 1e-4, beta_hi: float = 0.02) -> "NoiseSchedule":
        return NoiseSchedule(np.linspace(beta_lo, beta_hi, steps))

    @property
    def steps(self):
        return len(self.betas)

    def coefficients(self, k: int):
        """(alpha, gamma, sigma) of the sampling update at step k; sigma = 0 at k=1."""
        if not 1 <= k <= self.steps:
            raise InvalidInputError(f"diffusion step {k} out of [1, {self.steps}]")
        beta = self.betas[k - 1]
        alpha = 1.0 / math.sqrt(1.0 - beta)
        gamma = beta / math.sqrt(1.0 - self.alpha_bars[k - 1])
        sigma = 0.0 if k == 1 else math.sqrt(beta)
        return alpha, gamma, sigma


def time_embedding(k, dim: int) -> np.ndarray:
    """Sinusoidal embedding of the diffusion step index; accepts scalars or arrays."""
    k = np.atleast_1d(np.asarray(k, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    angles = k[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def denoiser_forward(params: dict, config: ModelConfig, c: np.ndarray, chunks: np.ndarray,
                     ks: np.ndarray):
    """Noise prediction for a batch: c (n, cond), chunks (n, chunk_dim), ks (n,)."""
    temb = time_embedding(ks, config.time_embed_dim)
    x = np.concatenate([c, chunks, temb], axis=1)
    return mlp_forward(params, config, "den", x)


def denoise_step(params: dict, config: ModelConfig, schedule: NoiseSchedule, c: np.ndarray,
                 a_k: np.ndarray, k: int, noise: np.ndarray) -> np.ndarray:
    """One reverse update: a_{k-1} = alpha * (a_k - gamma * eps(c, a_k, k) + sigma * noise)."""
    a_k = np.asarray(a_k, dtype=np.float64)
    if a_k.shape != (config.chunk_len, config.action_dim):
        raise InvalidInputError(f"chunk shape {a_k.shape} != {(config.chunk_len, config.action_dim)}")
    alpha, gamma, sigma = schedule.coefficients(k)
    eps, _ = denoiser_forward(params, config, c[None, :], a_k.reshape(1, -1), np.array([k]))
    inner = a_k - gamma * eps[0].reshape(a_k.shape)
    if sigma > 0.0:
        inner = inner + sigma * np.asarray(noise, dtype=np.float64)
    return alpha * inner


ACTION_LO = np.array([-TRANS_LIMIT] * 3 + [-ROT_LIMIT] * 3 + [-1.0])
ACTION_HI = -ACTION_LO


def clip_chunk(chunk: np.ndarray) -> np.ndarray:
    return np.clip(chunk, ACTION_LO, ACTION_HI)


def chunk_scale(config: ModelConfig) -> np.ndarray:
    """Per-coordinate action bounds tiled over the chunk, for normalizing
    chunks to [-1, 1] so the diffusion process sees unit-scale targets."""
    return np.tile(ACTION_HI, config.chunk_len)


def sample_actions(params: dict, config: ModelConfig, schedule: NoiseSchedule, c: np.ndarray,
                   rng: np.random.Generator, n_samples: int = 4) -> np.ndarray:
    """Average of M reverse chains from Gaussian chunks, clipped to action bounds."""
    if n_samples < 1:
        raise InvalidInputError("n_samples must be >= 1")
    m = n_samples
    chunks = rng.standard_normal((m, config.chunk_dim))
    cm = np.broadcast_to(c, (m, len(c)))
    for k in range(schedule.steps, 0, -1):
        alpha, gamma, sigma = schedule.coefficients(k)
        eps, _ = denoiser_forward(params, config, cm, chunks, np.full(m, k))
        inner = chunks - gamma * eps
        if sigma > 0.0:
            inner = inner + sigma * rng.standard_normal(chunks.shape)
        chunks = alpha * inner
    mean = chunks.mean(axis=0) * chunk_scale(config)
    return clip_chunk(mean.reshape(config.chunk_len, config.action_dim))


def conditioner_input(config: ModelConfig, embedding: np.ndarray, proprio: np.ndarray,
                      goal_vec: np.ndarray) -> np.ndarray:
    return np.concatenate([embedding, proprio, goal_vec])


# --- co-training forward/backward -------------------------------------------


def forward_losses(params: dict, config: ModelConfig, schedule: NoiseSchedule, batch, rng,
                   weights=None, compute_grads: bool = True, bc_weight: float = 1.0):
    """All loss terms of the co-training objective plus reverse-mode gradients.

    `batch` is a data.TrainingBatch; returns (losses.LossReport, grads dict).
    """
    from . import losses as L

    weights = weights or L.LossWeights()
    grads: dict = {}

    # one stacked encoder pass over every image the batch touches
    enc_rows = []
    for item in batch.bc_items:
        enc_rows.append(encoder_input(config, item.image, item.goal))
    for pair in batch.align_pairs:
        enc_rows.append(encoder_input(config, pair.image_a, pair.goal_a))
        enc_rows.append(encoder_input(config, pair.image_b, pair.goal_b))
    for pair in batch.ext_pairs:
        enc_rows.append(encoder_input(config, pair.image_a, pair.goal))
        enc_rows.append(encoder_input(config, pair.image_b, pair.goal))
    for item in batch.bbox_items:
        enc_rows.append(encoder_input(config, item.image, item.goal))
    if not enc_rows:
        raise InvalidInputError("empty training batch")

    emb, enc_cache = encode_batch(params, config, np.stack(enc_rows))
    d_emb = np.zeros_like(emb)

    n_bc = len(batch.bc_items)
    n_al = len(batch.align_pairs)
    n_ext = len(batch.ext_pairs)
    o_al = n_bc
    o_ext = o_al + 2 * n_al
    o_bb = o_ext + 2 * n_ext

    # behavior cloning via diffusion noise prediction
    l_bc = 0.0
    if n_bc:
        cond_in = np.stack(
            [
                conditioner_input(config, emb[i], batch.bc_items[i].proprio,
                                  batch.bc_items[i].goal.one_hot())
                for i in range(n_bc)
            ]
        )
        c, cond_cache = mlp_forward(params, config, "cond", cond_in)
        chunks = np.stack([item.chunk.reshape(-1) for item in batch.bc_items])
        chunks = chunks / chunk_scale(config)
        ks = rng.integers(1, schedule.steps + 1, size=n_bc)
        eps = rng.standard_normal(chunks.shape)
        bars = schedule.alpha_bars[ks - 1][:, None]
        corrupted = np.sqrt(bars) * chunks + np.sqrt(1.0 - bars) * eps
        pred, den_cache = denoiser_forward(params, config, c, corrupted, ks)
        resid = pred - eps
        l_bc = float(np.mean(resid**2))
        if compute_grads and bc_weight != 0.0:
            d_pred = bc_weight * 2.0 * resid / resid.size
            d_den_in = mlp_backward(params, config, den_cache, d_pred, grads)
            d_c = d_den_in[:, : config.cond_dim]
            d_cond_in = mlp_backward(params, config, cond_cache, d_c, grads)
            d_emb[:n_bc] += d_cond_in[:, : config.embedding_dim]

    # contrastive alignment on the f head
    l_pos = l_neg = 0.0
    n_pos = n_neg = 0
    if n_al:
        al_emb = emb[o_al : o_al + 2 * n_al]
        fa_all, al_cache = mlp_forward(params, config, "head_align", al_emb)
        fa = fa_all[0::2]
        fb = fa_all[1::2]
        positive = np.array([p.label.is_positive for p in batch.align_pairs])
        l_pos, l_neg, d_fa, d_fb, n_pos, n_neg = L.alignment_losses(
            fa, fb, positive, weights.margin
        )
        if compute_grads and (weights.lambda_align > 0.0):
            d_f = np.zeros_like(fa_all)
            d_f[0::2] = weights.lambda_align * d_fa
            d_f[1::2] = weights.lambda_align * d_fb
            d_al = mlp_backward(params, config, al_cache, d_f, grads)
            d_emb[o_al : o_al + 2 * n_al] += d_al

    # extrinsics regression on the g head
    l_ext = 0.0
    if n_ext:
        ex_emb = emb[o_ext : o_ext + 2 * n_ext]
        g_all, ex_cache = mlp_forward(params, config, "head_ext", ex_emb)
        targets = np.stack([p.target for p in batch.ext_pairs])
        l_ext, d_gk, d_gl = L.loss_ext(g_all[0::2], g_all[1::2], targets)
        if compute_grads and weights.lambda_ext > 0.0:
            d_g = np.zeros_like(g_all)
            d_g[0::2] = weights.lambda_ext * d_gk
            d_g[1::2] = weights.lambda_ext * d_gl
            d_ex = mlp_backward(params, config, ex_cache, d_g, grads)
            d_emb[o_ext : o_ext + 2 * n_ext] += d_ex

    # bounding-box regression on the h head
    l_bbox = 0.0
    n_bb = len(batch.bbox_items)
    if n_bb:
        bb_emb = emb[o_bb : o_bb + n_bb]
        hpred, bb_cache = mlp_forward(params, config, "head_bbox", bb_emb, sigmoid_out=True)
        targets = np.stack([item.target for item in batch.bbox_items])
        mask = np.stack([item.coord_mask for item in batch.bbox_items])
        l_bbox, d_h = L.loss_bbox_arrays(hpred, targets, mask)
        if compute_grads and weights.lambda_bbox > 0.0:
            d_bb = mlp_backward(params, config, bb_cache, weights.lambda_bbox * d_h, grads)
            d_emb[o_bb : o_bb + n_bb] += d_bb

    if compute_grads:
        mlp_backward(params, config, enc_cache, d_emb, grads)
        for name in params:
            if name not in grads:
                grads[name] = np.zeros_like(params[name])

    report = L.LossReport(
        l_pos=l_pos,
        l_neg=l_neg,
        l_ext=l_ext,
        l_bbox=l_bbox,
        l_bc=l_bc,
        n_pos=n_pos,
        n_neg=n_neg,
        n_ext=n_ext,
        n_bbox=n_bb,
        n_bc=n_bc,
        weights=weights,
    )
    if not math.isfinite(report.l_total):
        term = next(
            (name for name, v in report.terms().items() if not math.isfinite(v)), "l_total"
        )
        raise NumericFailureError(f"non-finite loss term {term}", term=term)
    return report, grads


# --- gradient checking -------------------------------------------------------


@dataclass
class GradReport:
    per_tensor: dict  # name -> max relative error
    threshold: float = 1e-4

    @property
    def max_error(self):
        return max(self.per_tensor.values()) if self.per_tensor else 0.0

    @property
    def passed(self):
        return self.max_error <= self.threshold


def grad_check(params: dict, config: ModelConfig, schedule: NoiseSchedule, batch,
               weights=None, seed: int = 0, tolerance: float = 1e-4,
               fd_step: float = 1e-4, max_coords: int = 200,
               analytic_grads: dict | None = None) -> GradReport:
    """Central-difference check of the analytic gradient of the total loss.

    The stochastic parts of the loss (diffusion step and noise draws) are made
    deterministic by reseeding per evaluation. Tensors larger than
    `max_coords` are checked on a fixed random coordinate subsample.
    """

    def total(p):
        report, _ = forward_losses(
            p, config, schedule, batch, np.random.default_rng(seed), weights,
            compute_grads=False,
        )
        return report.l_total

    if analytic_grads is None:
        _, analytic_grads = forward_losses(
            params, config, schedule, batch, np.random.default_rng(seed), weights
        )
    coord_rng = np.random.default_rng(12345)
    per_tensor = {}
    work = {k: v.copy() for k, v in params.items()}
    for name, tensor in params.items():
        if tensor.size == 0:
            continue
        if tensor.size <= max_coords:
            idxs = np.arange(tensor.size)
        else:
            idxs = coord_rng.choice(tensor.size, size=max_coords, replace=False)
        worst = 0.0
        flat = work[name].reshape(-1)

        def central(i, h):
            orig = flat[i]
            flat[i] = orig + h
            hi = total(work)
            flat[i] = orig - h
            lo = total(work)
            flat[i] = orig
            return (hi - lo) / (2.0 * h)

        for i in idxs:
            fd = central(i, fd_step)
            ga = analytic_grads[name].reshape(-1)[i]
            rel = abs(ga - fd) / max(1e-8, abs(ga) + abs(fd))
            if rel > tolerance:
                # a ReLU/hinge kink inside the stencil makes the central
                # difference self-inconsistent; such coordinates carry no
                # information about the analytic gradient and are skipped
                fd_half = central(i, fd_step / 2.0)
                if abs(fd - fd_half) / max(1e-8, abs(fd) + abs(fd_half)) > 0.01:
                    continue
            worst = max(worst, rel)
        per_tensor[name] = worst
    return GradReport(per_tensor, threshold=tolerance)
