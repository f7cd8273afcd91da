"""Scalar objectives of the co-training scheme.

All dataset sums are realized as per-batch means so the weighting
coefficients stay batch-size independent. Functions operating on arrays
also return gradients with respect to their inputs for use by the
hand-written backward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, NumericFailureError


@dataclass(frozen=True)
class LossWeights:
    lambda_align: float = 1.0
    lambda_ext: float = 0.5
    lambda_bbox: float = 0.5
    margin: float = 0.5

    def __post_init__(self):
        if min(self.lambda_align, self.lambda_ext, self.lambda_bbox) < 0:
            raise InvalidInputError("loss weights must be >= 0")
        if self.margin <= 0:
            raise InvalidInputError("margin must be > 0")


@dataclass(frozen=True)
class LossReport:
    l_pos: float
    l_neg: float
    l_ext: float
    l_bbox: float
    l_bc: float
    n_pos: int = 0
    n_neg: int = 0
    n_ext: int = 0
    n_bbox: int = 0
    n_bc: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    @property
    def l_alignment(self):
        return self.l_pos + self.l_neg

    @property
    def l_total(self):
        w = self.weights
        return (
            self.l_bc
            + w.lambda_align * self.l_alignment
            + w.lambda_ext * self.l_ext
            + w.lambda_bbox * self.l_bbox
        )

    def terms(self) -> dict:
        return {
            "l_pos": self.l_pos,
            "l_neg": self.l_neg,
            "l_alignment": self.l_alignment,
            "l_ext": self.l_ext,
            "l_bbox": self.l_bbox,
            "l_bc": self.l_bc,
            "l_total": self.l_total,
        }

    CSV_HEADER = "step,l_pos,l_neg,l_alignment,l_ext,l_bbox,l_bc,l_total"

    def csv_row(self, step: int) -> str:
        t = self.terms()
        return ",".join(
            [str(step)]
            + [f"{t[k]:.8g}" for k in ("l_pos", "l_neg", "l_alignment", "l_ext", "l_bbox", "l_bc", "l_total")]
        )


def _pair_arrays(pairs):
    a = np.stack([np.asarray(p[0], dtype=np.float64) for p in pairs])
    b = np.stack([np.asarray(p[1], dtype=np.float64) for p in pairs])
    return a, b


def loss_pos(pairs) -> float:
    """Mean squared L2 distance between head outputs of positive pairs."""
    pairs = list(pairs)
    if not pairs:
        return 0.0
    a, b = _pair_arrays(pairs)
    return float(np.mean(np.sum((a - b) ** 2, axis=1)))


def loss_neg(pairs, margin: float = 0.5) -> float:
    """Mean hinge max(0, margin - squared distance) over negative pairs."""
    if margin <= 0:
        raise InvalidInputError("margin must be > 0")
    pairs = list(pairs)
    if not pairs:
        return 0.0
    a, b = _pair_arrays(pairs)
    d2 = np.sum((a - b) ** 2, axis=1)
    return float(np.mean(np.maximum(0.0, margin - d2)))


def alignment_losses(fa: np.ndarray, fb: np.ndarray, positive: np.ndarray, margin: float):
    """Positive and negative alignment terms plus gradients w.r.t. fa, fb.

    The returned gradients are those of l_pos + l_neg (each term already
    normalized by its own pair count).
    """
    diff = fa - fb
    d2 = np.sum(diff**2, axis=1)
    n_pos = int(np.sum(positive))
    n_neg = len(positive) - n_pos
    l_pos = float(np.mean(d2[positive])) if n_pos else 0.0
    hinge = np.maximum(0.0, margin - d2[~positive])
    l_neg = float(np.mean(hinge)) if n_neg else 0.0

    dd2 = np.zeros(len(positive))
    if n_pos:
        dd2[positive] = 1.0 / n_pos
    if n_neg:
        active = (margin - d2 > 0.0) & ~positive
        dd2[active] = -1.0 / n_neg
    d_fa = 2.0 * diff * dd2[:, None]
    return l_pos, l_neg, d_fa, -d_fa, n_pos, n_neg


def loss_ext(gk: np.ndarray, gl: np.ndarray, targets: np.ndarray):
    """Mean squared norm of (g_k - g_l - target); returns grads w.r.t. gk, gl."""
    resid = gk - gl - targets
    n = len(resid)
    val = float(np.mean(np.sum(resid**2, axis=1)))
    d = 2.0 * resid / n
    return val, d, -d


def loss_bbox_arrays(pred: np.ndarray, targets: np.ndarray, mask: np.ndarray):
    """Per-coordinate MSE over visible box coordinates only.

    mask is boolean per coordinate (4 entries per box); fully masked batches
    contribute 0.
    """
    mask = mask.astype(bool)
    n_vis = int(mask.sum())
    if n_vis == 0:
        return 0.0, np.zeros_like(pred)
    resid = (pred - targets) * mask
    val = float(np.sum(resid**2) / n_vis)
    return val, 2.0 * resid / n_vis


def loss_bbox(items) -> float:
    """items: sequence of (prediction 8-vector, target 8-vector, visible (2,))."""
    preds, targets, masks = [], [], []
    for pred, target, visible in items:
        preds.append(np.asarray(pred, dtype=np.float64))
        targets.append(np.asarray(target, dtype=np.float64))
        masks.append(np.repeat(np.asarray(visible, dtype=bool), 4))
    if not preds:
        return 0.0
    val, _ = loss_bbox_arrays(np.stack(preds), np.stack(targets), np.stack(masks))
    return val


def loss_bc(params, config, schedule, items, rng) -> float:
    """Diffusion noise-prediction MSE over (conditioning, clean chunk) items."""
    from . import model as M

    cs = np.stack([np.asarray(c, dtype=np.float64) for c, _ in items])
    chunks = np.stack([np.asarray(a, dtype=np.float64).reshape(-1) for _, a in items])
    chunks = chunks / M.chunk_scale(config)
    ks = rng.integers(1, schedule.steps + 1, size=len(items))
    eps = rng.standard_normal(chunks.shape)
    bars = schedule.alpha_bars[ks - 1][:, None]
    corrupted = np.sqrt(bars) * chunks + np.sqrt(1.0 - bars) * eps
    pred, _ = M.denoiser_forward(params, config, cs, corrupted, ks)
    return float(np.mean((pred - eps) ** 2))


def loss_total(l_bc: float, l_alignment: float, l_ext: float, l_bbox: float,
               weights: LossWeights) -> float:
    components = (l_bc, l_alignment, l_ext, l_bbox)
    if not all(math.isfinite(v) for v in components):
        raise NumericFailureError(f"non-finite loss component: {components}")
    return (
        l_bc
        + weights.lambda_align * l_alignment
        + weights.lambda_ext * l_ext
        + weights.lambda_bbox * l_bbox
    )
