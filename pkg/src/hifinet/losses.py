"""Training objectives: metric-learning localization loss, hierarchical
class probabilities, per-level cross-entropy and the gated total."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import tensor as tc
from .taxonomy import NUM_LEVELS, TaxonomyTree
from .tensor import NumericError, ShapeError, Tensor

CE_FLOOR = 1e-12
MASK_THRESHOLD = 0.5


@dataclass
class LocalizationCalibration:
    center: np.ndarray
    tau: float
    d_max: float
    margin_factor: float = 2.5

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        if not np.isfinite(self.center).all():
            raise NumericError("calibration center must be finite")
        if not self.tau > 0:
            raise ValueError(f"margin tau must be positive, got {self.tau}")

    @property
    def dim(self) -> int:
        return self.center.shape[0]


@dataclass(frozen=True)
class LossWeights:
    """Component weights for forged and real samples.

    Defaults weight the localization and level-4 terms by 100 on forged
    images and by 1 on real ones.
    """

    loc_forged: float = 100.0
    loc_real: float = 1.0
    w4_forged: float = 100.0
    w4_real: float = 1.0
    hierarchy_on: bool = True
    levels_on: tuple[bool, bool, bool, bool] = (True, True, True, True)

    def __post_init__(self):
        for name in ("loc_forged", "loc_real", "w4_forged", "w4_real"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")
        if len(self.levels_on) != NUM_LEVELS:
            raise ValueError("levels_on needs four flags")

    @classmethod
    def preset(cls, name: str, lam: float = 100.0, **kw) -> "LossWeights":
        """``weighted`` (the class defaults) or ``shared`` (one lambda on the
        localization term for every sample, unweighted cross-entropies)."""
        if name == "weighted":
            return cls(**kw)
        if name == "shared":
            return cls(loc_forged=lam, loc_real=lam, w4_forged=1.0, w4_real=1.0, **kw)
        raise ValueError(f"unknown loss preset {name!r}")


# --------------------------------------------------------------------------
# calibration


def compute_center(embeddings: Iterable[np.ndarray]) -> np.ndarray:
    """Mean per-pixel embedding over every pixel of every real image.

    ``embeddings`` yields arrays shaped [D,H,W] or [B,D,H,W].
    """
    total, count = None, 0
    for e in embeddings:
        e = np.asarray(e, dtype=np.float64)
        if e.ndim == 3:
            e = e[None]
        s = e.sum(axis=(0, 2, 3))
        total = s if total is None else total + s
        count += e.shape[0] * e.shape[2] * e.shape[3]
    if count == 0:
        raise ValueError("compute_center: no real samples")
    return total / count


def pixel_distances(embed: np.ndarray, center: np.ndarray) -> np.ndarray:
    """L2 distance of each pixel embedding to ``center``; [..,D,H,W] -> [..,H,W]."""
    diff = embed - center.reshape((-1, 1, 1))
    return np.sqrt((diff * diff).sum(axis=-3))


def compute_margin(center: np.ndarray, embeddings: Iterable[np.ndarray], factor: float = 2.5) -> tuple[float, float]:
    """Return ``(tau, d_max)`` with d_max the largest real-pixel distance."""
    d_max, seen = 0.0, False
    for e in embeddings:
        d = pixel_distances(np.asarray(e, dtype=np.float64), np.asarray(center, dtype=np.float64))
        if d.size:
            seen = True
            d_max = max(d_max, float(d.max()))
    if not seen:
        raise ValueError("compute_margin: no real samples")
    if d_max == 0.0:
        raise NumericError("compute_margin: all real embeddings coincide with the center (D_max = 0)")
    return factor * d_max, d_max


# --------------------------------------------------------------------------
# localization


def localization_loss(pixel_embed, gt_mask, calib: LocalizationCalibration, per_sample: bool = False) -> Tensor:
    """Mean over pixels of ``||e-c||`` (real) or ``max(0, tau-||e-c||)`` (forged).

    ``pixel_embed`` is [D,H,W] or [B,D,H,W]; ``gt_mask`` matches with one
    channel.  With ``per_sample`` a batched input returns one loss per image.
    """
    e = tc.as_tensor(pixel_embed)
    m = np.asarray(gt_mask.data if isinstance(gt_mask, Tensor) else gt_mask, dtype=np.float64)
    if e.ndim not in (3, 4) or m.shape != e.shape[:-3] + (1,) + e.shape[-2:]:
        raise ShapeError(f"localization_loss: mask {m.shape} does not match embeddings {e.shape}")
    if e.shape[-3] != calib.dim:
        raise ShapeError(f"localization_loss: embedding dim {e.shape[-3]} != center dim {calib.dim}")
    c = np.broadcast_to(calib.center.reshape((-1, 1, 1)), e.shape).copy()
    dist = tc.l2norm(tc.sub(e, Tensor(c)), axes=-3)          # [..,H,W]
    forged = m[..., 0, :, :]
    real_term = tc.mul(dist, Tensor(1.0 - forged))
    hinge = tc.relu(tc.add(tc.scale(dist, -1.0), calib.tau))
    forged_term = tc.mul(hinge, Tensor(forged))
    per_pixel = tc.add(real_term, forged_term)
    if per_sample and e.ndim == 4:
        return tc.mean(per_pixel, axes=(1, 2))
    return tc.mean(per_pixel)


def mask_score(pixel_embed, calib: LocalizationCalibration) -> np.ndarray:
    """Per-pixel ``min(||e-c|| / tau, 1)``, shape [..,1,H,W]."""
    if not calib.tau > 0:
        raise ValueError("mask_score: tau must be positive")
    e = pixel_embed.data if isinstance(pixel_embed, Tensor) else np.asarray(pixel_embed, dtype=np.float64)
    d = pixel_distances(e, calib.center)
    return np.minimum(d / calib.tau, 1.0)[..., None, :, :]


def binarize(scores: np.ndarray, threshold: float = MASK_THRESHOLD) -> np.ndarray:
    return (np.asarray(scores) >= threshold).astype(np.float64)


# --------------------------------------------------------------------------
# classification


def hierarchical_probs(tree: TaxonomyTree, logits: Sequence, hierarchy_on: bool = True) -> list[Tensor]:
    """Per-level distributions; level b>1 logits are scaled by
    ``1 + p(parent)`` before the softmax when ``hierarchy_on``."""
    if len(logits) != NUM_LEVELS:
        raise ShapeError(f"need {NUM_LEVELS} logit vectors, got {len(logits)}")
    logits = [tc.as_tensor(z) for z in logits]
    for b, (z, k) in enumerate(zip(logits, tree.sizes), start=1):
        if z.shape[-1] != k:
            raise ShapeError(f"level {b}: expected {k} logits, got {z.shape[-1]}")
    probs = [tc.softmax(logits[0], axis=-1)]
    for b in range(2, NUM_LEVELS + 1):
        z = logits[b - 1]
        if hierarchy_on:
            mult = tc.add(tree.broadcast_parent_probs(b, probs[-1]), 1.0)
            z = tc.mul(z, mult)
        probs.append(tc.softmax(z, axis=-1))
    return probs


def level_cross_entropy(probs, target) -> Tensor:
    """``-log p[target]`` with p floored at 1e-12.

    ``probs`` [K] with an int target gives a scalar; ``probs`` [B,K] with B
    targets gives a [B] vector.
    """
    p = tc.as_tensor(probs)
    single = p.ndim == 1
    if single:
        p = tc.reshape(p, (1, p.shape[0]))
    tgt = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if tgt.shape != (p.shape[0],):
        raise ShapeError(f"level_cross_entropy: {tgt.shape[0]} targets for {p.shape[0]} rows")
    if tgt.min() < 0 or tgt.max() >= p.shape[1]:
        raise IndexError(f"level_cross_entropy: target out of range for {p.shape[1]} classes")
    nll = tc.scale(tc.log(tc.pick(p, tgt), CE_FLOOR), -1.0)
    return tc.reshape(nll, ()) if single else nll


def total_loss(sample_is_forged: bool, l_loc: float, l_cls: Sequence[float], weights: LossWeights) -> float:
    """Scalar gated objective for one sample from already-computed components."""
    comps = [l_loc, *l_cls]
    if len(l_cls) != NUM_LEVELS:
        raise ValueError("need four classification losses")
    if not all(math.isfinite(float(v)) for v in comps):
        raise NumericError("total_loss: non-finite component")
    w = component_weights(sample_is_forged, weights)
    return float(sum(wi * float(v) for wi, v in zip(w, comps)))


def component_weights(sample_is_forged: bool, weights: LossWeights) -> list[float]:
    """Weights for ``[L_loc, L1, L2, L3, L4]``."""
    on = [1.0 if f else 0.0 for f in weights.levels_on]
    if sample_is_forged:
        return [weights.loc_forged, on[0], on[1], on[2], weights.w4_forged * on[3]]
    return [weights.loc_real, 0.0, 0.0, 0.0, weights.w4_real * on[3]]


def batch_total_loss(is_forged: np.ndarray, l_loc: Tensor, l_cls: Sequence[Tensor],
                     weights: LossWeights) -> tuple[Tensor, np.ndarray]:
    """Sum of per-sample gated objectives.

    ``l_loc`` and each entry of ``l_cls`` are [B] tensors; levels that do not
    apply to a sample (e.g. levels 1-3 for real images) must still hold a
    finite placeholder and receive weight 0.  Returns the total and the
    [B,5] weight matrix used.
    """
    w = np.array([component_weights(bool(f), weights) for f in is_forged], dtype=np.float64)
    total = tc.sum_(tc.mul(l_loc, Tensor(w[:, 0])))
    for b, lc in enumerate(l_cls, start=1):
        if np.any(w[:, b]):
            total = tc.add(total, tc.sum_(tc.mul(lc, Tensor(w[:, b]))))
    return total, w
