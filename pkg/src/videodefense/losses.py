"""Adversarial objective: multi-scale segmentation loss minus-combined with
a perceptual feature distance, plus the misclassification statistic that
drives the stopping rule.

Sign convention: the optimizer minimizes

    total = perceptual(x', x) - sum_s seg_term_s(x')

where each seg term is the masked mean of log(1 - P_target + eps) at one
scale, so descent simultaneously suppresses the target class and keeps
the perturbed frame perceptually close to the original.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .models import SegModel, FeatureExtractor, TargetModels

DEFAULT_SCALES = (2.0, 1.5, 1.0, 0.75, 0.5)
DEFAULT_LAYER_WEIGHTS = (1.0, 0.75, 0.5, 0.25)


@dataclass
class LossConfig:
    scales: tuple = DEFAULT_SCALES
    target_classes: tuple = (1,)
    epsilon: float = 1e-8
    layer_weights: tuple = DEFAULT_LAYER_WEIGHTS
    perceptual_on: bool = True
    multiscale_on: bool = True

    def __post_init__(self):
        self.scales = tuple(float(s) for s in self.scales)
        self.target_classes = tuple(int(c) for c in self.target_classes)
        self.layer_weights = tuple(float(w) for w in self.layer_weights)
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ValueError(f"scales must be non-empty and positive: {self.scales}")
        if any(w < 0 for w in self.layer_weights):
            raise ValueError("layer weights must be non-negative")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")



@dataclass
class LossBreakdown:
    seg_terms: list[float] = field(default_factory=list)
    degenerate: list[bool] = field(default_factory=list)
    perceptual: float = 0.0
    total: float = 0.0
    rates: list[float] | None = None

    def to_json_dict(self) -> dict:
        return {
            "seg_terms": self.seg_terms,
            "degenerate": self.degenerate,
            "perceptual": self.perceptual,
            "total": self.total,
            "rates": self.rates,
        }


def resize_mask_nearest(mask: np.ndarray, scale: float) -> np.ndarray:
    """Nearest-neighbor mask resize with the same half-pixel convention as
    the bilinear image resize; a resized binary mask stays binary."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    oh = int(np.floor(h * scale + 0.5))
    ow = int(np.floor(w * scale + 0.5))
    if oh < 1 or ow < 1:
        raise ValueError(f"degenerate mask resize {oh}x{ow}")
    sy = np.clip((np.arange(oh) + 0.5) / scale - 0.5, 0, h - 1)
    sx = np.clip((np.arange(ow) + 0.5) / scale - 0.5, 0, w - 1)
    iy = np.floor(sy + 0.5).astype(np.intp)
    ix = np.floor(sx + 0.5).astype(np.intp)
    return mask[iy][:, ix]


def _target_probability(probs: T.Tensor, target_classes) -> T.Tensor:
    """Per-pixel summed probability of the target classes, shape (H, W, 1)."""
    k = probs.data.shape[2]
    onehot = np.zeros(k)
    for c in target_classes:
        onehot[c] = 1.0
    sel = np.broadcast_to(onehot, probs.data.shape).copy()
    return T.channel_sum(T.mul(probs, sel))


def multiscale_seg_loss(xp: T.Tensor, mask: np.ndarray, model: SegModel,
                        cfg: LossConfig):
    """Sum over scales of the masked mean of log(1 - P_target + eps).

    Returns (sum tensor, per-scale term tensors, degenerate flags); a scale
    whose resized mask is empty contributes 0 and is flagged.
    """
    if int(np.asarray(mask).sum()) == 0:
        raise ValueError("multiscale_seg_loss: empty mask")
    tape = xp.tape
    terms, degenerate = [], []
    total = None
    for s in cfg.scales:
        scaled = T.resize_bilinear(xp, s) if s != 1.0 else xp
        mask_s = resize_mask_nearest(mask, s)
        if not mask_s.any():
            terms.append(tape.constant(0.0))
            degenerate.append(True)
            continue
        probs = model.forward(scaled)
        p_tgt = _target_probability(probs, cfg.target_classes)
        margin = T.add(T.scalar_mul(p_tgt, -1.0), 1.0 + cfg.epsilon)
        term = T.mean_masked(T.log_stable(margin), mask_s)
        terms.append(term)
        degenerate.append(False)
        total = term if total is None else T.add(total, term)
    if total is None:
        total = tape.constant(0.0)
    return total, terms, degenerate


def perceptual_loss(xp: T.Tensor, y: np.ndarray, fx: FeatureExtractor,
                    cfg: LossConfig, clean_taps: list[np.ndarray] | None = None) -> T.Tensor:
    """Weighted mean-squared feature distance over the extractor's taps."""
    if xp.data.shape != y.shape:
        raise T.ShapeError(f"perceptual_loss: {xp.data.shape} vs {y.shape}")
    if clean_taps is None:
        clean_taps = fx.extract_arrays(y)
    total = None
    for w, tap, ref in zip(cfg.layer_weights, fx.extract(xp), clean_taps):
        diff = T.sub(tap, ref)
        term = T.scalar_mul(T.sum_all(T.mul(diff, diff)), w / ref.size)
        total = term if total is None else T.add(total, term)
    return total


def misclassification_rates(xp: np.ndarray, mask: np.ndarray, model: SegModel,
                            cfg: LossConfig):
    """Per-scale fraction of masked pixels whose argmax class left the
    target set.  An empty resized mask reports rate 1.0 and is flagged."""
    xp = np.asarray(xp, dtype=np.float64)
    rates, degenerate = [], []
    target = set(cfg.target_classes)
    for s in cfg.scales:
        scaled = T.bilinear_resize_array(
            xp, int(np.floor(xp.shape[0] * s + 0.5)), int(np.floor(xp.shape[1] * s + 0.5)),
            s, s) if s != 1.0 else xp
        mask_s = resize_mask_nearest(mask, s)
        n = int(mask_s.sum())
        if n == 0:
            rates.append(1.0)
            degenerate.append(True)
            continue
        pred = model.predict(scaled).argmax(axis=2)
        escaped = ~np.isin(pred[mask_s], list(target))
        rates.append(float(escaped.sum()) / n)
        degenerate.append(False)
    return rates, degenerate


def total_loss(x: np.ndarray, xp: T.Tensor, mask: np.ndarray,
               models: TargetModels, cfg: LossConfig,
               clean_taps: list[np.ndarray] | None = None,
               include_rates: bool = True):
    """Combined objective; disabled terms are exactly zero.

    Returns (loss tensor, LossBreakdown).  ``include_rates=False`` skips the
    non-differentiable rate bookkeeping for inner optimization steps.
    """
    tape = xp.tape
    if cfg.multiscale_on:
        seg_sum, seg_terms, degenerate = multiscale_seg_loss(xp, mask, models.seg, cfg)
    else:
        seg_sum, seg_terms, degenerate = tape.constant(0.0), [], []
    if cfg.perceptual_on:
        sem = perceptual_loss(xp, x, models.features, cfg, clean_taps)
        loss = T.sub(sem, seg_sum)
    else:
        sem = tape.constant(0.0)
        loss = T.scalar_mul(seg_sum, -1.0)
    breakdown = LossBreakdown(
        seg_terms=[t.item() for t in seg_terms],
        degenerate=degenerate,
        perceptual=sem.item(),
        total=loss.item(),
        rates=None,
    )
    if include_rates:
        rates, _ = misclassification_rates(np.asarray(xp.data), mask, models.seg, cfg)
        breakdown.rates = rates
    return loss, breakdown
