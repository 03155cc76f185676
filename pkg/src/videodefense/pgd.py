"""Sign-gradient iteration over the perturbation spectrum and attention
logits, with the L-inf budget enforced at the rendered image and a
rate-based stopping rule.

Descent direction: variables move against the sign of the loss gradient;
because the objective subtracts the segmentation term, descent drives the
masked pixels toward misclassification while the perceptual term reins in
visible distortion.
"""

from __future__ import annotations

import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .losses import LossConfig, LossBreakdown, misclassification_rates, total_loss
from .models import TargetModels
from .perturbation import PerturbationState, build_perturbed, project_spatial, render

STOP_THRESHOLD_MET = "threshold_met"
STOP_ITERATION_CAP = "iteration_cap"


def default_eta_delta(height: int, width: int) -> float:
    """Frequency step whose inverse-transform image step is ~1/255.

    A dense sign step moves every complex coefficient by eta in both parts;
    under the 1/(H*W) inverse normalization the resulting pixel-space
    standard deviation is eta * sqrt(2/(H*W)), so eta = sqrt(H*W/2)/255
    moves pixels by about one 8-bit quantization level per iteration (the
    same convention the warm-start noise magnitude uses).
    """
    return np.sqrt(height * width / 2.0) / 255.0


@dataclass
class AttackConfig:
    """Attack constants plus every ablation toggle.

    eta_delta=None resolves per frame via :func:`default_eta_delta`.
    """

    radius: float = 0.05
    eta_delta: float | None = None
    eta_attention: float = 0.01
    eta_spatial: float = 1.0 / 255.0
    max_iters: int = 500
    stop_threshold: float = 0.80
    rate_check_every: int = 10
    loss: LossConfig = field(default_factory=LossConfig)
    noise_domain: str = "frequency"
    spatial_mask: bool = True
    inherit: bool = True
    eq7_mode: str = "canonical"
    noise_std: float = 0.005
    attention_inside: float = 0.9
    attention_outside: float = 0.1
    seed: int = 0
    data_seed: int = 1234
    weight_seed: int = 7
    verbose: bool = False

    def __post_init__(self):
        if not (0.0 < self.radius <= 1.0):
            raise ValueError(f"radius must be in (0, 1], got {self.radius}")
        if not (0.0 < self.stop_threshold <= 1.0) and self.stop_threshold != 0.0:
            raise ValueError(f"stop_threshold must be in [0, 1], got {self.stop_threshold}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.rate_check_every < 1:
            raise ValueError("rate_check_every must be >= 1")
        if self.noise_domain not in ("frequency", "spatial"):
            raise ValueError(f"unknown noise_domain {self.noise_domain!r}")
        if self.eq7_mode not in ("canonical", "literal"):
            raise ValueError(f"unknown eq7_mode {self.eq7_mode!r}")

    def resolved_eta_delta(self, height: int, width: int) -> float:
        if self.eta_delta is not None:
            return float(self.eta_delta)
        return default_eta_delta(height, width)


@dataclass
class AttackResult:
    iterations_used: int
    rates: list[float]
    breakdown: LossBreakdown
    stop_reason: str
    wall_time: float

    def to_json_dict(self) -> dict:
        return {
            "iterations_used": self.iterations_used,
            "rates": self.rates,
            "loss": self.breakdown.to_json_dict(),
            "stop_reason": self.stop_reason,
        }


def pgd_step(state: PerturbationState, gradients: dict, cfg: AttackConfig,
             eta_delta: float | None = None) -> PerturbationState:
    """Pure sign-step update; sign(0) = 0 leaves a coordinate untouched.

    ``gradients`` carries 'delta' (complex in frequency mode, real in
    spatial mode) and optionally 'logits'.  Logits are never clamped; the
    sigmoid keeps the realized attention in (0, 1).
    """
    g_delta = gradients.get("delta")
    g_logits = gradients.get("logits")
    delta = state.delta
    if g_delta is not None:
        if g_delta.shape != state.delta.shape:
            raise T.ShapeError(f"delta gradient {g_delta.shape} vs {state.delta.shape}")
        if cfg.noise_domain == "frequency":
            eta = cfg.eta_delta if eta_delta is None else eta_delta
            if eta is None:
                eta = default_eta_delta(*state.delta.shape[:2])
            step = np.sign(g_delta.real) + 1j * np.sign(g_delta.imag)
            delta = state.delta - eta * step
        else:
            delta = (state.delta.real - cfg.eta_spatial * np.sign(np.real(g_delta))) + 0j
    logits = state.logits
    if cfg.spatial_mask and g_logits is not None:
        if g_logits.shape != state.logits.shape:
            raise T.ShapeError(f"logits gradient {g_logits.shape} vs {state.logits.shape}")
        logits = state.logits - cfg.eta_attention * np.sign(g_logits)
    return PerturbationState(delta, logits, state.frame_index)


def _check_budget(x: np.ndarray, xp: np.ndarray, radius: float) -> None:
    dev = np.abs(xp - x).max()
    if dev > radius + 1e-9:
        raise RuntimeError(f"budget violated: max deviation {dev} > {radius}")
    if xp.min() < -1e-12 or xp.max() > 1.0 + 1e-12:
        raise RuntimeError("rendered frame left the [0, 1] range")


def attack_frame(x: np.ndarray, mask: np.ndarray, init_state: PerturbationState,
                 models: TargetModels, cfg: AttackConfig):
    """Optimize one frame until every per-scale misclassification rate
    reaches the stop threshold or the iteration cap is hit.

    Returns (final state, protected frame array, AttackResult).
    """
    t0 = time.perf_counter()
    x = np.asarray(x, dtype=np.float64)
    state = init_state.copy()
    if cfg.noise_domain == "spatial":
        state.delta = project_spatial(state.delta.real, x, cfg.radius) + 0j
    eta_delta = cfg.resolved_eta_delta(*x.shape[:2])
    clean_taps = models.features.extract_arrays(x) if cfg.loss.perceptual_on else None

    def rates_of(st: PerturbationState):
        xp = render(x, st, cfg.radius, cfg.eq7_mode, cfg.spatial_mask, cfg.noise_domain)
        _check_budget(x, xp, cfg.radius)
        rates, _ = misclassification_rates(xp, mask, models.seg, cfg.loss)
        return xp, rates

    iterations = 0
    stop_reason = STOP_ITERATION_CAP
    xp_data, rates = rates_of(state)
    if min(rates) >= cfg.stop_threshold:
        stop_reason = STOP_THRESHOLD_MET
    else:
        for i in range(1, cfg.max_iters + 1):
            tape = T.Tape()
            xp, delta_var, logits_var = build_perturbed(
                tape, x, state, cfg.radius, cfg.eq7_mode, cfg.spatial_mask, cfg.noise_domain)
            loss, bd = total_loss(x, xp, mask, models, cfg.loss,
                                  clean_taps=clean_taps, include_rates=False)
            if not np.isfinite(bd.total):
                raise RuntimeError(
                    f"non-finite loss at iteration {i}: "
                    f"max|delta|={np.abs(state.delta).max():.3e}, "
                    f"seg_terms={bd.seg_terms}, perceptual={bd.perceptual}")
            grads = tape.backward(loss)
            gradients = {"delta": grads[delta_var]}
            if logits_var is not None:
                gradients["logits"] = grads[logits_var]
            state = pgd_step(state, gradients, cfg, eta_delta)
            if cfg.noise_domain == "spatial":
                state.delta = project_spatial(state.delta.real, x, cfg.radius) + 0j
            iterations = i
            if i % cfg.rate_check_every == 0 or i == cfg.max_iters:
                xp_data, rates = rates_of(state)
                if cfg.verbose:
                    print(f"frame {state.frame_index} iter {i}: "
                          f"loss={bd.total:.4f} min_rate={min(rates):.3f}",
                          file=sys.stderr)
                if min(rates) >= cfg.stop_threshold:
                    stop_reason = STOP_THRESHOLD_MET
                    break

    final_tape = T.Tape()
    xp_final, _, _ = build_perturbed(final_tape, x, state, cfg.radius,
                                     cfg.eq7_mode, cfg.spatial_mask, cfg.noise_domain)
    _, breakdown = total_loss(x, xp_final, mask, models, cfg.loss,
                              clean_taps=clean_taps, include_rates=True)
    result = AttackResult(
        iterations_used=iterations,
        rates=breakdown.rates,
        breakdown=breakdown,
        stop_reason=stop_reason,
        wall_time=time.perf_counter() - t0,
    )
    return state, xp_final.data, result
