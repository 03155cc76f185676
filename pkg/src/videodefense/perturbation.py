"""Dual-domain perturbation state: frequency spectrum gated by spatial attention.

A perturbed frame is rendered as

    x' = clamp(x + sigmoid(logits) * ifft2_real(delta), max(x-r, 0), min(x+r, 1))

which keeps the per-pixel deviation inside the L-inf budget ``r`` and the
result inside [0, 1].  The ``literal`` mode renders the unreduced
formulation ``ifft2_real(fft2(x) + delta) * A + x`` instead and is kept
for ablation runs only.  In the spatial ablation the optimization
variable is a pixel-space perturbation carried in ``delta.real`` with a
zero imaginary plane; the budget is then enforced by projecting the
variable itself (see :func:`project_spatial`).
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T

SIDECAR_MAGIC = b"VDFS"
SIDECAR_VERSION = 1


@dataclass
class PerturbationState:
    """Per-frame optimization variables.

    delta: complex (H, W, C) spectrum.  In spatial-noise runs the pixel
        perturbation lives in ``delta.real`` and the imaginary plane is 0.
    logits: (H, W) attention logits; the realized mask is sigmoid(logits).
    frame_index: ordinal of the frame this state belongs to.
    """

    delta: np.ndarray
    logits: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.complex128)
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.delta.ndim != 3:
            raise ValueError(f"delta must be (H, W, C), got {self.delta.shape}")
        if self.logits.shape != self.delta.shape[:2]:
            raise ValueError(
                f"logits {self.logits.shape} do not match delta {self.delta.shape}")

    def copy(self) -> "PerturbationState":
        return PerturbationState(self.delta.copy(), self.logits.copy(), self.frame_index)


def init_attention(face_mask: np.ndarray, inside: float = 0.9, outside: float = 0.1) -> np.ndarray:
    """Attention logits: logit(inside) on mask pixels, logit(outside) elsewhere."""
    if not (0.0 < outside <= inside < 1.0):
        raise ValueError(f"require 0 < outside <= inside < 1, got {outside}, {inside}")
    mask = np.asarray(face_mask, dtype=bool)
    logit = lambda p: np.log(p / (1.0 - p))
    return np.where(mask, logit(inside), logit(outside)).astype(np.float64)


def random_delta(shape: tuple[int, int, int], rng: np.random.Generator,
                 noise_std: float = 0.005, noise_domain: str = "frequency") -> np.ndarray:
    """Fresh i.i.d. perturbation noise with spatial magnitude ~ noise_std.

    Frequency mode draws complex Gaussian entries with per-part std
    noise_std * sqrt(H*W/2), which the 1/(H*W) inverse transform maps back
    to a spatial amplitude of about noise_std.
    """
    h, w, c = shape
    if noise_domain == "frequency":
        sr = noise_std * np.sqrt(h * w / 2.0)
        return rng.normal(0.0, sr, shape) + 1j * rng.normal(0.0, sr, shape)
    return rng.normal(0.0, noise_std, shape).astype(np.float64) + 0j


def budget_bounds(x: np.ndarray, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """Box bounds combining the L-inf budget with the valid pixel range."""
    return np.maximum(x - radius, 0.0), np.minimum(x + radius, 1.0)


def project_spatial(p: np.ndarray, x: np.ndarray, radius: float) -> np.ndarray:
    """Project a pixel-space perturbation so that x + p stays in the budget box."""
    lo, hi = budget_bounds(x, radius)
    return np.clip(p, lo - x, hi - x)


def build_perturbed(tape: T.Tape, x: np.ndarray, state: PerturbationState,
                    radius: float, mode: str = "canonical",
                    spatial_mask: bool = True, noise_domain: str = "frequency"):
    """Construct the differentiable rendering graph of the perturbed frame.

    Returns (x' tensor, delta variable, logits variable or None).
    """
    if not (0.0 < radius <= 1.0):
        raise ValueError(f"radius must be in (0, 1], got {radius}")
    if state.delta.shape != x.shape:
        raise T.ShapeError(f"delta {state.delta.shape} does not match frame {x.shape}")
    if not np.all(np.isfinite(state.delta.view(np.float64))):
        raise ValueError("non-finite perturbation spectrum")
    if mode not in ("canonical", "literal"):
        raise ValueError(f"unknown mode {mode!r}")

    c = x.shape[2]
    xc = tape.constant(x)
    logits_var = None

    if noise_domain == "frequency":
        delta_var = tape.variable(state.delta)
        if mode == "literal":
            recon = T.ifft2_real(T.add(T.fft2(xc), delta_var))
        else:
            recon = T.ifft2_real(delta_var)
    elif noise_domain == "spatial":
        # the pixel-space variable is kept inside the budget box by
        # projection (outside the gradient graph), so no clamp is needed
        # and gradients match a classic projected-gradient iteration
        delta_var = tape.variable(project_spatial(state.delta.real, x, radius))
        recon = delta_var
    else:
        raise ValueError(f"unknown noise domain {noise_domain!r}")

    if spatial_mask:
        logits_var = tape.variable(state.logits)
        attn = T.broadcast_channels(T.sigmoid(logits_var), c)
        contrib = T.mul(attn, recon)
    else:
        contrib = recon

    pre = T.add(xc, contrib)
    if noise_domain == "spatial":
        # variable is pre-projected into the budget box by the optimizer
        return pre, delta_var, logits_var
    lo, hi = budget_bounds(x, radius)
    return T.clamp(pre, lo, hi), delta_var, logits_var


def render(x: np.ndarray, state: PerturbationState, radius: float,
           mode: str = "canonical", spatial_mask: bool = True,
           noise_domain: str = "frequency") -> np.ndarray:
    """Evaluate the perturbed frame without keeping a gradient graph."""
    xp, _, _ = build_perturbed(T.Tape(), x, state, radius, mode, spatial_mask, noise_domain)
    return xp.data


def effective_perturbation(x: np.ndarray, state: PerturbationState, radius: float,
                           mode: str = "canonical", spatial_mask: bool = True,
                           noise_domain: str = "frequency") -> np.ndarray:
    """Realized pixel-space perturbation p = x' - x, with ||p||_inf <= radius."""
    return render(x, state, radius, mode, spatial_mask, noise_domain) - x


# ---------------------------------------------------------------------------
# sidecar serialization
# ---------------------------------------------------------------------------

def save_state(path: str | os.PathLike, state: PerturbationState) -> None:
    """Write the binary sidecar: VDFS header, delta planes, attention logits."""
    h, w, c = state.delta.shape
    with open(path, "wb") as fh:
        fh.write(SIDECAR_MAGIC)
        fh.write(struct.pack("<HIII", SIDECAR_VERSION, h, w, c))
        fh.write(np.ascontiguousarray(state.delta.real, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(state.delta.imag, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(state.logits, dtype="<f8").tobytes())


def load_state(path: str | os.PathLike, frame_index: int = 0) -> PerturbationState:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != SIDECAR_MAGIC:
            raise ValueError(f"{path}: bad sidecar magic {magic!r}")
        version, h, w, c = struct.unpack("<HIII", fh.read(14))
        if version != SIDECAR_VERSION:
            raise ValueError(f"{path}: unsupported sidecar version {version}")
        n = h * w * c
        real = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(h, w, c)
        imag = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(h, w, c)
        logits = np.frombuffer(fh.read(8 * h * w), dtype="<f8").reshape(h, w)
    return PerturbationState(real + 1j * imag, logits.copy(), frame_index)
