"""Frame-sequence orchestration: SSIM-weighted warm starts, the per-frame
attack loop, frame/mask I/O, and the pipeline report.

The frame loop is sequential by contract whenever inheritance is on: each
frame's starting perturbation is the previous frame's result scaled by
their structural similarity, plus fresh seeded noise.
"""

from __future__ import annotations

import json
import os
import re
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

from .metrics import psnr
from .models import TargetModels
from .perturbation import PerturbationState, init_attention, random_delta, save_state
from .pgd import AttackConfig, AttackResult, attack_frame

FRAME_PATTERN = "frame_%06d.png"
MASK_PATTERN = "mask_%06d.png"
SIDECAR_PATTERN = "frame_%06d.vdfs"

_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    g = np.exp(-((np.arange(size) - half) ** 2) / (2.0 * sigma ** 2))
    win = np.outer(g, g)
    return win / win.sum()


_WINDOW = _gaussian_window()


def ssim(x: np.ndarray, y: np.ndarray) -> float:
    """Structural similarity with the standard 11x11 Gaussian window
    (sigma 1.5) on unit dynamic range, valid window positions only,
    averaged over channels."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"ssim: shape mismatch {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x = x[:, :, None]
        y = y[:, :, None]
    h, w, c = x.shape
    k = _WINDOW.shape[0]
    if h < k or w < k:
        raise ValueError(f"ssim: frames smaller than the {k}x{k} window")

    def windowed_mean(img):
        win = sliding_window_view(img, (k, k), axis=(0, 1))
        return np.tensordot(win, _WINDOW, axes=([2, 3], [0, 1]))

    total = 0.0
    for ch in range(c):
        xc, yc = x[:, :, ch], y[:, :, ch]
        mx = windowed_mean(xc)
        my = windowed_mean(yc)
        sxx = windowed_mean(xc * xc) - mx * mx
        syy = windowed_mean(yc * yc) - my * my
        sxy = windowed_mean(xc * yc) - mx * my
        num = (2.0 * mx * my + _SSIM_C1) * (2.0 * sxy + _SSIM_C2)
        den = (mx * mx + my * my + _SSIM_C1) * (sxx + syy + _SSIM_C2)
        total += float(np.mean(num / den))
    return total / c


def init_next_state(prev: PerturbationState, x_next: np.ndarray, x_prev: np.ndarray,
                    mask_next: np.ndarray, cfg: AttackConfig,
                    frame_index: int) -> PerturbationState:
    """Warm start for the next frame.

    With inheritance on: delta = SSIM(next, prev) * delta_prev + fresh noise,
    attention logits copied.  With inheritance off the frame starts cold
    (noise only, attention re-initialized from its mask).
    """
    if prev.delta.shape != x_next.shape:
        raise ValueError(f"state {prev.delta.shape} does not match frame {x_next.shape}")
    rng = np.random.default_rng([cfg.seed, frame_index])
    noise = random_delta(x_next.shape, rng, cfg.noise_std, cfg.noise_domain)
    if cfg.inherit:
        sim = ssim(x_next, x_prev)
        delta = sim * prev.delta + noise
        logits = prev.logits.copy()
    else:
        delta = noise
        logits = init_attention(mask_next, cfg.attention_inside, cfg.attention_outside)
    return PerturbationState(delta, logits, frame_index)


def initial_state(x: np.ndarray, mask: np.ndarray, cfg: AttackConfig,
                  frame_index: int = 0) -> PerturbationState:
    rng = np.random.default_rng([cfg.seed, frame_index])
    return PerturbationState(
        random_delta(x.shape, rng, cfg.noise_std, cfg.noise_domain),
        init_attention(mask, cfg.attention_inside, cfg.attention_outside),
        frame_index)


# ---------------------------------------------------------------------------
# frame I/O
# ---------------------------------------------------------------------------

@dataclass
class FrameSequence:
    frames: list[np.ndarray]
    masks: list[np.ndarray]
    fps: float = 25.0
    paths: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.frames:
            raise ValueError("empty frame sequence")
        shape = self.frames[0].shape
        for i, f in enumerate(self.frames):
            if f.shape != shape:
                raise ValueError(f"frame {i} shape {f.shape} != {shape}")
        for i, m in enumerate(self.masks):
            if m.shape != shape[:2]:
                raise ValueError(f"mask {i} shape {m.shape} != {shape[:2]}")

    def __len__(self):
        return len(self.frames)


def quantize_frame(x: np.ndarray) -> np.ndarray:
    """Round-half-up to 8-bit."""
    return np.floor(np.clip(x, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_frame(path, x: np.ndarray) -> None:
    Image.fromarray(quantize_frame(x), mode="RGB").save(path)


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path)


def read_frame(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def read_mask(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.uint8) >= 128


def load_frames(directory, seg_model=None, fps: float = 25.0):
    """Load frame_*.png (and mask_*.png when present) in index order.

    Missing masks are derived from the segmentation model's prediction on
    the clean frame; returns (sequence, derived_any).
    """
    directory = Path(directory)
    frame_paths = sorted(directory.glob("frame_*.png"))
    if not frame_paths:
        raise FileNotFoundError(f"no frame_*.png files in {directory}")
    frames, masks, paths = [], [], []
    derived = False
    for fp in frame_paths:
        m = re.match(r"frame_(\d+)\.png$", fp.name)
        if not m:
            continue
        frame = read_frame(fp)
        mask_path = directory / (MASK_PATTERN % int(m.group(1)))
        if mask_path.exists():
            mask = read_mask(mask_path)
        else:
            if seg_model is None:
                raise FileNotFoundError(
                    f"{mask_path} missing and no segmentation model given to derive it")
            mask = seg_model.derive_mask(frame)
            derived = True
        frames.append(frame)
        masks.append(mask)
        paths.append(str(fp))
    return FrameSequence(frames, masks, fps=fps, paths=paths), derived


# ---------------------------------------------------------------------------
# the frame loop
# ---------------------------------------------------------------------------

@dataclass
class PipelineReport:
    entries: list[dict]
    aggregates: dict
    config_echo: dict
    derived_masks: bool
    total_wall_time: float

    def to_json_dict(self) -> dict:
        """Deterministic report body; wall times are kept out so reruns
        with identical seeds are byte-identical."""
        return {
            "config": self.config_echo,
            "derived_masks": self.derived_masks,
            "frames": self.entries,
            "aggregates": self.aggregates,
        }


def _frame_entry(index: int, result: AttackResult, sim_prev, quality_psnr, quality_ssim) -> dict:
    entry = result.to_json_dict()
    entry["frame"] = index
    entry["ssim_prev"] = sim_prev
    entry["psnr"] = quality_psnr
    entry["ssim"] = quality_ssim
    return entry


def protect_video(seq: FrameSequence, models: TargetModels, cfg: AttackConfig,
                  out_dir=None, config_echo: dict | None = None,
                  derived_masks: bool = False):
    """Run the sequential defense over a frame sequence.

    When ``out_dir`` is given, writes protected frames, per-frame sidecars,
    report.json and timing.json; on any per-frame failure every file
    written so far is removed (all-or-nothing contract).

    Returns (protected FrameSequence, PipelineReport).
    """
    t0 = time.perf_counter()
    written: list[Path] = []
    out_path = None
    if out_dir is not None:
        out_path = Path(out_dir)
        out_path.mkdir(parents=True, exist_ok=True)
        stale = [p for p in out_path.iterdir() if p.suffix in (".png", ".json", ".vdfs")]
        if stale:
            raise FileExistsError(f"output directory {out_path} is not empty")

    protected: list[np.ndarray] = []
    entries: list[dict] = []
    frame_times: list[float] = []
    state = None
    try:
        for i, (frame, mask) in enumerate(zip(seq.frames, seq.masks)):
            sim_prev = None if i == 0 else ssim(frame, seq.frames[i - 1])
            if i == 0:
                state = initial_state(frame, mask, cfg, 0)
            else:
                state = init_next_state(state, frame, seq.frames[i - 1], mask, cfg, i)
            try:
                state, xp, result = attack_frame(frame, mask, state, models, cfg)
            except Exception as err:
                raise RuntimeError(f"frame {i}: {err}") from err
            protected.append(xp)
            frame_times.append(result.wall_time)
            entries.append(_frame_entry(i, result, sim_prev, psnr(xp, frame), ssim(xp, frame)))
            if out_path is not None:
                fpath = out_path / (FRAME_PATTERN % i)
                write_frame(fpath, xp)
                written.append(fpath)
                spath = out_path / (SIDECAR_PATTERN % i)
                save_state(spath, state)
                written.append(spath)
    except Exception:
        for p in written:
            p.unlink(missing_ok=True)
        raise

    total_time = time.perf_counter() - t0
    rates = np.array([e["rates"] for e in entries], dtype=np.float64)
    aggregates = {
        "mean_iterations": float(np.mean([e["iterations_used"] for e in entries])),
        "mean_psnr": float(np.mean([e["psnr"] for e in entries])),
        "mean_ssim": float(np.mean([e["ssim"] for e in entries])),
        "mean_rates": [float(v) for v in rates.mean(axis=0)],
        "min_rate": float(rates.min()),
        "frames": len(entries),
        "all_threshold_met": all(e["stop_reason"] == "threshold_met" for e in entries),
    }
    report = PipelineReport(
        entries=entries,
        aggregates=aggregates,
        config_echo=config_echo or {},
        derived_masks=derived_masks,
        total_wall_time=total_time,
    )
    if out_path is not None:
        report_file = out_path / "report.json"
        with open(report_file, "w") as fh:
            json.dump(report.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        written.append(report_file)
        timing_file = out_path / "timing.json"
        with open(timing_file, "w") as fh:
            json.dump({
                "total_wall_time": total_time,
                "frame_wall_times": frame_times,
            }, fh, indent=2, sort_keys=True)
            fh.write("\n")

    out_seq = FrameSequence(protected, list(seq.masks), fps=seq.fps)
    return out_seq, report
