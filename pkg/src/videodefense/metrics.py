"""Quality metrics and the purification harness (JPEG and resize round
trips) used to measure how much of the protection survives common
transmission-time processing."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .losses import LossConfig, misclassification_rates
from .models import SegModel
from .tensor import bilinear_resize_array


def psnr(x: np.ndarray, y: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB against a unit peak; +inf when equal."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"psnr: shape mismatch {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def band_energy(x: np.ndarray) -> tuple[float, float, float]:
    """(low, mid, high) spectral energy fractions.

    The centered spectrum is partitioned radially at R/3 and 2R/3 with
    R = min(H, W)/2; the triple is normalized to sum to 1.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, :, None]
    h, w = x.shape[:2]
    spec = np.fft.fftshift(np.fft.fft2(x, axes=(0, 1)), axes=(0, 1))
    energy = (np.abs(spec) ** 2).sum(axis=2)
    yy = np.arange(h)[:, None] - h // 2
    xx = np.arange(w)[None, :] - w // 2
    r = np.sqrt(yy * yy + xx * xx)
    rmax = min(h, w) / 2.0
    low = float(energy[r <= rmax / 3.0].sum())
    mid = float(energy[(r > rmax / 3.0) & (r <= 2.0 * rmax / 3.0)].sum())
    high = float(energy[r > 2.0 * rmax / 3.0].sum())
    total = low + mid + high
    if total == 0.0:
        return (1.0, 0.0, 0.0)
    return (low / total, mid / total, high / total)


def jpeg_roundtrip(x: np.ndarray, quality: int) -> np.ndarray:
    """Baseline JPEG encode/decode (4:2:0 chroma subsampling) back to [0, 1]."""
    if not 1 <= int(quality) <= 100:
        raise ValueError(f"jpeg quality must be in [1, 100], got {quality}")
    arr = np.floor(np.clip(x, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="JPEG",
                                          quality=int(quality), subsampling=2)
    buf.seek(0)
    with Image.open(buf) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def resize_roundtrip(x: np.ndarray, scale: float) -> np.ndarray:
    """Bilinear resize to round(dim*scale) and back to the original dims."""
    if scale <= 0:
        raise ValueError(f"resize scale must be positive, got {scale}")
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[:2]
    if scale == 1.0:
        return x.copy()
    ih = int(np.floor(h * scale + 0.5))
    iw = int(np.floor(w * scale + 0.5))
    if ih < 1 or iw < 1:
        raise ValueError(f"degenerate intermediate size {ih}x{iw}")
    small = bilinear_resize_array(x, ih, iw, scale, scale)
    return bilinear_resize_array(small, h, w, h / ih, w / iw)


@dataclass
class PurificationSpec:
    kind: str                  # "jpeg" or "resize"
    quality: int | None = None
    scale: float | None = None

    def __post_init__(self):
        if self.kind == "jpeg":
            if self.quality is None or not 1 <= int(self.quality) <= 100:
                raise ValueError(f"jpeg purification needs quality in [1, 100]: {self.quality}")
        elif self.kind == "resize":
            if self.scale is None or self.scale <= 0:
                raise ValueError(f"resize purification needs a positive scale: {self.scale}")
        else:
            raise ValueError(f"unknown purification kind {self.kind!r}")

    @classmethod
    def parse(cls, text: str) -> "PurificationSpec":
        """Parse 'jpeg:75' or 'resize:0.6'."""
        kind, _, value = text.partition(":")
        kind = kind.strip().lower()
        if kind == "jpeg":
            return cls(kind="jpeg", quality=int(value))
        if kind == "resize":
            return cls(kind="resize", scale=float(value))
        raise ValueError(f"cannot parse purification spec {text!r}")

    def label(self) -> str:
        if self.kind == "jpeg":
            return f"jpeg:{self.quality}"
        return f"resize:{self.scale:g}"

    def apply(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "jpeg":
            return jpeg_roundtrip(x, self.quality)
        return resize_roundtrip(x, self.scale)


@dataclass
class RobustnessReport:
    scales: list[float]
    pre_rates: list[list[float]]          # [frame][scale]
    sections: list[dict]                  # one per purification spec

    def to_json_dict(self) -> dict:
        return {
            "scales": self.scales,
            "pre_rates": self.pre_rates,
            "purifications": self.sections,
        }

    def csv_rows(self) -> list[tuple]:
        rows = []
        for section in self.sections:
            label = section["spec"]
            for entry in section["frames"]:
                f = entry["frame"]
                for k in range(len(self.scales)):
                    rows.append((f, label, k,
                                 self.pre_rates[f][k],
                                 entry["rates"][k],
                                 entry["retention"][k],
                                 entry["psnr"]))
        return rows


def _retention(pre: float, post: float) -> float:
    if pre > 0.0:
        return post / pre
    return 1.0 if post == 0.0 else math.inf


def evaluate_robustness(protected_frames, clean_frames, masks, model: SegModel,
                        specs: list[PurificationSpec], loss_cfg: LossConfig) -> RobustnessReport:
    """Rates on purified protected frames, with retention = post/pre per scale."""
    if len(protected_frames) != len(clean_frames) or len(protected_frames) != len(masks):
        raise ValueError("protected/clean/mask sequences are misaligned")
    pre_rates = []
    for xp, mask in zip(protected_frames, masks):
        rates, _ = misclassification_rates(xp, mask, model, loss_cfg)
        pre_rates.append(rates)
    sections = []
    for spec in specs:
        frames = []
        for i, (xp, clean, mask) in enumerate(zip(protected_frames, clean_frames, masks)):
            purified = spec.apply(xp)
            rates, _ = misclassification_rates(purified, mask, model, loss_cfg)
            frames.append({
                "frame": i,
                "rates": rates,
                "retention": [_retention(pre, post)
                              for pre, post in zip(pre_rates[i], rates)],
                "psnr": psnr(purified, clean),
            })
        mean_rates = np.mean([f["rates"] for f in frames], axis=0)
        sections.append({
            "spec": spec.label(),
            "frames": frames,
            "mean_rates": [float(v) for v in mean_rates],
        })
    return RobustnessReport(scales=list(loss_cfg.scales),
                            pre_rates=pre_rates, sections=sections)


def write_csv(path, report: RobustnessReport) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "spec", "scale_idx", "rate_pre", "rate_post",
                         "retention", "psnr"])
        for row in report.csv_rows():
            writer.writerow(row)
