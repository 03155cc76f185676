"""Differentiable attack targets and the synthetic data they are trained on.

Desk-scale stand-ins for the networks a real deployment would attack:

* :class:`SegModel` -- a small trainable per-pixel face/background
  classifier (the segmentation target).
* :class:`FeatureExtractor` -- a frozen random-feature pyramid whose four
  taps feed the perceptual loss.
* :func:`analytic_classifier` -- a closed-form color classifier used as an
  independent gradient oracle.
* :func:`generate_scene` -- seeded synthetic portrait-like scenes with an
  exact elliptical face mask.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T

CLASS_BACKGROUND = 0
CLASS_FACE = 1

FEATURE_SEED = 42
FEATURE_STAGES = (8, 16, 32, 64)


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

@dataclass
class SyntheticScene:
    image: np.ndarray   # (H, W, 3) float64 in [0, 1]
    mask: np.ndarray    # (H, W) bool, exact ellipse interior
    seed: object = None


def _box_blur3(img: np.ndarray) -> np.ndarray:
    padded = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    win = sliding_window_view(padded, (3, 3), axis=(0, 1))
    return win.mean(axis=(-2, -1))


def generate_scene(seed, size: int = 64, center_shift=(0.0, 0.0)) -> SyntheticScene:
    """Seeded scene: cool noisy background, skin-toned ellipse with eye dots
    and a mouth bar.  ``center_shift`` translates the ellipse (and its
    features) without re-drawing any random field, so shifted variants of
    one seed form a temporally coherent sequence.
    """
    rng = np.random.default_rng(seed)
    h = w = int(size)
    cy = rng.uniform(h / 3.0, 2.0 * h / 3.0)
    cx = rng.uniform(w / 3.0, 2.0 * w / 3.0)
    ry = rng.uniform(h / 6.0, h / 3.0)
    rx = rng.uniform(w / 6.0, w / 3.0)
    noise = rng.uniform(0.0, 1.0, (h, w, 3))
    face_noise = rng.uniform(0.0, 1.0, (h, w, 3))
    texture = rng.normal(0.0, 0.05, (h, w, 3))
    cy += float(center_shift[0])
    cx += float(center_shift[1])

    img = _box_blur3(_box_blur3(noise))
    img[:, :, 2] += 0.2  # cool background

    yy = np.arange(h, dtype=np.float64)[:, None]
    xx = np.arange(w, dtype=np.float64)[None, :]
    mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0

    # Face fill: an independent smoothed field on a base tone picked so the
    # final class colors nearly overlap; the warm bias keeps the face mean
    # slightly red of the background, and the fine Gaussian texture is the
    # dominant per-pixel cue separating face from the smooth background.
    face = _box_blur3(_box_blur3(face_noise)) + np.array([-0.25, 0.0, 0.15])
    face[:, :, 0] += 0.3  # skin hue
    face += texture
    img = np.where(mask[:, :, None], face, img)

    eye_r2 = (0.12 * min(ry, rx)) ** 2
    for side in (-1.0, 1.0):
        ey, ex = cy - 0.35 * ry, cx + side * 0.35 * rx
        eye = (yy - ey) ** 2 + (xx - ex) ** 2 <= eye_r2
        img[eye] *= 0.35
    mouth = (np.abs(yy - (cy + 0.45 * ry)) <= 0.1 * ry) & (np.abs(xx - cx) <= 0.45 * rx)
    img[mouth & mask] *= 0.5

    return SyntheticScene(np.clip(img, 0.0, 1.0), mask, seed)


def make_scenes(count: int, data_seed: int, size: int = 64) -> list[SyntheticScene]:
    """Independent scenes with per-index derived seeds."""
    return [generate_scene([data_seed, i], size=size) for i in range(count)]


def make_sequence(count: int, data_seed: int, size: int = 64,
                  shift_per_frame: float = 1.0) -> list[SyntheticScene]:
    """One scene whose ellipse translates horizontally by a fixed step per frame."""
    return [generate_scene([data_seed, 0], size=size,
                           center_shift=(0.0, shift_per_frame * i))
            for i in range(count)]


# ---------------------------------------------------------------------------
# segmentation target
# ---------------------------------------------------------------------------

_SEG_PARAM_ORDER = ("w1", "b1", "w2", "b2", "w3", "b3")


class SegModel:
    """3-stage per-pixel classifier: 3->16 (3x3), 16->16 (3x3), 16->K (1x1).

    ReLU between stages, zero padding 1 on the 3x3 stages, channel softmax
    on the output.  Weights stay put during attacks; only train() mutates.
    """

    def __init__(self, classes: int = 2, weight_seed: int = 7):
        self.classes = int(classes)
        rng = np.random.default_rng(weight_seed)
        self.params: dict[str, np.ndarray] = {
            "w1": rng.normal(0.0, 1.0 / np.sqrt(9 * 3), (3, 3, 3, 16)),
            "b1": np.zeros(16),
            "w2": rng.normal(0.0, 1.0 / np.sqrt(9 * 16), (3, 3, 16, 16)),
            "b2": np.zeros(16),
            "w3": rng.normal(0.0, 1.0 / np.sqrt(16), (1, 1, 16, self.classes)),
            "b3": np.zeros(self.classes),
        }

    def _graph(self, x: T.Tensor, weights) -> T.Tensor:
        h1 = T.relu(T.add_channel_bias(T.conv2d(x, weights["w1"], padding=1), weights["b1"]))
        h2 = T.relu(T.add_channel_bias(T.conv2d(h1, weights["w2"], padding=1), weights["b2"]))
        logits = T.add_channel_bias(T.conv2d(h2, weights["w3"]), weights["b3"])
        return T.channel_softmax(logits)

    def forward(self, x: T.Tensor) -> T.Tensor:
        """Class probabilities (H, W, K) with weights held constant."""
        tape = x.tape
        weights = {k: tape.constant(v) for k, v in self.params.items()}
        return self._graph(x, weights)

    def forward_trainable(self, x: T.Tensor, weight_vars: dict[str, T.Tensor]) -> T.Tensor:
        return self._graph(x, weight_vars)

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Probabilities as a plain array (no gradient graph retained)."""
        tape = T.Tape()
        return self.forward(tape.constant(x)).data

    def derive_mask(self, x: np.ndarray) -> np.ndarray:
        """Face mask from the argmax prediction on a clean frame."""
        return self.predict(x).argmax(axis=2) == CLASS_FACE


def _cross_entropy(probs: T.Tensor, mask: np.ndarray, classes: int) -> T.Tensor:
    h, w = mask.shape
    labels = mask.astype(np.intp)
    onehot = np.zeros((h, w, classes))
    onehot[np.arange(h)[:, None], np.arange(w)[None, :], labels] = 1.0
    return T.scalar_mul(T.sum_all(T.mul(T.log_stable(probs), onehot)), -1.0 / (h * w))


def train_seg(model: SegModel, train_scenes, heldout_scenes,
              epochs: int = 30, lr: float = 0.05, batch_size: int = 8) -> dict:
    """Plain minibatch gradient descent on per-pixel cross-entropy.

    Deterministic: fixed scene order, fixed batching, no shuffling.
    Raises RuntimeError if the loss ever goes non-finite.
    """
    last_loss = float("nan")
    for epoch in range(epochs):
        for start in range(0, len(train_scenes), batch_size):
            batch = train_scenes[start:start + batch_size]
            tape = T.Tape()
            wvars = {k: tape.variable(v) for k, v in model.params.items()}
            total = None
            for scene in batch:
                probs = model.forward_trainable(tape.constant(scene.image), wvars)
                ce = _cross_entropy(probs, scene.mask, model.classes)
                total = ce if total is None else T.add(total, ce)
            loss = T.scalar_mul(total, 1.0 / len(batch))
            last_loss = loss.item()
            if not np.isfinite(last_loss):
                raise RuntimeError(
                    f"training diverged at epoch {epoch}, batch {start // batch_size}")
            grads = tape.backward(loss)
            for k in model.params:
                model.params[k] = model.params[k] - lr * grads[wvars[k]]
    return {
        "epochs": epochs,
        "final_loss": last_loss,
        "heldout_accuracy": heldout_accuracy(model, heldout_scenes),
    }


def heldout_accuracy(model: SegModel, scenes) -> float:
    correct = 0
    total = 0
    for scene in scenes:
        pred = model.predict(scene.image).argmax(axis=2)
        correct += int((pred == scene.mask.astype(np.intp)).sum())
        total += pred.size
    return correct / total if total else float("nan")


# ---------------------------------------------------------------------------
# perceptual feature pyramid
# ---------------------------------------------------------------------------

class FeatureExtractor:
    """Four frozen 3x3 stride-2 conv stages (3->8->16->32->64), ReLU taps.

    Weights come from one seeded Gaussian draw (std 1/sqrt(fan_in)) and are
    never updated, so feature distances are stable across runs.
    """

    def __init__(self):
        rng = np.random.default_rng(FEATURE_SEED)
        self.weights: list[np.ndarray] = []
        cin = 3
        for cout in FEATURE_STAGES:
            w = rng.normal(0.0, 1.0 / np.sqrt(9 * cin), (3, 3, cin, cout))
            w.setflags(write=False)
            self.weights.append(w)
            cin = cout

    @staticmethod
    def _check_input(shape):
        if len(shape) != 3 or shape[2] != 3:
            raise T.ShapeError(f"feature extractor expects (H, W, 3), got {shape}")
        if shape[0] < 16 or shape[1] < 16:
            raise ValueError(f"feature extractor needs at least 16x16 input, got {shape[:2]}")

    def extract(self, x: T.Tensor) -> list[T.Tensor]:
        """Taps after each stage; spatial dims halve per stage."""
        self._check_input(x.data.shape)
        taps = []
        h = x
        for w in self.weights:
            h = T.relu(T.conv2d(h, w, stride=2, padding=1))
            taps.append(h)
        return taps

    def extract_arrays(self, x: np.ndarray) -> list[np.ndarray]:
        tape = T.Tape()
        return [t.data for t in self.extract(tape.constant(x))]


@dataclass
class TargetModels:
    seg: SegModel
    features: FeatureExtractor = field(default_factory=FeatureExtractor)


# ---------------------------------------------------------------------------
# analytic gradient oracle
# ---------------------------------------------------------------------------

def analytic_classifier(x: T.Tensor, mu_face, mu_bg, tau: float) -> T.Tensor:
    """Closed-form 2-class color classifier, built from tape primitives.

    p_face = sigmoid((||rgb - mu_bg||^2 - ||rgb - mu_face||^2) / tau),
    returned as (H, W, 2) with channel order (background, face).
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    mu_face = np.asarray(mu_face, dtype=np.float64)
    mu_bg = np.asarray(mu_bg, dtype=np.float64)
    db = T.add_channel_bias(x, -mu_bg)
    df = T.add_channel_bias(x, -mu_face)
    z = T.scalar_mul(T.sub(T.channel_sum(T.mul(db, db)), T.channel_sum(T.mul(df, df))), 1.0 / tau)
    p_face = T.sigmoid(z)
    p_bg = T.sub(x.tape.constant(1.0), p_face)
    return T.concat_channels([p_bg, p_face])


def analytic_mean_face_grad(x: np.ndarray, mu_face, mu_bg, tau: float) -> np.ndarray:
    """Hand-derived gradient of mean(p_face) wrt the image, for oracle checks."""
    mu_face = np.asarray(mu_face, dtype=np.float64)
    mu_bg = np.asarray(mu_bg, dtype=np.float64)
    db = ((x - mu_bg) ** 2).sum(axis=2)
    df = ((x - mu_face) ** 2).sum(axis=2)
    z = (db - df) / tau
    s = 1.0 / (1.0 + np.exp(-z))
    coeff = (s * (1.0 - s))[:, :, None] * (2.0 * (mu_face - mu_bg) / tau)[None, None, :]
    return coeff / (x.shape[0] * x.shape[1])


# ---------------------------------------------------------------------------
# weight persistence
# ---------------------------------------------------------------------------

MODEL_MAGIC = b"VDFM"
MODEL_VERSION = 1


def save_model(path: str | os.PathLike, model: SegModel) -> None:
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<HI", MODEL_VERSION, model.classes))
        for name in _SEG_PARAM_ORDER:
            arr = model.params[name]
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model(path: str | os.PathLike) -> SegModel:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MODEL_MAGIC:
            raise ValueError(f"{path}: bad model magic {magic!r}")
        version, classes = struct.unpack("<HI", fh.read(6))
        if version != MODEL_VERSION:
            raise ValueError(f"{path}: unsupported model version {version}")
        model = SegModel(classes=classes)
        for name in _SEG_PARAM_ORDER:
            ndim, = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            n = int(np.prod(shape))
            model.params[name] = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape).copy()
    return model
