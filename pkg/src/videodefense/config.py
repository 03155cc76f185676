"""Run configuration: one flat key/value file covering every attack
constant, ablation toggle, path and seed.

Every key has a default matching the canonical run, so an empty config
file reproduces it exactly.  The effective (post-default) mapping is
echoed verbatim into report.json and can be fed back as a config file.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields

from .losses import LossConfig, DEFAULT_SCALES, DEFAULT_LAYER_WEIGHTS
from .metrics import PurificationSpec
from .pgd import AttackConfig

ENV_SEED = "VDF_SEED"

ABLATE_KEYS = ("noise_domain", "spatial_mask", "perceptual", "inherit", "eq7_mode")

_BOOL_KEYS = {"spatial_mask", "perceptual", "multiscale", "inherit", "verbose"}


def _parse_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("on", "true", "1", "yes"):
        return True
    if text in ("off", "false", "0", "no"):
        return False
    raise ValueError(f"cannot parse boolean value {value!r}")


@dataclass
class RunConfig:
    # budget and step sizes
    radius: float = 0.05
    eta_delta: float | None = None
    eta_attention: float = 0.01
    eta_spatial: float = 1.0 / 255.0
    max_iters: int = 500
    stop_threshold: float = 0.80
    rate_check_every: int = 10
    # loss stack
    scales: list = field(default_factory=lambda: list(DEFAULT_SCALES))
    target_classes: list = field(default_factory=lambda: [1])
    epsilon: float = 1e-8
    layer_weights: list = field(default_factory=lambda: list(DEFAULT_LAYER_WEIGHTS))
    perceptual: bool = True
    multiscale: bool = True
    # ablation axes
    noise_domain: str = "frequency"
    spatial_mask: bool = True
    inherit: bool = True
    eq7_mode: str = "canonical"
    # initialization
    noise_std: float = 0.005
    attention_inside: float = 0.9
    attention_outside: float = 0.1
    # seeds
    seed: int = 0
    data_seed: int = 1234
    weight_seed: int = 7
    # dataset / io
    fps: float = 25.0
    input_dir: str = ""
    output_dir: str = ""
    model_file: str = ""
    purify: list = field(default_factory=list)
    verbose: bool = False

    @classmethod
    def key_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = set(cls.key_names())
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in data.items():
            if key in _BOOL_KEYS:
                value = _parse_bool(value)
            kwargs[key] = value
        cfg = cls(**kwargs)
        cfg._apply_env()
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path) as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ValueError(f"{path}: config must be a flat JSON object")
        return cls.from_dict(data)

    def _apply_env(self):
        env = os.environ.get(ENV_SEED)
        if env is not None:
            self.seed = int(env)

    def apply_ablate(self, key: str, value: str) -> None:
        """Apply one --ablate KEY=VAL override (the ablation-study axes)."""
        if key not in ABLATE_KEYS:
            raise ValueError(f"--ablate key must be one of {ABLATE_KEYS}, got {key!r}")
        if key == "noise_domain":
            if value not in ("frequency", "spatial"):
                raise ValueError(f"noise_domain must be frequency|spatial, got {value!r}")
            self.noise_domain = value
        elif key == "eq7_mode":
            if value not in ("canonical", "literal"):
                raise ValueError(f"eq7_mode must be canonical|literal, got {value!r}")
            self.eq7_mode = value
        else:
            setattr(self, key, _parse_bool(value))

    def to_dict(self) -> dict:
        """Flat echo; loading this mapping back reproduces the run."""
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = list(value)
            out[f.name] = value
        return out

    def loss_config(self) -> LossConfig:
        return LossConfig(
            scales=tuple(self.scales),
            target_classes=tuple(self.target_classes),
            epsilon=self.epsilon,
            layer_weights=tuple(self.layer_weights),
            perceptual_on=self.perceptual,
            multiscale_on=self.multiscale,
        )

    def attack_config(self) -> AttackConfig:
        return AttackConfig(
            radius=self.radius,
            eta_delta=self.eta_delta,
            eta_attention=self.eta_attention,
            eta_spatial=self.eta_spatial,
            max_iters=self.max_iters,
            stop_threshold=self.stop_threshold,
            rate_check_every=self.rate_check_every,
            loss=self.loss_config(),
            noise_domain=self.noise_domain,
            spatial_mask=self.spatial_mask,
            inherit=self.inherit,
            eq7_mode=self.eq7_mode,
            noise_std=self.noise_std,
            attention_inside=self.attention_inside,
            attention_outside=self.attention_outside,
            seed=self.seed,
            data_seed=self.data_seed,
            weight_seed=self.weight_seed,
            verbose=self.verbose,
        )

    def purification_specs(self) -> list[PurificationSpec]:
        return [PurificationSpec.parse(s) for s in self.purify]
