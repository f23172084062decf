"""Experiment configuration with strict JSON (de)serialization."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .archive import config_hash
from .errors import ConfigurationError

SAMPLE_RATE = 16000
HOP = 160
SUPPORTED_DURATIONS = (1.5, 2.0, 4.0)


@dataclass
class DataConfig:
    n_classes: int = 4
    n_voxels: int = 400
    d_sem: int = 64
    d_feat: int = 64
    n_train: int = 512
    n_test: int = 64
    noise_sigma: float = 2.0
    # extra noise injected on the semantic component before mixing
    sem_noise_sigma: float = 0.0
    duration_s: float = 2.0
    row_nnz: int = 16
    seed: int = 0

    def validate(self):
        if self.n_classes < 2:
            raise ConfigurationError("n_classes must be >= 2")
        if self.duration_s not in SUPPORTED_DURATIONS:
            raise ConfigurationError(
                f"duration_s={self.duration_s} unsupported; choose one of {SUPPORTED_DURATIONS}"
            )
        if self.n_test > self.n_train:
            raise ConfigurationError("n_test must not exceed n_train")
        for name in ("n_train", "n_test"):
            if getattr(self, name) % self.n_classes:
                raise ConfigurationError(f"{name} must be a multiple of n_classes for balanced splits")
        if self.noise_sigma < 0 or self.sem_noise_sigma < 0:
            raise ConfigurationError("noise levels must be >= 0")
        if not 1 <= self.row_nnz:
            raise ConfigurationError("row_nnz must be >= 1")

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_s * SAMPLE_RATE))

    @property
    def n_frames(self) -> int:
        return math.ceil(self.n_samples / HOP)

    @property
    def n_patch(self) -> int:
        return 8 * math.ceil(self.n_frames / 16)


@dataclass
class BundleConfig:
    seed: int = 0
    d_aco: int = 96
    dec_hidden: int = 256
    calib_clips_per_class: int = 48
    calib_steps: int = 800
    calib_lr: float = 1e-3
    calib_batch: int = 16
    classifier_c: float = 0.05


@dataclass
class RidgeConfig:
    lam: float = 1.0
    k: int = 200
    n_fmri_token: int = 400


@dataclass
class AcousticConfig:
    d_model: int = 64
    n_heads: int = 4
    n_enc: int = 2
    n_dec: int = 2
    lr: float = 1e-3
    weight_decay: float = 0.01
    batch: int = 16
    steps: int = 1000
    p_gt: float = 0.25
    log_every: int = 100
    use_semantic: bool = True


@dataclass
class LdmConfig:
    T: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.2
    width: int = 32
    lr: float = 1e-3
    acoustic_lr: float = 1e-4
    weight_decay: float = 0.01
    batch: int = 16
    steps: int = 3000
    log_every: int = 100


@dataclass
class SamplerConfig:
    mode: str = "deterministic"
    steps: int = 50
    seed: int = 0


@dataclass
class BaselineConfig:
    lir_lam: float = 100.0
    mlp_hidden: int = 512
    lstm_hidden: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.01
    batch: int = 32
    steps: int = 600


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    bundle: BundleConfig = field(default_factory=BundleConfig)
    ridge: RidgeConfig = field(default_factory=RidgeConfig)
    acoustic: AcousticConfig = field(default_factory=AcousticConfig)
    ldm: LdmConfig = field(default_factory=LdmConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    baselines: BaselineConfig = field(default_factory=BaselineConfig)
    p_gt_sweep: list = field(default_factory=lambda: [0.0, 0.25, 0.5])
    seed: int = 0

    def validate(self):
        self.data.validate()
        if self.ridge.k > self.data.n_voxels or self.ridge.n_fmri_token > self.data.n_voxels:
            raise ConfigurationError("ridge.k and ridge.n_fmri_token must be <= n_voxels")
        if self.sampler.mode not in ("ancestral", "deterministic"):
            raise ConfigurationError(f"unknown sampler mode {self.sampler.mode!r}")
        if self.sampler.steps > self.ldm.T:
            raise ConfigurationError("sampler.steps must be <= ldm.T")
        for p in [self.acoustic.p_gt, *self.p_gt_sweep]:
            if not 0.0 <= p <= 1.0:
                raise ConfigurationError(f"P_gt value {p} outside [0, 1]")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        return _build(cls, raw, "config").validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: not valid JSON ({exc})") from None
        return cls.from_dict(raw)

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with sections or fields swapped, e.g. ``replace(acoustic__p_gt=0.5)``."""
        raw = self.to_dict()
        for key, value in sections.items():
            parts = key.split("__")
            node = raw
            for part in parts[:-1]:
                node = node[part]
            node[parts[-1]] = dataclasses.asdict(value) if dataclasses.is_dataclass(value) else value
        return ExperimentConfig.from_dict(raw)


def _build(cls, raw, where):
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{where}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigurationError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in raw.items():
        default = fields[name].default_factory() if fields[name].default_factory is not dataclasses.MISSING else fields[name].default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}")
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigurationError(f"{where}.{name}: expected bool")
            kwargs[name] = value
        elif isinstance(default, float):
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigurationError(f"{where}.{name}: expected number")
            kwargs[name] = float(value)
        elif isinstance(default, int):
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigurationError(f"{where}.{name}: expected integer")
            kwargs[name] = value
        else:
            kwargs[name] = value
    return cls(**kwargs)
