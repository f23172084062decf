"""Synthetic stimuli and the linear fMRI simulator."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import SAMPLE_RATE, SUPPORTED_DURATIONS, DataConfig
from .errors import ConfigurationError, ShapeError

FUNDAMENTALS = (110.0, 165.0, 220.0, 330.0)
N_PARTIALS = 10


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    class_id: int
    sample_rate: int = SAMPLE_RATE


@dataclass(frozen=True)
class FmriSample:
    voxels: np.ndarray
    stimulus_id: int
    class_id: int
    split: str


def class_fundamental(class_id: int) -> float:
    return FUNDAMENTALS[class_id % 4] * 1.25 ** (class_id // 4)


def class_partials(class_id: int) -> np.ndarray:
    h = np.arange(1, N_PARTIALS + 1, dtype=np.float64)
    kind = class_id % 4
    if kind == 0:
        w = 1.0 / h
    elif kind == 1:
        w = np.where(h % 2 == 1, 1.0 / h, 0.05 / h)
    elif kind == 2:
        w = 1.0 / h**2
    else:
        w = np.exp(-0.5 * ((h - 4.0) / 1.5) ** 2)
    return w / w.max()


def generate_stimulus(class_id: int, duration_s: float, seed: int, n_classes: int | None = None) -> Waveform:
    """Harmonic tone for ``class_id`` with seeded pitch jitter, timbre, envelope and background noise."""
    if n_classes is None:
        raise ConfigurationError("number of classes not configured")
    if not 0 <= class_id < n_classes:
        raise ConfigurationError(f"class_id {class_id} outside [0, {n_classes})")
    if duration_s not in SUPPORTED_DURATIONS:
        raise ConfigurationError(f"duration {duration_s}s unsupported; choose one of {SUPPORTED_DURATIONS}")
    if seed < 0:
        raise ConfigurationError("seed must be >= 0")
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE

    f0 = class_fundamental(class_id) * (1.0 + rng.uniform(-0.02, 0.02))
    weights = class_partials(class_id) * np.exp(rng.normal(0.0, 0.25, N_PARTIALS))
    phases = rng.uniform(0.0, 2 * np.pi, N_PARTIALS)
    harmonics = np.arange(1, N_PARTIALS + 1)
    keep = harmonics * f0 < 0.45 * SAMPLE_RATE
    tone = np.sum(
        weights[keep, None] * np.sin(2 * np.pi * f0 * harmonics[keep, None] * t + phases[keep, None]),
        axis=0,
    )

    onset = rng.uniform(0.0, 0.3 * duration_s)
    attack = rng.uniform(0.01, 0.25)
    decay = rng.uniform(0.2, 2.5)
    trem_depth = rng.uniform(0.0, 0.5)
    trem_rate = rng.uniform(1.5, 6.0)
    rel = np.clip(t - onset, 0.0, None)
    env = np.minimum(rel / attack, 1.0) * np.exp(-decay * rel) * (t >= onset)
    env *= 1.0 - trem_depth * 0.5 * (1.0 + np.sin(2 * np.pi * trem_rate * t))
    y = tone * env
    peak = np.max(np.abs(y))
    gain = rng.uniform(0.4, 0.9)
    if peak > 0:
        y = y * (gain / peak)
    # recordings always sit on a noise floor; exact digital silence would leave
    # large parts of the log-mel pinned at the log floor
    y = y + 10.0 ** rng.uniform(-3.0, -2.3) * rng.standard_normal(n)
    return Waveform(np.clip(y, -1.0, 1.0).astype(np.float32), class_id)


@dataclass(frozen=True)
class MixingModel:
    a_sem: np.ndarray  # (V, D_sem)
    a_aco: np.ndarray  # (V, D_feat)
    feat_proj: np.ndarray  # (D_feat, 8 * D_aco)
    noise_sigma: float
    sem_noise_sigma: float
    seed: int

    @classmethod
    def create(cls, cfg: DataConfig, d_aco: int) -> "MixingModel":
        rng = np.random.default_rng([cfg.seed, 0x5EED])
        v = cfg.n_voxels

        def sparse(cols, scale):
            a = rng.normal(0.0, scale, (v, cols))
            nnz = min(cfg.row_nnz, cols)
            mask = np.zeros((v, cols), dtype=bool)
            for i in range(v):
                mask[i, rng.choice(cols, nnz, replace=False)] = True
            return np.where(mask, a, 0.0)

        # semantic embeddings have unit norm, so entries are ~1/sqrt(D_sem);
        # scale so both channels contribute comparable per-voxel variance
        a_sem = sparse(cfg.d_sem, np.sqrt(cfg.d_sem / cfg.row_nnz))
        a_aco = sparse(cfg.d_feat, 1.0 / np.sqrt(cfg.row_nnz))
        feat_proj = rng.normal(0.0, 1.0 / np.sqrt(8 * d_aco), (cfg.d_feat, 8 * d_aco))
        return cls(a_sem, a_aco, feat_proj, cfg.noise_sigma, cfg.sem_noise_sigma, cfg.seed)


def band_summary(c_gt: np.ndarray, band_mu: np.ndarray, band_sd: np.ndarray, mix: MixingModel) -> np.ndarray:
    """Pool an acoustic latent to per-frequency-band patch means, standardize, project to D_feat."""
    c_gt = np.asarray(c_gt, dtype=np.float64)
    n_patch, d_aco = c_gt.shape[-2:]
    bands = c_gt.reshape(*c_gt.shape[:-2], n_patch // 8, 8, d_aco).mean(axis=-3)
    bands = bands.reshape(*c_gt.shape[:-2], 8 * d_aco)
    z = (bands - band_mu) / band_sd
    return z @ mix.feat_proj.T


def simulate_fmri(s_gt: np.ndarray, feat: np.ndarray, mix: MixingModel, seed) -> np.ndarray:
    """voxels = A_sem (s_gt + semantic noise) + A_aco feat + N(0, noise_sigma^2 I)."""
    s_gt = np.asarray(s_gt, dtype=np.float64)
    feat = np.asarray(feat, dtype=np.float64)
    if s_gt.shape[-1] != mix.a_sem.shape[1] or feat.shape[-1] != mix.a_aco.shape[1]:
        raise ShapeError(
            f"simulate_fmri: got s {s_gt.shape[-1]} / feat {feat.shape[-1]} dims, "
            f"mixing expects {mix.a_sem.shape[1]} / {mix.a_aco.shape[1]}"
        )
    if mix.noise_sigma < 0 or mix.sem_noise_sigma < 0:
        raise ConfigurationError("noise levels must be >= 0")
    rng = np.random.default_rng(seed)
    v = mix.a_sem.shape[0]
    eps = rng.standard_normal(s_gt.shape[:-1] + (v,))
    sem = s_gt
    if mix.sem_noise_sigma > 0:
        sem = s_gt + mix.sem_noise_sigma / np.sqrt(s_gt.shape[-1]) * rng.standard_normal(s_gt.shape)
    return sem @ mix.a_sem.T + feat @ mix.a_aco.T + mix.noise_sigma * eps


SPLITS = ("train", "test")


@dataclass
class Dataset:
    """Waveforms, simulated fMRI and ground-truth features, train split first."""

    config: dict
    arrays: dict

    @property
    def hash(self) -> str:
        from .archive import config_hash

        return config_hash(self.config)

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.arrays["split"] == SPLITS.index(split))

    def get(self, name: str, split: str | None = None) -> np.ndarray:
        arr = self.arrays[name]
        return arr if split is None else arr[self.indices(split)]

    def sample(self, i: int) -> FmriSample:
        a = self.arrays
        return FmriSample(a["fmri"][i], int(a["stimulus_id"][i]), int(a["labels"][i]), SPLITS[a["split"][i]])

    def save(self, path) -> None:
        dataset_io(self, path, "save")

    @classmethod
    def load(cls, path) -> "Dataset":
        return dataset_io(None, path, "load")


def build_dataset(cfg, bundle, seed: int | None = None) -> Dataset:
    """Generate stimuli, ground-truth features and simulated fMRI for both splits.

    ``cfg`` is an :class:`~brainaudio.config.ExperimentConfig`; the bundle
    supplies the feature extractors.
    """
    from .standins import mel_frontend_64, mel_frontend_128, patchify

    dcfg = cfg.data
    if seed is not None:
        dcfg = DataConfig(**{**dcfg.__dict__, "seed": seed})
    dcfg.validate()
    if bundle.config["n_classes"] != dcfg.n_classes or bundle.config["duration_s"] != dcfg.duration_s \
            or bundle.config["d_sem"] != dcfg.d_sem:
        raise ConfigurationError("bundle was built for a different class count, duration or D_sem")
    base = dcfg.seed * 1_000_000
    n_total = dcfg.n_train + dcfg.n_test
    split = np.array([0] * dcfg.n_train + [1] * dcfg.n_test)
    labels = np.concatenate([np.arange(dcfg.n_train) % dcfg.n_classes, np.arange(dcfg.n_test) % dcfg.n_classes])
    stim_ids = np.arange(n_total)

    waves = np.stack([
        generate_stimulus(int(labels[i]), dcfg.duration_s, base + int(stim_ids[i]), dcfg.n_classes).samples
        for i in range(n_total)
    ])
    mel128 = np.stack([mel_frontend_128(w) for w in waves])
    mel64 = np.stack([mel_frontend_64(w) for w in waves])
    s_gt = bundle.clap_audio_encode(mel128)
    c_gt = bundle.mae_encode(patchify(mel128))
    mix = MixingModel.create(dcfg, bundle.config["d_aco"])
    feat = band_summary(c_gt, bundle.arrays["band_mu"], bundle.arrays["band_sd"], mix)
    fmri = np.stack([
        simulate_fmri(s_gt[i], feat[i], mix, [base + int(stim_ids[i]), 1]) for i in range(n_total)
    ])
    arrays = {
        "waveforms": waves, "mel64": mel64, "s_gt": s_gt, "c_gt": c_gt, "feat": feat, "fmri": fmri,
        "labels": labels, "stimulus_id": stim_ids, "split": split,
    }
    arrays = {k: (v.astype(np.float32) if v.dtype.kind == "f" else v.astype(np.int32)) for k, v in arrays.items()}
    config = {
        "data": dict(dcfg.__dict__),
        "bundle_hash": bundle.hash,
        "d_aco": bundle.config["d_aco"],
        "n_patch": dcfg.n_patch,
        "seeds": {"base": base, "mixing": [dcfg.seed, 0x5EED], "noise": "[base + stimulus_id, 1]"},
    }
    return Dataset(config, arrays)


def dataset_io(dataset: Dataset | None, path, mode: str):
    """Persist (``mode="save"``) or restore (``mode="load"``) a dataset directory."""
    from .archive import load_archive, save_archive

    if mode == "save":
        if dataset is None:
            raise ValueError("nothing to save")
        save_archive(path, dataset.arrays, dataset.config, {"kind": "dataset"})
        return None
    if mode == "load":
        arrays, manifest = load_archive(path)
        return Dataset(manifest["config"], arrays)
    raise ValueError(f"mode must be 'save' or 'load', got {mode!r}")
