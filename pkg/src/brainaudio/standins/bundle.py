"""Seeded stand-in networks: CLAP-, AudioMAE-, VAE- and PANNs/VGGish-role models.

Everything in a :class:`Bundle` is reproducible from the bundle seed. Frozen
parts are plain numpy arrays; the fine-tunable MAE decoder is materialized
as a fresh torch module on request so the bundle itself never changes.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from ..archive import config_hash, load_archive, save_archive, write_json_atomic
from ..config import ExperimentConfig
from ..errors import ShapeError, VocabularyError
from .audio import mel_frontend_64, mel_frontend_128
from .patches import ROWS_FREQ, patchify, unpatchify, vae_decode, vae_encode

CALIB_SEED_BASE = 1 << 30
CALIB_HELDOUT_OFFSET = 1 << 20


def pooled_stats(mel: np.ndarray) -> np.ndarray:
    """Per-band mean, std and mean absolute frame-to-frame change: (..., B, F) -> (..., 3B)."""
    mel = np.asarray(mel, dtype=np.float64)
    delta = np.abs(np.diff(mel, axis=-1)).mean(axis=-1)
    return np.concatenate([mel.mean(axis=-1), mel.std(axis=-1), delta], axis=-1)


def _safe_sd(x, axis=0):
    sd = x.std(axis=axis)
    return np.where(sd < 1e-6, 1.0, sd)


def _stats_sd(stats: np.ndarray) -> np.ndarray:
    """Scale for pooled stats, floored per group (mean / std / delta) at a quarter of the group median.

    Bands that sit at the log floor in every clip have near-zero spread;
    dividing by it would make the projection hypersensitive to tiny level
    changes in otherwise empty bands.
    """
    sd = stats.std(axis=0)
    groups = sd.reshape(3, -1)
    floor = 0.25 * np.median(groups, axis=1, keepdims=True)
    return np.maximum(groups, np.maximum(floor, 1e-6)).reshape(-1)


def block_dct(n: int = 4) -> np.ndarray:
    """Orthonormal 2-D DCT-II basis for n x n blocks: rows index (freq, time) coefficient pairs."""
    from scipy.fft import dct

    d = dct(np.eye(n), norm="ortho", axis=0)
    return np.kron(d, d)


class MaeDecoder(nn.Module):
    """Per-patch MLP: three affine+GELU layers, then an affine map to 256 mel values."""

    def __init__(self, d_aco: int, hidden: int, mu: float, sd: float):
        super().__init__()
        self.layers = nn.ModuleList(
            [nn.Linear(d_aco if i == 0 else hidden, hidden) for i in range(3)]
        )
        self.out = nn.Linear(hidden, 256)
        self.register_buffer("mu", torch.tensor(float(mu)))
        self.register_buffer("sd", torch.tensor(float(sd)))

    def forward(self, c):
        h = c
        intermediates = []
        for layer in self.layers:
            h = F.gelu(layer(h))
            intermediates.append(h)
        return self.out(h) * self.sd + self.mu, intermediates


@dataclass
class Bundle:
    config: dict
    arrays: dict
    meta: dict = field(default_factory=dict)

    @property
    def labels(self) -> list[str]:
        return [f"class_{k}" for k in range(self.config["n_classes"])]

    @property
    def hash(self) -> str:
        digests = {k: hashlib.sha256(np.ascontiguousarray(v).tobytes()).hexdigest()
                   for k, v in sorted(self.arrays.items())}
        return config_hash({"config": self.config, "arrays": digests})

    def encoder_hash(self) -> str:
        keys = [k for k in sorted(self.arrays) if k.startswith("mae_")]
        h = hashlib.sha256()
        for k in keys:
            h.update(np.ascontiguousarray(self.arrays[k]).tobytes())
        return h.hexdigest()

    # --- CLAP role -------------------------------------------------------
    def clap_audio_encode(self, mel128: np.ndarray) -> np.ndarray:
        a = self.arrays
        z = (pooled_stats(mel128) - a["clap_mu"]) / a["clap_sd"]
        e = z @ a["clap_w"].T + a["clap_b"]
        return e / np.linalg.norm(e, axis=-1, keepdims=True)

    def clap_text_encode(self, label: str) -> np.ndarray:
        if label not in self.labels:
            raise VocabularyError(label, self.labels)
        return self.arrays["text_table"][self.labels.index(label)].astype(np.float64)

    # --- AudioMAE role ---------------------------------------------------
    def mae_encode(self, patches: np.ndarray) -> np.ndarray:
        """Frozen encoder: (..., N, 256) patches -> (..., N, D_aco) latents."""
        a = self.arrays
        patches = np.asarray(patches, dtype=np.float64)
        if patches.shape[-1] != 256 or patches.shape[-2] % ROWS_FREQ:
            raise ShapeError(f"mae_encode expects (..., 8k, 256) patches, got {patches.shape}")
        h = ((patches - a["mae_mu"]) / a["mae_sd"]) @ a["mae_proj"] + a["mae_bias"]
        lead, n, d = h.shape[:-2], h.shape[-2], h.shape[-1]
        cols = h.reshape(*lead, n // ROWS_FREQ, ROWS_FREQ, d)
        mixed = np.einsum("rs,...sd->...rd", a["mae_mix"], cols)
        return mixed.reshape(*lead, n, d) / a["mae_scale"]

    def decoder(self, dtype=torch.float32) -> MaeDecoder:
        """A fresh copy of the calibrated MAE decoder."""
        dec = MaeDecoder(
            self.config["d_aco"], self.config["dec_hidden"],
            float(self.arrays["mae_mu"]), float(self.arrays["mae_sd"]),
        )
        state = {k[4:]: torch.from_numpy(np.array(v)) for k, v in self.arrays.items() if k.startswith("dec.")}
        state["mu"] = dec.mu
        state["sd"] = dec.sd
        dec.load_state_dict(state)
        return dec.to(dtype)

    # --- VAE role --------------------------------------------------------
    def vae_encode(self, mel64):
        return vae_encode(mel64, self.arrays["vae_q"])

    def vae_decode(self, z, n_frames=None):
        return vae_decode(z, self.arrays["vae_q"], n_frames)

    # --- metric embedders / classifier -----------------------------------
    def embed(self, mel64: np.ndarray, which: str) -> np.ndarray:
        if which not in ("fd", "fad"):
            raise ValueError(f"unknown embedder {which!r}")
        a = self.arrays
        mel64 = np.asarray(mel64)
        if mel64.shape[-2] != 64:
            raise ShapeError(f"embedders expect 64-band mels, got {mel64.shape}")
        z = (pooled_stats(mel64) - a["emb_mu"]) / a["emb_sd"]
        h = np.tanh(z @ a[f"{which}_w1"].T + a[f"{which}_b1"])
        return h @ a[f"{which}_w2"].T + a[f"{which}_b2"]

    def classifier_logits(self, embedding: np.ndarray) -> np.ndarray:
        a = self.arrays
        embedding = np.asarray(embedding, dtype=np.float64)
        if embedding.shape[-1] != a["cls_w"].shape[1]:
            raise ShapeError(f"classifier expects {a['cls_w'].shape[1]}-d fd embeddings")
        return embedding @ a["cls_w"].T + a["cls_b"]

    # --- persistence -----------------------------------------------------
    def save(self, path) -> None:
        path = Path(path)
        save_archive(path, self.arrays, self.config, {"bundle_hash": self.hash, **self.meta})
        write_json_atomic(path / "bundle.json", {
            "seeds": {"bundle": self.config["seed"], "calibration_base": CALIB_SEED_BASE},
            "calibration_steps": self.config["calib_steps"],
            "bundle_hash": self.hash,
            "meta": self.meta,
        })

    @classmethod
    def load(cls, path) -> "Bundle":
        arrays, manifest = load_archive(path)
        arrays = {k: v.astype(np.float64) for k, v in arrays.items()}
        meta = {k: v for k, v in manifest["meta"].items() if k != "bundle_hash"}
        return cls(manifest["config"], arrays, meta)


def bundle_config(cfg: ExperimentConfig) -> dict:
    b, d = cfg.bundle, cfg.data
    return {
        "seed": b.seed, "d_aco": b.d_aco, "dec_hidden": b.dec_hidden,
        "calib_clips_per_class": b.calib_clips_per_class, "calib_steps": b.calib_steps,
        "calib_lr": b.calib_lr, "calib_batch": b.calib_batch, "classifier_c": b.classifier_c,
        "n_classes": d.n_classes, "duration_s": d.duration_s, "d_sem": d.d_sem,
    }


def calibration_clips(bcfg: dict, heldout: bool = False):
    from ..datagen import generate_stimulus

    n_classes = bcfg["n_classes"]
    n = n_classes * bcfg["calib_clips_per_class"]
    base = CALIB_SEED_BASE + bcfg["seed"] * 100_003 + (CALIB_HELDOUT_OFFSET if heldout else 0)
    waves = [generate_stimulus(i % n_classes, bcfg["duration_s"], base + i, n_classes) for i in range(n)]
    labels = np.array([w.class_id for w in waves])
    return waves, labels


def _calibrate_decoder(bundle: Bundle, c: np.ndarray, patches: np.ndarray, bcfg: dict) -> MaeDecoder:
    torch.manual_seed(bcfg["seed"])
    dec = MaeDecoder(bcfg["d_aco"], bcfg["dec_hidden"], bundle.arrays["mae_mu"], bundle.arrays["mae_sd"])
    opt = torch.optim.AdamW(dec.parameters(), lr=bcfg["calib_lr"], weight_decay=0.0)
    c_t = torch.from_numpy(c.astype(np.float32))
    p_t = torch.from_numpy(patches.astype(np.float32))
    gen = torch.Generator().manual_seed(bcfg["seed"])
    n = len(c_t)
    sd = float(bundle.arrays["mae_sd"])
    for _ in range(bcfg["calib_steps"]):
        idx = torch.randint(0, n, (bcfg["calib_batch"],), generator=gen)
        out, _ = dec(c_t[idx])
        loss = F.mse_loss(out / sd, p_t[idx] / sd)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return dec


def build_bundle(cfg: ExperimentConfig) -> Bundle:
    """Construct and calibrate every stand-in from the bundle seed."""
    from sklearn.linear_model import LogisticRegression

    from ..metrics import pcc

    bcfg = bundle_config(cfg)
    rng = np.random.default_rng([bcfg["seed"], 0xB0D1E])
    waves, labels = calibration_clips(bcfg)
    mel128 = np.stack([mel_frontend_128(w.samples) for w in waves])
    mel64 = np.stack([mel_frontend_64(w.samples) for w in waves])
    arrays: dict[str, np.ndarray] = {}
    bundle = Bundle(bcfg, arrays)

    # CLAP audio encoder: standardized pooled stats -> affine -> L2 normalize
    stats = pooled_stats(mel128)
    arrays["clap_mu"] = stats.mean(axis=0)
    arrays["clap_sd"] = _stats_sd(stats)
    arrays["clap_w"] = rng.normal(0.0, 1.0 / np.sqrt(stats.shape[1]), (bcfg["d_sem"], stats.shape[1]))
    arrays["clap_b"] = rng.normal(0.0, 0.1, bcfg["d_sem"])
    emb = bundle.clap_audio_encode(mel128)
    table = np.stack([emb[labels == k].mean(axis=0) for k in range(bcfg["n_classes"])])
    arrays["text_table"] = table / np.linalg.norm(table, axis=1, keepdims=True)

    # MAE encoder: leading principal directions of standardized patches,
    # then a fixed mixing of the 8 frequency rows inside each time column
    patches = patchify(mel128)
    arrays["mae_mu"] = np.array(patches.mean())
    arrays["mae_sd"] = np.array(patches.std())
    flat = ((patches - arrays["mae_mu"]) / arrays["mae_sd"]).reshape(-1, 256)
    _, _, vt = np.linalg.svd(flat - flat.mean(axis=0), full_matrices=False)
    comps = vt[: bcfg["d_aco"]]
    comps *= np.sign(comps[np.arange(len(comps)), np.abs(comps).argmax(axis=1)])[:, None]
    arrays["mae_proj"] = comps.T
    arrays["mae_bias"] = -flat.mean(axis=0) @ comps.T
    arrays["mae_mix"] = np.eye(ROWS_FREQ) + 0.15 * rng.standard_normal((ROWS_FREQ, ROWS_FREQ)) / np.sqrt(ROWS_FREQ)
    arrays["mae_scale"] = np.array(1.0)
    c = bundle.mae_encode(patches)
    arrays["mae_scale"] = np.array(np.sqrt(np.mean(c**2)))
    c = c / arrays["mae_scale"]

    bands = c.reshape(len(c), -1, ROWS_FREQ, bcfg["d_aco"]).mean(axis=1).reshape(len(c), -1)
    arrays["band_mu"] = bands.mean(axis=0)
    arrays["band_sd"] = _safe_sd(bands)

    # VAE role: an orthonormal 4x4 block DCT. Like a trained VAE it compacts
    # energy, so within-block time detail lives in its own low-variance channels
    arrays["vae_q"] = block_dct(4)

    stats64 = pooled_stats(mel64)
    arrays["emb_mu"] = stats64.mean(axis=0)
    arrays["emb_sd"] = _stats_sd(stats64)
    d_in = stats64.shape[1]
    for which, hidden, out in (("fd", 128, 64), ("fad", 96, 32)):
        sub = np.random.default_rng([bcfg["seed"], 0xE4B, hidden])
        arrays[f"{which}_w1"] = sub.normal(0.0, 1.0 / np.sqrt(d_in), (hidden, d_in))
        arrays[f"{which}_b1"] = sub.normal(0.0, 0.1, hidden)
        arrays[f"{which}_w2"] = sub.normal(0.0, 1.0 / np.sqrt(hidden), (out, hidden))
        arrays[f"{which}_b2"] = np.zeros(out)

    feats = bundle.embed(mel64, "fd")
    clf = LogisticRegression(C=bcfg["classifier_c"], max_iter=5000).fit(feats, labels)
    w, b = clf.coef_, clf.intercept_
    if bcfg["n_classes"] == 2:
        w, b = np.vstack([-w / 2, w / 2]), np.array([-b[0] / 2, b[0] / 2])
    arrays["cls_w"], arrays["cls_b"] = w, b

    dec = _calibrate_decoder(bundle, c, patches, bcfg)
    for name, value in dec.state_dict().items():
        if name not in ("mu", "sd"):
            arrays[f"dec.{name}"] = value.detach().double().numpy()

    # numpy arrays are stored float32 on disk; round now so in-memory and loaded bundles agree
    for k in list(arrays):
        arrays[k] = np.asarray(arrays[k], dtype=np.float32).astype(np.float64)

    # quality diagnostics, recorded for the manifest
    with torch.no_grad():
        recon, _ = dec(torch.from_numpy(c.astype(np.float32)))
    recon_mel = unpatchify(recon.double().numpy())
    target = unpatchify(patches)
    bundle.meta["calib_recon_pcc"] = float(np.mean([pcc(r, t) for r, t in zip(recon_mel, target)]))
    h_waves, h_labels = calibration_clips(bcfg, heldout=True)
    h_mel64 = np.stack([mel_frontend_64(w.samples) for w in h_waves])
    logits = bundle.classifier_logits(bundle.embed(h_mel64, "fd"))
    bundle.meta["classifier_heldout_acc"] = float(np.mean(logits.argmax(axis=1) == h_labels))
    return bundle
