"""Acoustic decoder: (semantic embedding, fMRI) -> acoustic latent, trained with the four-part latent + reconstruction loss."""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .config import AcousticConfig
from .errors import ConfigurationError, ShapeError, TrainingError
from .nn import BatchSampler, Decoder, Encoder, seed_everything
from .ridge import RidgeModel, predict_semantic, top_response_voxels


class AcousticDecoder(nn.Module):
    """Two-token transformer encoder plus learnable-query transformer decoder.

    The encoder sees ``[s', x']``: a projection of the semantic embedding and
    a projection of the top-responding voxels. With ``use_semantic=False`` the
    semantic token is dropped (fine-grained-only ablation).
    """

    def __init__(self, d_sem, fmri_indices, n_patch, d_aco, cfg: AcousticConfig,
                 x_mu=None, x_sd=None):
        super().__init__()
        n_idx = len(fmri_indices)
        self.use_semantic = cfg.use_semantic
        self.register_buffer("fmri_indices", torch.as_tensor(np.asarray(fmri_indices), dtype=torch.long))
        self.register_buffer("x_mu", torch.zeros(n_idx) if x_mu is None else torch.as_tensor(x_mu, dtype=torch.float32))
        self.register_buffer("x_sd", torch.ones(n_idx) if x_sd is None else torch.as_tensor(x_sd, dtype=torch.float32))
        self.s_scale = math.sqrt(d_sem)
        d = cfg.d_model
        self.sem_proj = nn.Linear(d_sem, d) if cfg.use_semantic else None
        self.fmri_proj = nn.Linear(n_idx, d)
        self.type_emb = nn.Parameter(0.02 * torch.randn(2, d))
        self.encoder = Encoder(d, cfg.n_heads, cfg.n_enc)
        self.decoder = Decoder(d, cfg.n_heads, cfg.n_dec)
        self.query = nn.Parameter(torch.randn(n_patch, d))
        self.out_proj = nn.Linear(d, d_aco)

    def forward(self, s, x):
        if x.shape[-1] <= int(self.fmri_indices.max()):
            raise ShapeError(f"fMRI vector of length {x.shape[-1]} too short for selected voxels")
        xs = (x[:, self.fmri_indices] - self.x_mu) / self.x_sd
        tokens = [self.fmri_proj(xs) + self.type_emb[1]]
        if self.use_semantic:
            tokens.insert(0, self.sem_proj(s * self.s_scale) + self.type_emb[0])
        memory = self.encoder(torch.stack(tokens, dim=1))
        q = self.query.unsqueeze(0).expand(x.shape[0], -1, -1)
        return self.out_proj(self.decoder(q, memory))


def build_acoustic(dataset, ridge_model: RidgeModel, cfg: AcousticConfig, n_fmri_token: int,
                   seed: int) -> AcousticDecoder:
    """Initialize a decoder against a fitted ridge model (voxel token indices are fixed here)."""
    torch.manual_seed(seed)
    idx = top_response_voxels(ridge_model, n_fmri_token)
    x_train = dataset.get("fmri", "train")[:, idx].astype(np.float64)
    sd = x_train.std(axis=0)
    c_gt = dataset.arrays["c_gt"]
    return AcousticDecoder(
        dataset.arrays["s_gt"].shape[1], idx, c_gt.shape[1], c_gt.shape[2], cfg,
        x_train.mean(axis=0), np.where(sd == 0, 1.0, sd),
    )


@dataclass
class LossBreakdown:
    l_cond: float
    l_perceptual: float
    l_mel_upp: float
    l_mel_recon: float
    total: float

    def to_dict(self):
        return asdict(self)


def acoustic_loss_terms(c, c_gt, patches, mae_decoder) -> dict:
    """Tensor-valued loss terms; every term is a mean over elements."""
    if c.shape != c_gt.shape:
        raise ShapeError(f"c {tuple(c.shape)} vs c_gt {tuple(c_gt.shape)}")
    recon, inter_c = mae_decoder(c)
    upper, inter_gt = mae_decoder(c_gt)
    if recon.shape != patches.shape:
        raise ShapeError(f"decoded patches {tuple(recon.shape)} vs target {tuple(patches.shape)}")
    terms = {
        "l_cond": F.mse_loss(c, c_gt),
        "l_perceptual": sum(F.mse_loss(a, b) for a, b in zip(inter_c, inter_gt)),
        "l_mel_upp": F.mse_loss(upper, patches),
        "l_mel_recon": F.mse_loss(recon, patches),
    }
    terms["total"] = terms["l_cond"] + terms["l_perceptual"] + terms["l_mel_upp"] + terms["l_mel_recon"]
    return terms


def acoustic_loss(c, c_gt, patches, mae_decoder) -> LossBreakdown:
    """Latent, perceptual and mel reconstruction losses. ``patches`` is the patchified mel."""
    terms = acoustic_loss_terms(*(torch.as_tensor(np.asarray(a)) if not torch.is_tensor(a) else a
                        for a in (c, c_gt, patches)), mae_decoder)
    vals = {k: float(v) for k, v in terms.items()}
    vals["total"] = vals["l_cond"] + vals["l_perceptual"] + vals["l_mel_upp"] + vals["l_mel_recon"]
    return LossBreakdown(**vals)


def mix_semantic(s_gt, s_dec, p_gt: float, rng: np.random.Generator):
    """Per-sample Bernoulli choice of the ground-truth embedding with probability ``p_gt``.

    Accepts single vectors or (batch, D) arrays/tensors; one draw per row.
    """
    if not 0.0 <= p_gt <= 1.0:
        raise ConfigurationError(f"p_gt={p_gt} outside [0, 1]")
    batch = s_gt.shape[0] if s_gt.ndim == 2 else 1
    pick = rng.random(batch) < p_gt
    if s_gt.ndim == 1:
        return s_gt if pick[0] else s_dec
    if torch.is_tensor(s_gt):
        mask = torch.as_tensor(pick, device=s_gt.device).unsqueeze(1)
        return torch.where(mask, s_gt, s_dec)
    return np.where(pick[:, None], s_gt, s_dec)


def target_patches(dataset, split: str | None = None) -> np.ndarray:
    from .standins import mel_frontend_128, patchify

    waves = dataset.get("waveforms", split)
    return patchify(np.stack([mel_frontend_128(w) for w in waves])).astype(np.float32)


@dataclass
class AcousticRun:
    model: AcousticDecoder
    mae_decoder: nn.Module
    history: list


def train_acoustic(dataset, ridge_model, bundle, cfg: AcousticConfig, n_fmri_token: int = 128,
                   seed: int = 0, patches: np.ndarray | None = None) -> AcousticRun:
    """Jointly train the acoustic decoder and fine-tune a copy of the MAE decoder.

    The MAE encoder is never touched: targets ``c_gt`` were precomputed with it.
    """
    seed_everything(seed)
    model = build_acoustic(dataset, ridge_model, cfg, n_fmri_token, seed)
    mae_dec = bundle.decoder()
    history: list = []
    if cfg.steps == 0:
        return AcousticRun(model, mae_dec, history)

    x = torch.from_numpy(dataset.get("fmri", "train").astype(np.float32))
    s_gt = torch.from_numpy(dataset.get("s_gt", "train").astype(np.float32))
    s_dec = torch.from_numpy(predict_semantic(ridge_model, dataset.get("fmri", "train")).astype(np.float32))
    c_gt = torch.from_numpy(dataset.get("c_gt", "train").astype(np.float32))
    if patches is None:
        patches = target_patches(dataset, "train")
    patches = torch.from_numpy(patches)

    params = list(model.parameters()) + list(mae_dec.parameters())
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    sampler = BatchSampler(len(x), cfg.batch, seed)
    rng = np.random.default_rng([seed, 0xACC])
    model.train()
    running = []
    for step in range(1, cfg.steps + 1):
        idx = sampler.next()
        s_in = mix_semantic(s_gt[idx], s_dec[idx], cfg.p_gt, rng)
        c = model(s_in, x[idx])
        terms = acoustic_loss_terms(c, c_gt[idx], patches[idx], mae_dec)
        if not torch.isfinite(terms["total"]):
            raise TrainingError(step)
        opt.zero_grad()
        terms["total"].backward()
        opt.step()
        running.append({k: float(v.detach()) for k, v in terms.items()})
        if step % cfg.log_every == 0 or step == cfg.steps:
            mean = {k: float(np.mean([r[k] for r in running])) for k in running[0]}
            history.append({"step": step, **mean})
            running = []
    model.eval()
    return AcousticRun(model, mae_dec, history)


@torch.no_grad()
def acoustic_forward(model: AcousticDecoder, s, x, batch: int = 64) -> np.ndarray:
    """Eval-mode decoding of (N, D_sem) embeddings and (N, V) fMRI to (N, N_patch, D_aco)."""
    model.eval()
    dtype = next(model.parameters()).dtype
    s = torch.as_tensor(np.asarray(s), dtype=dtype)
    x = torch.as_tensor(np.asarray(x), dtype=dtype)
    if s.ndim == 1:
        s, x = s[None], x[None]
    out = [model(s[i:i + batch], x[i:i + batch]) for i in range(0, len(x), batch)]
    return torch.cat(out).double().numpy()


def clone_module(module: nn.Module) -> nn.Module:
    return copy.deepcopy(module)
