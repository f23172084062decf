"""Latent diffusion: schedule, forward process, dual-condition loss, samplers, reconstruction."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .config import LdmConfig
from .errors import ConfigurationError, ShapeError, TrainingError
from .nn import Attention, BatchSampler, seed_everything


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    beta: np.ndarray
    alpha_cum: np.ndarray

    def a(self, t):
        """Cumulative alpha at 1-based step ``t``; ``t == 0`` maps to 1."""
        t = np.asarray(t)
        return np.where(t == 0, 1.0, self.alpha_cum[np.maximum(t, 1) - 1])


def make_schedule(T: int, beta_start: float, beta_end: float) -> DiffusionSchedule:
    """Linear beta schedule; cumulative products accumulated in float64."""
    if T < 1:
        raise ConfigurationError("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigurationError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return DiffusionSchedule(T, beta, np.cumprod(1.0 - beta))


def _check_t(t, T):
    t_arr = np.asarray(t.cpu() if torch.is_tensor(t) else t)
    if np.any(t_arr < 1) or np.any(t_arr > T):
        raise IndexError(f"timestep outside [1, {T}]")


def q_sample(z0, t, eps, sched: DiffusionSchedule):
    """z_t = sqrt(a_t) z0 + sqrt(1 - a_t) eps for scalar or per-batch ``t``."""
    _check_t(t, sched.T)
    if z0.shape != eps.shape:
        raise ShapeError(f"z0 {tuple(z0.shape)} and eps {tuple(eps.shape)} differ")
    if torch.is_tensor(z0):
        a = torch.as_tensor(sched.a(np.asarray(t.cpu() if torch.is_tensor(t) else t)), dtype=z0.dtype)
        a = a.reshape(-1, *([1] * (z0.ndim - 1))) if a.ndim else a
        return torch.sqrt(a) * z0 + torch.sqrt(1.0 - a) * eps
    a = sched.a(t)
    if np.ndim(a):
        a = a.reshape(-1, *([1] * (np.ndim(z0) - 1)))
    return np.sqrt(a) * z0 + np.sqrt(1.0 - a) * eps


def q_step(z_prev, t: int, eps, sched: DiffusionSchedule):
    """One forward kernel step: z_t = sqrt(1 - beta_t) z_{t-1} + sqrt(beta_t) eps."""
    _check_t(t, sched.T)
    beta = float(sched.beta[t - 1])
    return np.sqrt(1.0 - beta) * z_prev + np.sqrt(beta) * eps


def timestep_embedding(t, dim: int):
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, width: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, width)
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.film = nn.Linear(emb_dim, 2 * width)
        self.norm2 = nn.GroupNorm(8, width)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)

    def forward(self, h, emb):
        x = self.conv1(F.silu(self.norm1(h)))
        scale, shift = self.film(emb)[:, :, None, None].chunk(2, dim=1)
        x = self.norm2(x) * (1 + scale) + shift
        return h + self.conv2(F.silu(x))


class Denoiser(nn.Module):
    """Noise predictor over (16, 16, W) latents conditioned on (N_patch, D_aco) tokens.

    Two FiLM-modulated residual blocks at half resolution with one
    cross-attention over the condition tokens in between; the pooled condition
    joins the timestep embedding. The condition tokens are also averaged over
    time per frequency row (tokens are time-major, 8 rows per column), mapped
    linearly onto the latent rows that row covers, broadcast along time and
    concatenated to the input. Latents are standardized with per-(channel, row)
    statistics.

    The output is preconditioned as ``sqrt(1 - a_t) z_t + sqrt(a_t) F(...)``:
    it is still a noise estimate, but the near-identity map needed at high
    noise levels is exact by construction instead of learned.
    """

    COND_CH = 8

    def __init__(self, d_aco: int, n_patch: int, grid: tuple, alpha_cum, width: int = 32, n_heads: int = 4,
                 lat_mu=None, lat_sd=None):
        super().__init__()
        rows, cols = grid
        a = torch.as_tensor(np.concatenate([[1.0], np.asarray(alpha_cum, dtype=np.float64)]))
        self.register_buffer("skip", torch.sqrt(1.0 - a).float())
        self.register_buffer("gain", torch.sqrt(a).float())
        self.grid = (rows, cols)
        self.n_cols_tok = n_patch // 8
        # a 16x16 mel128 patch spans rows/8 latent rows and 4 latent columns (16 frames / 4)
        self.cell = (rows // 8, 4)
        self.width = width
        self.emb_dim = 4 * width
        self.t_mlp = nn.Sequential(nn.Linear(width, self.emb_dim), nn.SiLU(), nn.Linear(self.emb_dim, self.emb_dim))
        self.pool_proj = nn.Linear(d_aco, self.emb_dim)
        self.cond_map = nn.Linear(d_aco, self.COND_CH * self.cell[0])
        self.conv_in = nn.Conv2d(16 + self.COND_CH, width, 3, padding=1)
        self.down = nn.Conv2d(width, width, 3, stride=2, padding=1)
        half = ((rows + 1) // 2, (cols + 1) // 2)
        self.block1 = ResBlock(width, self.emb_dim)
        self.attn_norm = nn.GroupNorm(8, width)
        self.cond_proj = nn.Linear(d_aco, width)
        self.cond_pos = nn.Parameter(0.02 * torch.randn(n_patch, width))
        self.grid_pos = nn.Parameter(0.02 * torch.randn(half[0] * half[1], width))
        self.cross = Attention(width, n_heads)
        self.block2 = ResBlock(width, self.emb_dim)
        self.up = nn.Conv2d(width, width, 3, padding=1)
        self.out_norm = nn.GroupNorm(8, width)
        self.conv_out = nn.Conv2d(width, 16, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)
        shape = (16, rows, 1)
        self.register_buffer("lat_mu", torch.zeros(shape) if lat_mu is None else torch.as_tensor(lat_mu, dtype=torch.float32))
        self.register_buffer("lat_sd", torch.ones(shape) if lat_sd is None else torch.as_tensor(lat_sd, dtype=torch.float32))

    def normalize(self, z):
        return (z - self.lat_mu) / self.lat_sd

    def denormalize(self, z):
        return z * self.lat_sd + self.lat_mu

    def condition_map(self, c):
        """Time-pooled condition features per frequency row, broadcast along latent time."""
        b = c.shape[0]
        rows = c.reshape(b, self.n_cols_tok, 8, -1).mean(dim=1)
        m = self.cond_map(rows).reshape(b, 8, self.COND_CH, self.cell[0]).permute(0, 2, 1, 3)
        return m.reshape(b, self.COND_CH, 8 * self.cell[0], 1).expand(-1, -1, -1, self.grid[1])

    def forward(self, z, t, c):
        if z.shape[1] != 16 or tuple(z.shape[2:]) != self.grid:
            raise ShapeError(f"expected latents (B, 16, {self.grid[0]}, {self.grid[1]}), got {tuple(z.shape)}")
        emb = self.t_mlp(timestep_embedding(t, self.width).to(z.dtype)) + self.pool_proj(c.mean(dim=1))
        h_full = self.conv_in(torch.cat([z, self.condition_map(c)], dim=1))
        h = self.block1(self.down(F.silu(h_full)), emb)
        b, w, r, q = h.shape
        tokens = self.attn_norm(h).flatten(2).transpose(1, 2) + self.grid_pos
        ctx = self.cond_proj(c) + self.cond_pos
        h = h + self.cross(tokens, ctx).transpose(1, 2).reshape(b, w, r, q)
        h = self.block2(h, emb)
        h = self.up(F.interpolate(h, size=self.grid, mode="nearest")) + h_full
        out = self.conv_out(F.silu(self.out_norm(h)))
        t = t.long()
        return self.skip[t].to(z.dtype)[:, None, None, None] * z + self.gain[t].to(z.dtype)[:, None, None, None] * out


def ldm_loss(z0, c, c_gt, t, eps, denoiser, sched: DiffusionSchedule):
    """||eps_theta(z_t, t, c) - eps||^2 + ||eps_theta(z_t, t, c_gt) - eps||^2 (means), one shared z_t."""
    if c.shape != c_gt.shape:
        raise ShapeError(f"c {tuple(c.shape)} vs c_gt {tuple(c_gt.shape)}")
    zt = q_sample(z0, t, eps, sched)
    t = torch.as_tensor(t).reshape(-1).expand(z0.shape[0])
    return F.mse_loss(denoiser(zt, t, c), eps) + F.mse_loss(denoiser(zt, t, c_gt), eps)


def mel_latents(bundle, mel64: np.ndarray) -> np.ndarray:
    return np.stack([bundle.vae_encode(m) for m in mel64])


@dataclass
class LdmRun:
    denoiser: Denoiser
    acoustic: nn.Module
    history: list
    losses: np.ndarray = field(default_factory=lambda: np.zeros(0))


def build_denoiser(latents: np.ndarray, d_aco: int, n_patch: int, sched: DiffusionSchedule, cfg: LdmConfig,
                   seed: int) -> Denoiser:
    torch.manual_seed(seed)
    mu = latents.mean(axis=(0, 3), keepdims=True)[0]
    sd = latents.std(axis=(0, 3), keepdims=True)[0]
    return Denoiser(d_aco, n_patch, latents.shape[2:], sched.alpha_cum, cfg.width,
                    lat_mu=mu, lat_sd=np.maximum(sd, 1e-3))


def train_ldm(dataset, acoustic_model, ridge_model, bundle, sched: DiffusionSchedule, cfg: LdmConfig,
              p_gt: float = 0.25, seed: int = 0) -> LdmRun:
    """Train the denoiser while continuing to fine-tune a copy of the acoustic decoder.

    The VAE and MAE encoder are fixed numpy transforms and are never updated.
    """
    import copy

    from .acoustic import mix_semantic
    from .ridge import predict_semantic

    seed_everything(seed)
    latents = mel_latents(bundle, dataset.get("mel64", "train"))
    c_gt_np = dataset.get("c_gt", "train")
    den = build_denoiser(latents, c_gt_np.shape[2], c_gt_np.shape[1], sched, cfg, seed)
    aco = copy.deepcopy(acoustic_model)
    if cfg.steps == 0:
        return LdmRun(den, aco, [])

    z_all = den.normalize(torch.from_numpy(latents.astype(np.float32)))
    x = torch.from_numpy(dataset.get("fmri", "train").astype(np.float32))
    s_gt = torch.from_numpy(dataset.get("s_gt", "train").astype(np.float32))
    s_dec = torch.from_numpy(predict_semantic(ridge_model, dataset.get("fmri", "train")).astype(np.float32))
    c_gt = torch.from_numpy(c_gt_np.astype(np.float32))

    opt = torch.optim.AdamW([
        {"params": den.parameters(), "lr": cfg.lr},
        {"params": aco.parameters(), "lr": cfg.acoustic_lr},
    ], weight_decay=cfg.weight_decay)
    sampler = BatchSampler(len(x), cfg.batch, seed)
    gen = torch.Generator().manual_seed(seed + 1)
    rng = np.random.default_rng([seed, 0x1D])
    den.train()
    aco.train()
    losses, history = [], []
    for step in range(1, cfg.steps + 1):
        idx = sampler.next()
        t = torch.randint(1, sched.T + 1, (len(idx),), generator=gen)
        eps = torch.randn(z_all[idx].shape, generator=gen)
        s_in = mix_semantic(s_gt[idx], s_dec[idx], p_gt, rng)
        c = aco(s_in, x[idx])
        loss = ldm_loss(z_all[idx], c, c_gt[idx], t, eps, den, sched)
        if not torch.isfinite(loss):
            raise TrainingError(step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
        if step % cfg.log_every == 0 or step == cfg.steps:
            history.append({"step": step, "loss": float(np.mean(losses[-cfg.log_every:]))})
    den.eval()
    aco.eval()
    return LdmRun(den, aco, history, np.array(losses))


def sampling_timesteps(T: int, steps: int) -> np.ndarray:
    if not 1 <= steps <= T:
        raise ConfigurationError(f"steps must lie in [1, T={T}], got {steps}")
    # evenly spaced from the top step down; a single step jumps straight from T to the clean latent
    return np.unique(np.round(np.linspace(T, 1, steps)).astype(int))[::-1]


@torch.no_grad()
def sample(denoiser, c, sched: DiffusionSchedule, steps: int, mode: str = "deterministic", seed: int = 0,
           z_init=None, t_start: int | None = None, shape=None, clip: float | None = None):
    """Reverse process from N(0, I) (or ``z_init`` at ``t_start``) to a clean latent.

    ``deterministic`` is the eta = 0 DDIM update on a strided subset of steps;
    ``ancestral`` is the DDPM update with posterior variance on the same
    (respaced) subset. ``denoiser`` is any callable ``(z_t, t, c) -> eps``.
    ``clip`` bounds the predicted clean latent at every step (the noise
    estimate is re-derived from the clipped value). Returned latents live in
    the denoiser's normalized space.
    """
    if mode not in ("deterministic", "ancestral"):
        raise ConfigurationError(f"unknown sampler mode {mode!r}")
    t_top = sched.T if t_start is None else t_start
    if steps > sched.T:
        raise ConfigurationError(f"steps={steps} exceeds T={sched.T}")
    ts = sampling_timesteps(t_top, min(steps, t_top))
    gen = torch.Generator().manual_seed(seed)
    dtype = c.dtype if torch.is_tensor(c) else torch.float32
    if z_init is None:
        z = torch.randn(shape, generator=gen, dtype=torch.float64).to(dtype)
    else:
        z = torch.as_tensor(z_init).clone()
    for i, t in enumerate(ts):
        t_prev = int(ts[i + 1]) if i + 1 < len(ts) else 0
        a_t, a_prev = float(sched.a(t)), float(sched.a(t_prev))
        eps = denoiser(z, torch.full((z.shape[0],), int(t), dtype=torch.long), c)
        z0 = (z - math.sqrt(1.0 - a_t) * eps) / math.sqrt(a_t)
        if clip is not None:
            z0 = z0.clamp(-clip, clip)
            eps = (z - math.sqrt(a_t) * z0) / math.sqrt(1.0 - a_t)
        if mode == "deterministic":
            z = math.sqrt(a_prev) * z0 + math.sqrt(1.0 - a_prev) * eps
        else:
            beta = 1.0 - a_t / a_prev
            mean = (math.sqrt(a_prev) * beta / (1.0 - a_t)) * z0 + (math.sqrt(1.0 - beta) * (1.0 - a_prev) / (1.0 - a_t)) * z
            if t_prev > 0:
                var = beta * (1.0 - a_prev) / (1.0 - a_t)
                noise = torch.randn(z.shape, generator=gen, dtype=torch.float64).to(z.dtype)
                z = mean + math.sqrt(var) * noise
            else:
                z = mean
    return z


def generate_mels(denoiser: Denoiser, c: np.ndarray, bundle, sched: DiffusionSchedule, steps: int,
                  mode: str, seeds, n_frames: int) -> np.ndarray:
    """Sample one latent per condition (seed per sample) and decode to 64-band mels (float32, the archive dtype)."""
    out = []
    for ci, seed in zip(c, seeds):
        ct = torch.as_tensor(ci[None], dtype=torch.float32)
        z = sample(denoiser, ct, sched, steps, mode, int(seed), shape=(1, 16) + denoiser.grid)
        z = denoiser.denormalize(z)[0].double().numpy()
        out.append(bundle.vae_decode(z, n_frames))
    return np.stack(out).astype(np.float32)


@dataclass
class ReconPipeline:
    """Everything needed for fMRI -> mel: ridge, acoustic decoder, denoiser, schedule and sampler.

    ``lineage`` maps each component name to the dataset hash it was trained
    against; construction refuses mixed lineages.
    """

    bundle: object
    ridge: object
    acoustic: nn.Module
    denoiser: Denoiser
    sched: DiffusionSchedule
    sampler: object
    n_frames: int
    lineage: dict = field(default_factory=dict)

    def __post_init__(self):
        from .errors import PipelineIntegrityError

        hashes = set(self.lineage.values())
        if len(hashes) > 1:
            detail = ", ".join(f"{k}={v[:12]}" for k, v in sorted(self.lineage.items()))
            raise PipelineIntegrityError(f"components trained on different datasets: {detail}")

    def prompt_embedding(self, prompt) -> np.ndarray:
        """Text label -> text-table embedding; waveform (array or Waveform) -> audio embedding."""
        from .standins import mel_frontend_128

        if isinstance(prompt, str):
            return self.bundle.clap_text_encode(prompt)
        samples = getattr(prompt, "samples", prompt)
        return self.bundle.clap_audio_encode(mel_frontend_128(np.asarray(samples, dtype=np.float64)))

    def semantic(self, x: np.ndarray, prompts=None) -> np.ndarray:
        from .ridge import predict_semantic

        s = predict_semantic(self.ridge, x)
        if prompts is not None:
            if len(prompts) != len(x):
                raise ShapeError(f"{len(prompts)} prompts for {len(x)} fMRI samples")
            s = np.stack([si if p is None else self.prompt_embedding(p) for si, p in zip(s, prompts)])
        return s

    def reconstruct_batch(self, x, prompts=None, seeds=None) -> np.ndarray:
        """(N, V) fMRI -> (N, 64, F) mels; sample ``i`` uses seed ``sampler.seed + i`` unless given."""
        from .acoustic import acoustic_forward

        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        s = self.semantic(x, prompts)
        c = acoustic_forward(self.acoustic, s, x)
        if seeds is None:
            seeds = [self.sampler.seed + i for i in range(len(x))]
        return generate_mels(self.denoiser, c, self.bundle, self.sched, self.sampler.steps,
                             self.sampler.mode, seeds, self.n_frames)


def reconstruct(x, pipeline: ReconPipeline, prompt=None, vocoder: bool = False, seed: int | None = None):
    """One fMRI sample -> (Mel64, waveform or None). ``prompt`` replaces the decoded semantic embedding."""
    from .standins import vocoder_griffinlim

    voxels = np.asarray(getattr(x, "voxels", x), dtype=np.float64)
    seeds = [pipeline.sampler.seed if seed is None else seed]
    mel = pipeline.reconstruct_batch(voxels[None], None if prompt is None else [prompt], seeds)[0]
    wave = vocoder_griffinlim(mel) if vocoder else None
    return mel, wave
