"""Comparison methods: direct fMRI -> mel decoders and the two pipeline ablations."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .config import BaselineConfig
from .errors import ConfigurationError, PipelineIntegrityError, ShapeError, TrainingError
from .nn import BatchSampler, Decoder, Encoder, seed_everything
from .ridge import RidgeModel, fit_ridge

DIRECT_KINDS = ("lir", "mlp", "bilstm", "transformer_direct")
PIPELINE_KINDS = ("fine_ldm", "c2f_decoder")
FRAMES_PER_QUERY = 4


class MlpDirect(nn.Module):
    """Three affine layers with GELU between them."""

    def __init__(self, n_voxels: int, hidden: int, n_out: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(n_voxels, hidden), nn.GELU(),
            nn.Linear(hidden, hidden), nn.GELU(),
            nn.Linear(hidden, n_out),
        )

    def forward(self, x, n_frames):
        return self.net(x).view(x.shape[0], 64, n_frames)


class BiLstmDirect(nn.Module):
    """One bidirectional LSTM layer over frames; the projected fMRI vector is repeated at every frame.

    A learned per-frame offset is added to the repeated input so the recurrence
    has a notion of position.
    """

    def __init__(self, n_voxels: int, hidden: int, n_frames: int):
        super().__init__()
        self.inp = nn.Linear(n_voxels, hidden)
        self.frame_emb = nn.Parameter(0.02 * torch.randn(n_frames, hidden))
        self.lstm = nn.LSTM(hidden, hidden, batch_first=True, bidirectional=True)
        self.out = nn.Linear(2 * hidden, 64)

    def forward(self, x, n_frames):
        seq = self.inp(x).unsqueeze(1) + self.frame_emb[:n_frames]
        h, _ = self.lstm(seq)
        return self.out(h).transpose(1, 2)


class TransformerDirect(nn.Module):
    """Encoder over fMRI chunk tokens, decoder with one learned query per group of frames."""

    def __init__(self, n_voxels: int, n_frames: int, d_model: int = 64, n_heads: int = 4,
                 n_layers: int = 2, n_tokens: int = 8):
        super().__init__()
        self.n_tokens = n_tokens
        self.chunk = -(-n_voxels // n_tokens)
        self.pad = self.chunk * n_tokens - n_voxels
        self.tok_proj = nn.Linear(self.chunk, d_model)
        self.tok_pos = nn.Parameter(0.02 * torch.randn(n_tokens, d_model))
        self.encoder = Encoder(d_model, n_heads, n_layers)
        self.n_query = -(-n_frames // FRAMES_PER_QUERY)
        self.query = nn.Parameter(torch.randn(self.n_query, d_model))
        self.decoder = Decoder(d_model, n_heads, n_layers)
        self.out = nn.Linear(d_model, 64 * FRAMES_PER_QUERY)

    def forward(self, x, n_frames):
        b = x.shape[0]
        tokens = F.pad(x, (0, self.pad)).view(b, self.n_tokens, self.chunk)
        memory = self.encoder(self.tok_proj(tokens) + self.tok_pos)
        h = self.decoder(self.query.unsqueeze(0).expand(b, -1, -1), memory)
        y = self.out(h).view(b, self.n_query, 64, FRAMES_PER_QUERY)
        return y.permute(0, 2, 1, 3).reshape(b, 64, -1)[..., :n_frames]


@dataclass
class BaselineModel:
    kind: str
    mel_shape: tuple
    config: dict
    dataset_hash: str
    ridge: RidgeModel | None = None
    net: nn.Module | None = None
    norm: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    def predict(self, x) -> np.ndarray:
        """(N, V) fMRI -> (N, 64, F) log-mels."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None]
        if self.kind == "lir":
            return self.ridge.predict_raw(x).reshape(len(x), *self.mel_shape)
        self.net.eval()
        xs = torch.as_tensor((x - self.norm["x_mu"]) / self.norm["x_sd"], dtype=torch.float32)
        with torch.no_grad():
            y = torch.cat([self.net(xs[i:i + 64], self.mel_shape[1]) for i in range(0, len(xs), 64)])
        return y.double().numpy() * self.norm["y_sd"] + self.norm["y_mu"]


def _build_net(kind: str, n_voxels: int, n_frames: int, cfg: BaselineConfig) -> nn.Module:
    if kind == "mlp":
        return MlpDirect(n_voxels, cfg.mlp_hidden, 64 * n_frames)
    if kind == "bilstm":
        return BiLstmDirect(n_voxels, cfg.lstm_hidden, n_frames)
    return TransformerDirect(n_voxels, n_frames)


def fit_direct(kind: str, dataset, cfg: BaselineConfig, seed: int = 0) -> BaselineModel:
    """Fit one direct fMRI -> Mel64 decoder on the training split."""
    if kind not in DIRECT_KINDS:
        raise ConfigurationError(f"unknown direct baseline {kind!r}; choose from {DIRECT_KINDS}")
    x = dataset.get("fmri", "train").astype(np.float64)
    y = dataset.get("mel64", "train").astype(np.float64)
    mel_shape = y.shape[1:]
    echo = {"kind": kind, **asdict(cfg), "seed": seed}
    if kind == "lir":
        model = fit_ridge(x, y.reshape(len(y), -1), cfg.lir_lam, x.shape[1])
        return BaselineModel(kind, mel_shape, echo, dataset.hash, ridge=model)

    seed_everything(seed)
    x_mu, x_sd = x.mean(axis=0), x.std(axis=0)
    x_sd = np.where(x_sd == 0, 1.0, x_sd)
    y_mu = y.mean(axis=(0, 2), keepdims=True)[0]
    y_sd = np.array(y.std())
    norm = {"x_mu": x_mu, "x_sd": x_sd, "y_mu": y_mu, "y_sd": y_sd}
    net = _build_net(kind, x.shape[1], mel_shape[1], cfg)
    xt = torch.as_tensor((x - x_mu) / x_sd, dtype=torch.float32)
    yt = torch.as_tensor((y - y_mu) / y_sd, dtype=torch.float32)

    def train_mse() -> float:
        net.eval()
        with torch.no_grad():
            err = sum(float(F.mse_loss(net(xt[i:i + 64], mel_shape[1]), yt[i:i + 64], reduction="sum"))
                      for i in range(0, len(xt), 64))
        net.train()
        return err / yt.numel()

    history = [{"step": 0, "train_mse": train_mse()}]
    if cfg.steps:
        opt = torch.optim.AdamW(net.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        sampler = BatchSampler(len(xt), cfg.batch, seed)
        net.train()
        for step in range(1, cfg.steps + 1):
            idx = sampler.next()
            loss = F.mse_loss(net(xt[idx], mel_shape[1]), yt[idx])
            if not torch.isfinite(loss):
                raise TrainingError(step)
            opt.zero_grad()
            loss.backward()
            opt.step()
        history.append({"step": cfg.steps, "train_mse": train_mse()})
    net.eval()
    return BaselineModel(kind, mel_shape, echo, dataset.hash, net=net, norm=norm, history=history)


def c2f_decoder_mels(acoustic_model, mae_decoder, s, x, n_frames: int) -> np.ndarray:
    """Decode acoustic latents through D^A and resample the 128-band result onto the 64-band grid."""
    from .acoustic import acoustic_forward
    from .standins import mel128_to_mel64, unpatchify

    c = acoustic_forward(acoustic_model, s, x)
    mae_decoder.eval()
    dtype = next(mae_decoder.parameters()).dtype
    with torch.no_grad():
        patches, _ = mae_decoder(torch.as_tensor(c, dtype=dtype))
    mel128 = unpatchify(patches.double().numpy())[..., :n_frames]
    return mel128_to_mel64(mel128)


def run_baseline(kind: str, x, parts: dict, n_frames: int, s=None) -> np.ndarray:
    """Produce test-split Mel64 reconstructions for a pipeline ablation.

    ``fine_ldm`` needs ``parts["pipeline"]`` (a :class:`ReconPipeline` built
    around a decoder without the semantic token); ``c2f_decoder`` needs
    ``parts["acoustic"]`` and ``parts["mae_decoder"]`` plus semantic inputs ``s``.
    """
    if kind == "fine_ldm":
        pipe = parts.get("pipeline")
        if pipe is None:
            raise PipelineIntegrityError("fine_ldm needs a trained reconstruction pipeline")
        if getattr(pipe.acoustic, "use_semantic", False):
            raise PipelineIntegrityError("fine_ldm needs an acoustic decoder without the semantic token")
        return pipe.reconstruct_batch(x)
    if kind == "c2f_decoder":
        missing = [k for k in ("acoustic", "mae_decoder") if parts.get(k) is None]
        if missing or s is None:
            raise PipelineIntegrityError(f"c2f_decoder is missing {missing or ['semantic inputs']}")
        return c2f_decoder_mels(parts["acoustic"], parts["mae_decoder"], s, x, n_frames)
    raise ConfigurationError(f"unknown pipeline baseline {kind!r}; choose from {PIPELINE_KINDS}")


def check_shapes(recons: np.ndarray, targets: np.ndarray) -> None:
    if recons.shape != targets.shape:
        raise ShapeError(f"reconstructions {recons.shape} vs targets {targets.shape}")
