"""16x16 patch tiling of 128-band mels and the lossless 4x4 VAE stand-in."""
from __future__ import annotations

import math

import numpy as np

from ..errors import ShapeError

PATCH = 16
ROWS_FREQ = 128 // PATCH


def pad_time(mel: np.ndarray, multiple: int) -> np.ndarray:
    """Edge-replicate the last frame until the time axis is a multiple of ``multiple``."""
    frames = mel.shape[-1]
    extra = (-frames) % multiple
    if not extra:
        return mel
    pad = [(0, 0)] * (mel.ndim - 1) + [(0, extra)]
    return np.pad(mel, pad, mode="edge")


def n_patches(n_frames: int) -> int:
    return ROWS_FREQ * math.ceil(n_frames / PATCH)


def patchify(mel: np.ndarray) -> np.ndarray:
    """(..., 128, F) mel -> (..., N_patch, 256) patches in time-major order.

    Patch ``i`` sits at time column ``i // 8`` and frequency row ``i % 8``, so
    the first ``8k`` patches cover exactly the first ``16k`` frames.
    """
    mel = np.asarray(mel)
    if mel.ndim < 2 or mel.shape[-2] != 128:
        raise ShapeError(f"patchify expects 128 mel rows, got shape {mel.shape}")
    mel = pad_time(mel, PATCH)
    lead = mel.shape[:-2]
    cols = mel.shape[-1] // PATCH
    tiles = mel.reshape(*lead, ROWS_FREQ, PATCH, cols, PATCH)
    nd = len(lead)
    # -> (..., cols, rows, 16 freq, 16 time)
    tiles = tiles.transpose(*range(nd), nd + 2, nd, nd + 1, nd + 3)
    return tiles.reshape(*lead, cols * ROWS_FREQ, PATCH * PATCH)


def unpatchify(patches: np.ndarray) -> np.ndarray:
    """Inverse of :func:`patchify` on the padded grid: (..., N, 256) -> (..., 128, 16 * N / 8)."""
    patches = np.asarray(patches)
    if patches.ndim < 2 or patches.shape[-1] != PATCH * PATCH or patches.shape[-2] % ROWS_FREQ:
        raise ShapeError(f"unpatchify expects (..., 8k, 256) patches, got shape {patches.shape}")
    lead = patches.shape[:-2]
    cols = patches.shape[-2] // ROWS_FREQ
    nd = len(lead)
    tiles = patches.reshape(*lead, cols, ROWS_FREQ, PATCH, PATCH)
    tiles = tiles.transpose(*range(nd), nd + 1, nd + 2, nd, nd + 3)
    return tiles.reshape(*lead, 128, cols * PATCH)


def vae_encode(mel64: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Orthogonal 4x4 block transform: (64, F2) -> (16 channels, 16, ceil(F2 / 4))."""
    mel64 = np.asarray(mel64)
    if mel64.ndim != 2 or mel64.shape[0] % 4:
        raise ShapeError(f"vae_encode expects (64, F) mel, got shape {mel64.shape}")
    mel64 = pad_time(mel64, 4)
    rows, width = mel64.shape[0] // 4, mel64.shape[1] // 4
    blocks = mel64.reshape(rows, 4, width, 4).transpose(0, 2, 1, 3).reshape(rows, width, 16)
    return np.einsum("rwp,cp->crw", blocks, q)


def vae_decode(z: np.ndarray, q: np.ndarray, n_frames: int | None = None) -> np.ndarray:
    z = np.asarray(z)
    if z.ndim != 3 or z.shape[0] != 16:
        raise ShapeError(f"vae_decode expects (16, R, W) latents, got shape {z.shape}")
    _, rows, width = z.shape
    blocks = np.einsum("crw,cp->rwp", z, q)
    mel = blocks.reshape(rows, width, 4, 4).transpose(0, 2, 1, 3).reshape(rows * 4, width * 4)
    return mel if n_frames is None else mel[:, :n_frames]
