"""Torch module checkpoints stored in the array-archive format."""
from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .archive import load_archive, save_archive
from .errors import CorruptionError

SEP = "__"


def module_arrays(modules: dict) -> dict:
    """Flatten ``{prefix: module}`` state dicts into ``{prefix__param: array}``."""
    out = {}
    for prefix, module in modules.items():
        for name, value in module.state_dict().items():
            out[f"{prefix}{SEP}{name}"] = value.detach().cpu().numpy()
    return out


def load_module_arrays(module: nn.Module, arrays: dict, prefix: str) -> nn.Module:
    state = {}
    ref = module.state_dict()
    for name, value in ref.items():
        key = f"{prefix}{SEP}{name}"
        if key not in arrays:
            raise CorruptionError(f"checkpoint lacks {key}")
        state[name] = torch.as_tensor(np.asarray(arrays[key]), dtype=value.dtype).reshape(value.shape)
    module.load_state_dict(state)
    module.eval()
    return module


def save_modules(path, modules: dict, config: dict, meta: dict | None = None) -> str:
    return save_archive(path, module_arrays(modules), config, meta)


def load_modules(path) -> tuple[dict, dict]:
    return load_archive(path)


def acoustic_from_arrays(arrays: dict, meta: dict, cfg) -> nn.Module:
    from .acoustic import AcousticDecoder

    model = AcousticDecoder(meta["d_sem"], np.zeros(meta["n_fmri_token"], dtype=np.int64), meta["n_patch"],
                            meta["d_aco"], cfg)
    return load_module_arrays(model, arrays, "acoustic")


def mae_decoder_from_arrays(arrays: dict, meta: dict) -> nn.Module:
    from .standins import MaeDecoder

    dec = MaeDecoder(meta["d_aco"], meta["dec_hidden"], 0.0, 1.0)
    return load_module_arrays(dec, arrays, "mae_decoder")


def denoiser_from_arrays(arrays: dict, meta: dict, sched, cfg) -> nn.Module:
    from .diffusion import Denoiser

    den = Denoiser(meta["d_aco"], meta["n_patch"], tuple(meta["grid"]), sched.alpha_cum, cfg.width)
    return load_module_arrays(den, arrays, "denoiser")
