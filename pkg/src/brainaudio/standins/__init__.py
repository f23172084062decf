"""Mel front-ends, patch arithmetic and seeded stand-in models."""
from .audio import (
    LOG_FLOOR,
    mel128_to_mel64,
    mel_centers,
    mel_filterbank,
    mel_frontend_64,
    mel_frontend_128,
    vocoder_griffinlim,
)
from .bundle import Bundle, MaeDecoder, build_bundle, pooled_stats
from .patches import n_patches, patchify, unpatchify


def clap_audio_encode(mel128, bundle):
    return bundle.clap_audio_encode(mel128)


def clap_text_encode(label, bundle):
    return bundle.clap_text_encode(label)


def mae_encode(patches, bundle):
    return bundle.mae_encode(patches)


def mae_decode(c, decoder):
    """Run a (fine-tunable) MAE decoder; returns ``(patches, intermediates)``."""
    return decoder(c)


def vae_codec(x, mode, bundle, n_frames=None):
    if mode == "encode":
        return bundle.vae_encode(x)
    if mode == "decode":
        return bundle.vae_decode(x, n_frames)
    raise ValueError(f"mode must be 'encode' or 'decode', got {mode!r}")


def metric_embedders(mel64, which, bundle):
    return bundle.embed(mel64, which)


def classifier_logits(embedding, bundle):
    return bundle.classifier_logits(embedding)


__all__ = [
    "LOG_FLOOR", "Bundle", "MaeDecoder", "build_bundle", "classifier_logits", "clap_audio_encode",
    "clap_text_encode", "mae_decode", "mae_encode", "mel128_to_mel64", "mel_centers",
    "mel_filterbank", "mel_frontend_128", "mel_frontend_64", "metric_embedders", "n_patches",
    "patchify", "pooled_stats", "unpatchify", "vae_codec", "vocoder_griffinlim",
]
