"""Two-stage fMRI-to-audio reconstruction: ridge semantic decoding, a semantic-conditioned
acoustic transformer and a dual-conditioned latent diffusion model, with synthetic data,
seeded stand-in feature extractors, baselines and an evaluation suite."""

__version__ = "0.1.0"
