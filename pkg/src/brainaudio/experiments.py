"""Pinned desk experiments: acoustic-feature PCC comparison, method table, prompt sweep.

These functions hold the experiment logic; the CLI persists their inputs and
outputs as artifacts, and the acceptance tests call them directly.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .acoustic import acoustic_forward, train_acoustic
from .baselines import DIRECT_KINDS, c2f_decoder_mels, fit_direct, run_baseline
from .config import ExperimentConfig
from .diffusion import ReconPipeline, make_schedule, train_ldm
from .metrics import MetricsReport, evaluate_suite, pcc
from .ridge import RidgeModel, fit_ridge, predict_semantic

VARIANTS = ("c2f", "fine")
PROMPT_KINDS = ("none", "text", "audio")


def fit_semantic(dataset, cfg: ExperimentConfig) -> RidgeModel:
    return fit_ridge(dataset.get("fmri", "train"), dataset.get("s_gt", "train"), cfg.ridge.lam, cfg.ridge.k)


def acoustic_config(cfg: ExperimentConfig, variant: str, p_gt: float | None = None):
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
    acfg = replace(cfg.acoustic, use_semantic=variant == "c2f")
    return acfg if p_gt is None else replace(acfg, p_gt=p_gt)


def mean_pcc(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.mean([pcc(a, b) for a, b in zip(pred, target)]))


def linear_to_latent(dataset, lam: float) -> np.ndarray:
    """Direct ridge regression from all voxels to the flattened acoustic latent (test predictions)."""
    c_train = dataset.get("c_gt", "train")
    model = fit_ridge(dataset.get("fmri", "train"), c_train.reshape(len(c_train), -1), lam, None)
    x_test = dataset.get("fmri", "test")
    return model.predict_raw(x_test).reshape(len(x_test), *c_train.shape[1:])


@dataclass
class AcousticComparison:
    seeds: list
    c2f: list
    fine: list
    linear: float
    models: dict = field(default_factory=dict, repr=False)

    @property
    def c2f_wins(self) -> int:
        return int(sum(a > b for a, b in zip(self.c2f, self.fine)))

    def to_dict(self) -> dict:
        return {"seeds": self.seeds, "c2f": self.c2f, "fine": self.fine, "linear": self.linear,
                "c2f_wins": self.c2f_wins}


def acoustic_comparison(dataset, ridge: RidgeModel, bundle, cfg: ExperimentConfig, seeds=(0, 1, 2, 3, 4),
                        patches=None) -> AcousticComparison:
    """Mean test PCC of decoded vs ground-truth acoustic latents for both decoders and the linear map."""
    from .acoustic import target_patches

    if patches is None:
        patches = target_patches(dataset, "train")
    x_test = dataset.get("fmri", "test")
    c_test = dataset.get("c_gt", "test")
    s_test = predict_semantic(ridge, x_test)
    out = AcousticComparison(list(seeds), [], [], mean_pcc(linear_to_latent(dataset, cfg.baselines.lir_lam), c_test))
    for seed in seeds:
        for variant in VARIANTS:
            run = train_acoustic(dataset, ridge, bundle, acoustic_config(cfg, variant), cfg.ridge.n_fmri_token,
                                 seed, patches)
            getattr(out, variant).append(mean_pcc(acoustic_forward(run.model, s_test, x_test), c_test))
            out.models[(variant, seed)] = run
    return out


def build_pipeline(dataset, ridge, bundle, acoustic_model, cfg: ExperimentConfig, p_gt: float, seed: int):
    """Train the LDM (jointly fine-tuning a copy of the acoustic decoder) and wrap a pipeline."""
    sched = make_schedule(cfg.ldm.T, cfg.ldm.beta_start, cfg.ldm.beta_end)
    run = train_ldm(dataset, acoustic_model, ridge, bundle, sched, cfg.ldm, p_gt, seed)
    pipe = ReconPipeline(bundle, ridge, run.acoustic, run.denoiser, sched, cfg.sampler,
                         dataset.get("mel64").shape[2], {"dataset": dataset.hash})
    return pipe, run


def method_table(dataset, ridge, bundle, cfg: ExperimentConfig, acoustic_runs: dict, seed: int = 0) -> dict:
    """Every method's test-split reconstructions scored with the full metric suite.

    ``acoustic_runs`` maps ``"c2f"`` / ``"fine"`` to trained :class:`AcousticRun` objects.
    Returns ``{"reports": {method: MetricsReport}, "mels": {method: array}, "pipelines": {...},
    "ldm_runs": {...}}``.
    """
    x_test = dataset.get("fmri", "test")
    targets = dataset.get("mel64", "test")
    n_frames = targets.shape[2]
    mels, pipelines, ldm_runs = {}, {}, {}
    for variant, name in (("c2f", "c2f_ldm"), ("fine", "fine_ldm")):
        pipe, ldm_runs[variant] = build_pipeline(dataset, ridge, bundle, acoustic_runs[variant].model, cfg, cfg.acoustic.p_gt, seed)
        pipelines[variant] = pipe
        mels[name] = pipe.reconstruct_batch(x_test) if variant == "c2f" else run_baseline(
            "fine_ldm", x_test, {"pipeline": pipe}, n_frames)
    c2f = acoustic_runs["c2f"]
    mels["c2f_decoder"] = c2f_decoder_mels(c2f.model, c2f.mae_decoder, predict_semantic(ridge, x_test), x_test,
                                           n_frames)
    for kind in DIRECT_KINDS:
        mels[kind] = fit_direct(kind, dataset, cfg.baselines, seed).predict(x_test)
    echo = {"dataset_hash": dataset.hash, "seed": seed}
    reports = {name: evaluate_suite(list(m), list(targets), bundle, {**echo, "method": name})
               for name, m in mels.items()}
    return {"reports": reports, "mels": mels, "pipelines": pipelines, "ldm_runs": ldm_runs}


def prompt_inputs(kind: str, dataset, bundle, seed: int = 0):
    """Per-test-sample prompts: class labels (text) or held-out clips of the same class (audio)."""
    from .datagen import generate_stimulus

    labels = dataset.get("labels", "test")
    if kind == "none":
        return None
    if kind == "text":
        return [bundle.labels[int(k)] for k in labels]
    if kind == "audio":
        d = dataset.config["data"]
        base = (1 << 29) + seed * 10_000
        return [generate_stimulus(int(k), d["duration_s"], base + i, d["n_classes"]) for i, k in enumerate(labels)]
    raise ValueError(f"prompt kind must be one of {PROMPT_KINDS}, got {kind!r}")


def prompt_grid(pipelines: dict, dataset, bundle, kinds=PROMPT_KINDS, seed: int = 0) -> dict:
    """``{p_gt: {prompt_kind: MetricsReport}}`` for pipelines keyed by P_gt."""
    x_test = dataset.get("fmri", "test")
    targets = list(dataset.get("mel64", "test"))
    grid: dict = {}
    for p_gt, pipe in pipelines.items():
        grid[p_gt] = {}
        for kind in kinds:
            mels = pipe.reconstruct_batch(x_test, prompt_inputs(kind, dataset, bundle, seed))
            grid[p_gt][kind] = evaluate_suite(list(mels), targets, bundle,
                                              {"dataset_hash": dataset.hash, "p_gt": p_gt, "prompt": kind})
    return grid


def prompt_sweep(dataset, bundle, cfg: ExperimentConfig, variant: str = "c2f", seed: int = 0,
                 kinds=PROMPT_KINDS) -> dict:
    """Train one pipeline per P_gt in the sweep list and evaluate each prompt condition."""
    from .acoustic import target_patches

    ridge = fit_semantic(dataset, cfg)
    patches = target_patches(dataset, "train")
    pipelines = {}
    for p_gt in cfg.p_gt_sweep:
        run = train_acoustic(dataset, ridge, bundle, acoustic_config(cfg, variant, p_gt), cfg.ridge.n_fmri_token,
                             seed, patches)
        pipelines[p_gt], _ = build_pipeline(dataset, ridge, bundle, run.model, cfg, p_gt, seed)
    return prompt_grid(pipelines, dataset, bundle, kinds, seed)


def reports_to_rows(reports: dict) -> list:
    rows = []
    for name, rep in reports.items():
        d = rep.to_dict() if isinstance(rep, MetricsReport) else dict(rep)
        d.pop("config", None)
        rows.append({"method": name, **d})
    return rows
