"""Command-line surface: one subcommand per pipeline stage, artifacts under ``--out``.

Every artifact embeds the config hash of each upstream artifact it consumed;
stages recompute the expected upstream hash from the current config and refuse
to run on a mismatch. Exit codes: 0 success, 1 validation/lineage error,
2 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import wave
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .archive import MANIFEST, config_hash, load_archive, save_archive, write_json_atomic
from .config import ExperimentConfig
from .errors import ConfigurationError, LineageError, MissingArtifactError, ValidationError

COMMANDS = ("generate", "build-bundle", "train-semantic", "train-acoustic", "train-ldm", "reconstruct",
            "evaluate", "probe", "compare", "prompt-sweep", "plot")


# --------------------------------------------------------------------------- paths / lineage
def tag(variant: str, p_gt: float) -> str:
    return f"{variant}-p{p_gt:g}"


class Workspace:
    """Artifact directory layout and lineage-checked loaders."""

    def __init__(self, out: Path, cfg: ExperimentConfig):
        self.out = Path(out)
        self.cfg = cfg

    # locations
    @property
    def bundle_dir(self):
        return self.out / "bundle"

    @property
    def dataset_dir(self):
        return self.out / "dataset"

    @property
    def semantic_dir(self):
        return self.out / "semantic"

    def acoustic_dir(self, variant, p_gt):
        return self.out / "acoustic" / tag(variant, p_gt)

    def ldm_dir(self, variant, p_gt):
        return self.out / "ldm" / tag(variant, p_gt)

    def recon_dir(self, variant, p_gt, prompt):
        return self.out / "recon" / f"{tag(variant, p_gt)}-{prompt}"

    @property
    def reports_dir(self):
        return self.out / "reports"

    # expected configs (what the current config would produce)
    def bundle_config(self):
        from .standins.bundle import bundle_config

        return bundle_config(self.cfg)

    def semantic_config(self, dataset_hash):
        return {"ridge": asdict(self.cfg.ridge), "dataset_hash": dataset_hash}

    def acoustic_config(self, variant, p_gt, dataset_hash):
        from .experiments import acoustic_config

        return {"acoustic": asdict(acoustic_config(self.cfg, variant, p_gt)), "variant": variant, "p_gt": p_gt,
                "seed": self.cfg.seed, "n_fmri_token": self.cfg.ridge.n_fmri_token, "dataset_hash": dataset_hash,
                "semantic_hash": config_hash(self.semantic_config(dataset_hash))}

    def ldm_config(self, variant, p_gt, dataset_hash):
        return {"ldm": asdict(self.cfg.ldm), "variant": variant, "p_gt": p_gt, "seed": self.cfg.seed,
                "dataset_hash": dataset_hash,
                "acoustic_hash": config_hash(self.acoustic_config(variant, p_gt, dataset_hash))}

    def recon_config(self, variant, p_gt, prompt, dataset_hash):
        return {"sampler": asdict(self.cfg.sampler), "prompt": prompt, "dataset_hash": dataset_hash,
                "ldm_hash": config_hash(self.ldm_config(variant, p_gt, dataset_hash))}

    # loaders
    @staticmethod
    def _require(path: Path, stage: str, expected: dict | None = None):
        if not (path / MANIFEST).exists():
            raise MissingArtifactError(path, stage)
        arrays, manifest = load_archive(path)
        if expected is not None and manifest["config_hash"] != config_hash(expected):
            raise LineageError(str(path), config_hash(expected), manifest["config_hash"])
        return arrays, manifest

    def bundle(self):
        from .standins import Bundle

        self._require(self.bundle_dir, "build-bundle", self.bundle_config())
        return Bundle.load(self.bundle_dir)

    def dataset(self, bundle=None):
        from .datagen import Dataset

        bundle = bundle or self.bundle()
        self._require(self.dataset_dir, "generate")
        ds = Dataset.load(self.dataset_dir)
        expected = {"data": asdict(self.cfg.data), "bundle_hash": bundle.hash}
        found = {"data": ds.config["data"], "bundle_hash": ds.config["bundle_hash"]}
        if config_hash(expected) != config_hash(found):
            raise LineageError(str(self.dataset_dir), config_hash(expected), config_hash(found))
        return ds

    def semantic(self, ds):
        from .ridge import RidgeModel

        arrays, manifest = self._require(self.semantic_dir, "train-semantic", self.semantic_config(ds.hash))
        return RidgeModel.from_arrays(arrays, ds.arrays["fmri"].shape[1], manifest["config"]["ridge"]["lam"])

    def acoustic(self, ds, variant, p_gt):
        from .checkpoints import acoustic_from_arrays, mae_decoder_from_arrays
        from .experiments import acoustic_config

        arrays, manifest = self._require(self.acoustic_dir(variant, p_gt), f"train-acoustic --variant {variant} "
                                         f"--p-gt {p_gt:g}", self.acoustic_config(variant, p_gt, ds.hash))
        meta = manifest["meta"]
        model = acoustic_from_arrays(arrays, meta, acoustic_config(self.cfg, variant, p_gt))
        return model, mae_decoder_from_arrays(arrays, meta), manifest

    def pipeline(self, ds, bundle, variant, p_gt):
        from .checkpoints import acoustic_from_arrays, denoiser_from_arrays
        from .diffusion import ReconPipeline, make_schedule
        from .experiments import acoustic_config

        arrays, manifest = self._require(self.ldm_dir(variant, p_gt), f"train-ldm --variant {variant} "
                                         f"--p-gt {p_gt:g}", self.ldm_config(variant, p_gt, ds.hash))
        meta = manifest["meta"]
        sched = make_schedule(self.cfg.ldm.T, self.cfg.ldm.beta_start, self.cfg.ldm.beta_end)
        acoustic = acoustic_from_arrays(arrays, meta, acoustic_config(self.cfg, variant, p_gt))
        den = denoiser_from_arrays(arrays, meta, sched, self.cfg.ldm)
        return ReconPipeline(bundle, self.semantic(ds), acoustic, den, sched, self.cfg.sampler,
                             ds.get("mel64").shape[2], {"dataset": ds.hash, "ldm": manifest["config"]["dataset_hash"]})

    def recon(self, ds, variant, p_gt, prompt):
        return self._require(self.recon_dir(variant, p_gt, prompt), f"reconstruct --variant {variant} "
                             f"--p-gt {p_gt:g} --prompt {prompt}",
                             self.recon_config(variant, p_gt, prompt, ds.hash))


# --------------------------------------------------------------------------- table output
def write_table(path: Path, obj: dict, rows: list) -> None:
    """JSON report plus a CSV mirror of its rows."""
    write_json_atomic(path.with_name(path.name + ".json"), obj)
    buf = io.StringIO()
    if rows:
        fields = list(rows[0])
        writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    tmp = path.with_name(path.name + ".csv.tmp")
    tmp.write_text(buf.getvalue())
    tmp.replace(path.with_name(path.name + ".csv"))


def write_wav(path: Path, samples: np.ndarray, rate: int = 16000) -> None:
    pcm = (np.clip(samples, -1.0, 1.0) * 32767.0).round().astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(rate)
        fh.writeframes(pcm.tobytes())


def _report_dict(rep) -> dict:
    return rep.to_dict()


# --------------------------------------------------------------------------- commands
def cmd_build_bundle(ws: Workspace, args) -> str:
    from .standins import build_bundle

    bundle = build_bundle(ws.cfg)
    bundle.save(ws.bundle_dir)
    return f"bundle {bundle.hash[:12]} -> {ws.bundle_dir}"


def cmd_generate(ws: Workspace, args) -> str:
    from .datagen import build_dataset

    bundle = ws.bundle()
    ds = build_dataset(ws.cfg, bundle)
    ds.save(ws.dataset_dir)
    return f"dataset {ds.hash[:12]} ({len(ds.indices('train'))} train / {len(ds.indices('test'))} test) -> {ws.dataset_dir}"


def cmd_train_semantic(ws: Workspace, args) -> str:
    from .experiments import fit_semantic

    ds = ws.dataset()
    model = fit_semantic(ds, ws.cfg)
    save_archive(ws.semantic_dir, model.to_arrays(), ws.semantic_config(ds.hash), {"k": model.k})
    return f"semantic ridge (k={model.k}, lam={model.lam:g}) -> {ws.semantic_dir}"


def cmd_train_acoustic(ws: Workspace, args) -> str:
    from .acoustic import train_acoustic
    from .checkpoints import save_modules
    from .experiments import acoustic_config

    bundle = ws.bundle()
    ds = ws.dataset(bundle)
    ridge = ws.semantic(ds)
    p_gt = _p_gt(ws, args)
    run = train_acoustic(ds, ridge, bundle, acoustic_config(ws.cfg, args.variant, p_gt),
                         ws.cfg.ridge.n_fmri_token, ws.cfg.seed)
    meta = {"d_sem": ds.arrays["s_gt"].shape[1], "n_fmri_token": ws.cfg.ridge.n_fmri_token,
            "n_patch": ds.arrays["c_gt"].shape[1], "d_aco": ds.arrays["c_gt"].shape[2],
            "dec_hidden": bundle.config["dec_hidden"], "history": run.history}
    path = ws.acoustic_dir(args.variant, p_gt)
    save_modules(path, {"acoustic": run.model, "mae_decoder": run.mae_decoder},
                 ws.acoustic_config(args.variant, p_gt, ds.hash), meta)
    return f"acoustic decoder {tag(args.variant, p_gt)} -> {path}"


def cmd_train_ldm(ws: Workspace, args) -> str:
    from .checkpoints import save_modules
    from .diffusion import make_schedule, train_ldm

    bundle = ws.bundle()
    ds = ws.dataset(bundle)
    ridge = ws.semantic(ds)
    p_gt = _p_gt(ws, args)
    acoustic, _, amanifest = ws.acoustic(ds, args.variant, p_gt)
    sched = make_schedule(ws.cfg.ldm.T, ws.cfg.ldm.beta_start, ws.cfg.ldm.beta_end)
    run = train_ldm(ds, acoustic, ridge, bundle, sched, ws.cfg.ldm, p_gt, ws.cfg.seed)
    meta = {**amanifest["meta"], "grid": list(run.denoiser.grid), "ldm_history": run.history}
    path = ws.ldm_dir(args.variant, p_gt)
    save_modules(path, {"denoiser": run.denoiser, "acoustic": run.acoustic},
                 ws.ldm_config(args.variant, p_gt, ds.hash), meta)
    return f"latent diffusion model {tag(args.variant, p_gt)} -> {path}"


def cmd_reconstruct(ws: Workspace, args) -> str:
    from .experiments import prompt_inputs
    from .standins import vocoder_griffinlim

    bundle = ws.bundle()
    ds = ws.dataset(bundle)
    p_gt = _p_gt(ws, args)
    pipe = ws.pipeline(ds, bundle, args.variant, p_gt)
    x = ds.get("fmri", "test")
    mels = pipe.reconstruct_batch(x, prompt_inputs(args.prompt, ds, bundle, ws.cfg.seed))
    ids = ds.get("stimulus_id", "test")
    path = ws.recon_dir(args.variant, p_gt, args.prompt)
    config = ws.recon_config(args.variant, p_gt, args.prompt, ds.hash)
    save_archive(path, {"mel64": mels, "stimulus_id": ids}, config, {"n": len(mels)})
    index = {"config_hash": config_hash(config), "samples": [
        {"row": i, "stimulus_id": int(s), "class_id": int(c)} for i, (s, c) in enumerate(zip(ids, ds.get("labels", "test")))
    ]}
    if args.audio:
        wav_dir = path / "wav"
        wav_dir.mkdir(exist_ok=True)
        for i, m in enumerate(mels):
            name = f"{int(ids[i]):06d}.wav"
            write_wav(wav_dir / name, vocoder_griffinlim(m))
            index["samples"][i]["wav"] = f"wav/{name}"
    write_json_atomic(path / "index.json", index)
    return f"{len(mels)} reconstructions ({tag(args.variant, p_gt)}, prompt={args.prompt}) -> {path}"


def cmd_evaluate(ws: Workspace, args) -> str:
    from .metrics import evaluate_suite

    bundle = ws.bundle()
    ds = ws.dataset(bundle)
    p_gt = _p_gt(ws, args)
    arrays, manifest = ws.recon(ds, args.variant, p_gt, args.prompt)
    report = evaluate_suite(list(arrays["mel64"]), list(ds.get("mel64", "test")), bundle,
                            {"recon_hash": manifest["config_hash"], "dataset_hash": ds.hash})
    name = f"evaluate-{tag(args.variant, p_gt)}-{args.prompt}"
    d = _report_dict(report)
    write_table(ws.reports_dir / name, d, [{k: v for k, v in d.items() if k != "config"}])
    return f"pcc={report.pcc:.4f} ssim={report.ssim:.4f} fd={report.fd:.4f} fad={report.fad:.4f} " \
           f"kl={report.kl:.4f} kl_s={report.kl_s:.4f} -> {ws.reports_dir / name}.json"


def cmd_probe(ws: Workspace, args) -> str:
    from .acoustic import acoustic_forward
    from .metrics import svm_probe
    from .ridge import predict_semantic

    bundle = ws.bundle()
    ds = ws.dataset(bundle)
    ridge = ws.semantic(ds)
    p_gt = _p_gt(ws, args)
    model, _, amanifest = ws.acoustic(ds, args.variant, p_gt)
    x = ds.get("fmri", "test")
    labels = ds.get("labels", "test")
    s_dec = predict_semantic(ridge, x)
    c_dec = acoustic_forward(model, s_dec, x)
    shuffled = np.random.default_rng([ws.cfg.seed, 0x5F]).permutation(labels)
    seed = ws.cfg.seed
    rows = [
        ("acoustic_ground_truth", svm_probe(ds.get("c_gt", "test"), labels, seed=seed)),
        ("acoustic_decoded", svm_probe(c_dec, labels, seed=seed)),
        ("acoustic_shuffled_labels", svm_probe(ds.get("c_gt", "test"), shuffled, seed=seed)),
        ("semantic_ground_truth", svm_probe(ds.get("s_gt", "test"), labels, seed=seed)),
        ("semantic_decoded", svm_probe(s_dec, labels, seed=seed)),
    ]
    chance = 1.0 / ds.config["data"]["n_classes"]
    obj = {"chance": chance, "acoustic_hash": amanifest["config_hash"], "dataset_hash": ds.hash,
           "probes": {name: r.to_dict() for name, r in rows}}
    write_table(ws.reports_dir / "probe", obj, [{"features": n, "accuracy": r.accuracy} for n, r in rows])
    return " ".join(f"{n}={r.accuracy:.3f}" for n, r in rows) + f" chance={chance:.3f}"


def cmd_compare(ws: Workspace, args) -> str:
    from .baselines import DIRECT_KINDS, c2f_decoder_mels, fit_direct
    from .experiments import linear_to_latent, mean_pcc
    from .metrics import evaluate_suite
    from .acoustic import acoustic_forward
    from .ridge import predict_semantic

    bundle = ws.bundle()
    ds = ws.dataset(bundle)
    ridge = ws.semantic(ds)
    p_gt = ws.cfg.acoustic.p_gt
    x = ds.get("fmri", "test")
    targets = ds.get("mel64", "test")
    s_dec = predict_semantic(ridge, x)
    mels, lineage = {}, {}
    for variant, name in (("c2f", "c2f_ldm"), ("fine", "fine_ldm")):
        arrays, manifest = ws.recon(ds, variant, p_gt, "none")
        mels[name] = arrays["mel64"]
        lineage[name] = manifest["config_hash"]
    c2f_model, c2f_dec, _ = ws.acoustic(ds, "c2f", p_gt)
    fine_model, _, _ = ws.acoustic(ds, "fine", p_gt)
    mels["c2f_decoder"] = c2f_decoder_mels(c2f_model, c2f_dec, s_dec, x, targets.shape[2])
    for kind in DIRECT_KINDS:
        mels[kind] = fit_direct(kind, ds, ws.cfg.baselines, ws.cfg.seed).predict(x)
    reports = {name: evaluate_suite(list(m), list(targets), bundle, {"method": name}) for name, m in mels.items()}
    c_test = ds.get("c_gt", "test")
    acoustic_pcc = {
        "c2f": mean_pcc(acoustic_forward(c2f_model, s_dec, x), c_test),
        "fine": mean_pcc(acoustic_forward(fine_model, s_dec, x), c_test),
        "linear": mean_pcc(linear_to_latent(ds, ws.cfg.baselines.lir_lam), c_test),
    }
    obj = {"dataset_hash": ds.hash, "bundle_hash": bundle.hash, "lineage": lineage, "method_order": list(reports),
           "methods": {n: {k: v for k, v in r.to_dict().items() if k != "config"} for n, r in reports.items()},
           "acoustic_pcc": acoustic_pcc}
    rows = [{"method": n, **obj["methods"][n]} for n in reports]
    write_table(ws.reports_dir / "compare", obj, rows)
    return "\n".join(f"{r['method']:>20s} pcc={r['pcc']:.4f} fd={r['fd']:.3f} kl={r['kl']:.4f}" for r in rows)


def cmd_prompt_sweep(ws: Workspace, args) -> str:
    from .experiments import PROMPT_KINDS, prompt_grid

    bundle = ws.bundle()
    ds = ws.dataset(bundle)
    pipelines = {p: ws.pipeline(ds, bundle, args.variant, p) for p in ws.cfg.p_gt_sweep}
    grid = prompt_grid(pipelines, ds, bundle, PROMPT_KINDS, ws.cfg.seed)
    cells = {f"{p:g}": {k: {m: v for m, v in r.to_dict().items() if m != "config"} for k, r in row.items()}
             for p, row in grid.items()}
    rows = [{"p_gt": p, "prompt": k, **v} for p, row in cells.items() for k, v in row.items()]
    write_table(ws.reports_dir / "prompt_sweep", {"dataset_hash": ds.hash, "variant": args.variant, "grid": cells},
                rows)
    return "\n".join(f"P_gt={r['p_gt']:>4s} {r['prompt']:>5s} kl={r['kl']:.4f} fd={r['fd']:.3f}" for r in rows)


def cmd_plot(ws: Workspace, args) -> str:
    from .plots import emit_plots

    written = emit_plots(ws, seed=ws.cfg.seed, perplexity=args.perplexity)
    return "\n".join(str(p) for p in written)


def _p_gt(ws: Workspace, args) -> float:
    p = ws.cfg.acoustic.p_gt if getattr(args, "p_gt", None) is None else args.p_gt
    if not 0.0 <= p <= 1.0:
        raise ConfigurationError(f"--p-gt {p} outside [0, 1]")
    return float(p)


HANDLERS = {
    "build-bundle": cmd_build_bundle, "generate": cmd_generate, "train-semantic": cmd_train_semantic,
    "train-acoustic": cmd_train_acoustic, "train-ldm": cmd_train_ldm, "reconstruct": cmd_reconstruct,
    "evaluate": cmd_evaluate, "probe": cmd_probe, "compare": cmd_compare, "prompt-sweep": cmd_prompt_sweep,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config JSON (strict schema)")
    common.add_argument("--seed", type=int, help="override the global seed")
    common.add_argument("--out", type=Path, default=Path("artifacts"), help="artifact directory")
    parser = argparse.ArgumentParser(prog="brainaudio", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name in ("train-acoustic", "train-ldm", "reconstruct", "evaluate", "probe", "prompt-sweep"):
            p.add_argument("--variant", choices=("c2f", "fine"), default="c2f")
        if name in ("train-acoustic", "train-ldm", "reconstruct", "evaluate", "probe"):
            p.add_argument("--p-gt", type=float, default=None, help="defaults to acoustic.p_gt")
        if name in ("reconstruct", "evaluate"):
            p.add_argument("--prompt", choices=("none", "text", "audio"), default="none")
        if name == "reconstruct":
            p.add_argument("--audio", action="store_true", help="also write 16 kHz PCM16 WAV files")
        if name == "plot":
            p.add_argument("--perplexity", type=float, default=15.0)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
        print(HANDLERS[args.command](Workspace(args.out, cfg), args))
        return 0
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - surface anything else as a runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
