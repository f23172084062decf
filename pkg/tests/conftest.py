"""Shared fixtures: one default-config bundle and a small dataset for unit tests."""
from __future__ import annotations

import numpy as np
import pytest
import torch

from brainaudio.config import ExperimentConfig
from brainaudio.datagen import build_dataset
from brainaudio.standins import build_bundle

torch.set_num_threads(1)


def small_config(**overrides) -> ExperimentConfig:
    """A desk config shrunk for unit tests (the bundle section is left at defaults)."""
    base = {"data__n_train": 64, "data__n_test": 16, "ridge__k": 32, "ridge__n_fmri_token": 64,
            "acoustic__d_model": 16, "acoustic__steps": 0, "ldm__width": 16, "ldm__steps": 0,
            "sampler__steps": 10, "baselines__steps": 0, "baselines__mlp_hidden": 32,
            "baselines__lstm_hidden": 16}
    base.update(overrides)
    return ExperimentConfig().replace(**base)


@pytest.fixture(scope="session")
def bundle():
    return build_bundle(ExperimentConfig())


@pytest.fixture(scope="session")
def small_cfg():
    return small_config()


@pytest.fixture(scope="session")
def small_ds(small_cfg, bundle):
    return build_dataset(small_cfg, bundle)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY = {
    "data": {"n_train": 64, "n_test": 20},
    "bundle": {"calib_clips_per_class": 8, "calib_steps": 40},
    "ridge": {"k": 32, "n_fmri_token": 64},
    "acoustic": {"d_model": 16, "steps": 6, "log_every": 3},
    "ldm": {"width": 16, "steps": 4, "log_every": 2},
    "sampler": {"steps": 4},
    "baselines": {"steps": 4, "mlp_hidden": 32, "lstm_hidden": 16},
}


def tiny_config_file(path):
    """Write a strict-schema config for a seconds-long end-to-end CLI run."""
    import json

    raw = ExperimentConfig().to_dict()
    for section, values in TINY.items():
        raw[section].update(values)
    ExperimentConfig.from_dict(raw)
    path.write_text(json.dumps(raw, indent=2))
    return path


PIPELINE = [
    ["build-bundle"], ["generate"], ["train-semantic"],
    *[["train-acoustic", "--variant", v, "--p-gt", p] for v, p in
      (("c2f", "0"), ("c2f", "0.25"), ("c2f", "0.5"), ("fine", "0.25"))],
    *[["train-ldm", "--variant", v, "--p-gt", p] for v, p in
      (("c2f", "0"), ("c2f", "0.25"), ("c2f", "0.5"), ("fine", "0.25"))],
    ["reconstruct", "--variant", "c2f", "--audio"], ["reconstruct", "--variant", "fine"],
    ["evaluate", "--variant", "c2f"], ["evaluate", "--variant", "fine"],
    ["probe"], ["compare"], ["prompt-sweep"], ["plot"],
]


def run_pipeline(out, config):
    """Run every CLI stage in order; returns the list of exit codes."""
    from brainaudio.cli import main

    codes = []
    for argv in PIPELINE:
        codes.append(main([*argv, "--config", str(config), "--out", str(out)]))
        if codes[-1] != 0:
            raise AssertionError(f"{argv} exited {codes[-1]}")
    return codes


def tree_bytes(root):
    """Relative path -> file bytes for every file under ``root``."""
    from pathlib import Path

    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


ACCEPTANCE_LINES: dict = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    """Store (and print) the one-line verdict of an acceptance criterion."""
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
