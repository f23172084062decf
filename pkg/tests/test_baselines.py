from dataclasses import replace

import numpy as np
import pytest
import torch

from brainaudio.baselines import DIRECT_KINDS, check_shapes, c2f_decoder_mels, fit_direct, run_baseline
from brainaudio.datagen import Dataset
from brainaudio.errors import ConfigurationError, PipelineIntegrityError, ShapeError
from brainaudio.metrics import pcc
from brainaudio.ridge import fit_ridge


def linear_world(rng, n_train=200, n_test=20, v=60, frames=12):
    """Mels that are an exact affine function of the voxels (zero noise)."""
    a = rng.standard_normal((v, 64 * frames)) / np.sqrt(v)
    x = rng.standard_normal((n_train + n_test, v))
    mel = (x @ a + 0.5).reshape(-1, 64, frames)
    split = np.array([0] * n_train + [1] * n_test)
    return Dataset({"name": "linear-world"}, {"fmri": x, "mel64": mel, "split": split})


def test_lir_exact_in_linear_world(rng):
    ds = linear_world(rng)
    model = fit_direct("lir", ds, replace_cfg(lir_lam=1e-6))
    pred = model.predict(ds.get("fmri", "test"))
    assert min(pcc(p, t) for p, t in zip(pred, ds.get("mel64", "test"))) >= 0.999


def replace_cfg(**kw):
    from brainaudio.config import BaselineConfig

    return replace(BaselineConfig(), **kw)


def test_lir_equals_full_ridge(rng):
    ds = linear_world(rng, n_train=40, v=15, frames=4)
    model = fit_direct("lir", ds, replace_cfg(lir_lam=3.0))
    oracle = fit_ridge(ds.get("fmri", "train"), ds.get("mel64", "train").reshape(40, -1), 3.0, 15)
    assert np.array_equal(model.ridge.w, oracle.w) and np.array_equal(model.ridge.b, oracle.b)


@pytest.mark.parametrize("kind", DIRECT_KINDS[1:])
def test_zero_step_fit_is_initialization(small_ds, kind):
    cfg = replace_cfg(steps=0, mlp_hidden=32, lstm_hidden=16)
    a = fit_direct(kind, small_ds, cfg, seed=4)
    b = fit_direct(kind, small_ds, cfg, seed=4)
    x = small_ds.get("fmri", "test")[:3]
    assert np.array_equal(a.predict(x), b.predict(x))
    assert a.history == [a.history[0]] and a.history[0]["step"] == 0


@pytest.mark.parametrize("kind", DIRECT_KINDS[1:])
def test_neural_training_reduces_mse(bundle, kind):
    from brainaudio.config import BaselineConfig, ExperimentConfig
    from brainaudio.datagen import build_dataset

    ds = build_dataset(ExperimentConfig().replace(data__n_train=128, data__n_test=16), bundle)
    model = fit_direct(kind, ds, BaselineConfig(), seed=0)
    assert model.history[-1]["train_mse"] <= 0.7 * model.history[0]["train_mse"]
    pred = model.predict(ds.get("fmri", "test"))
    check_shapes(pred, ds.get("mel64", "test"))


def test_unknown_kind(small_ds):
    with pytest.raises(ConfigurationError):
        fit_direct("svr", small_ds, replace_cfg())


def test_c2f_decoder_shape(small_ds, small_cfg, bundle):
    from brainaudio.acoustic import build_acoustic
    from brainaudio.experiments import fit_semantic

    ridge = fit_semantic(small_ds, small_cfg)
    aco = build_acoustic(small_ds, ridge, small_cfg.acoustic, 64, 0)
    x = small_ds.get("fmri", "test")[:4]
    out = run_baseline("c2f_decoder", x, {"acoustic": aco, "mae_decoder": bundle.decoder()}, 200,
                       s=small_ds.get("s_gt", "test")[:4])
    assert out.shape == (4, 64, 200)
    assert np.array_equal(out, c2f_decoder_mels(aco, bundle.decoder(), small_ds.get("s_gt", "test")[:4], x, 200))


def test_pipeline_baseline_errors(small_ds):
    x = small_ds.get("fmri", "test")[:2]
    with pytest.raises(PipelineIntegrityError):
        run_baseline("fine_ldm", x, {}, 200)
    with pytest.raises(PipelineIntegrityError):
        run_baseline("c2f_decoder", x, {"acoustic": object()}, 200)
    with pytest.raises(ConfigurationError):
        run_baseline("vocoder", x, {}, 200)
    with pytest.raises(ShapeError):
        check_shapes(np.zeros((2, 64, 10)), np.zeros((2, 64, 11)))
