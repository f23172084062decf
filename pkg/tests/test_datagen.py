import numpy as np
import pytest

from brainaudio.config import DataConfig, ExperimentConfig
from brainaudio.datagen import MixingModel, build_dataset, generate_stimulus, simulate_fmri
from brainaudio.errors import ConfigurationError, CorruptionError, IntegrityError, ShapeError
from brainaudio.metrics import svm_probe
from brainaudio.standins import mel_frontend_128, pooled_stats


def test_stimulus_length_and_amplitude():
    w = generate_stimulus(0, 2.0, 7, 4)
    assert w.samples.shape == (32000,)
    assert np.max(np.abs(w.samples)) <= 1.0


def test_stimulus_deterministic():
    a, b = generate_stimulus(0, 2.0, 7, 4), generate_stimulus(0, 2.0, 7, 4)
    assert np.array_equal(a.samples, b.samples)


def test_stimulus_rejects_bad_inputs():
    with pytest.raises(ConfigurationError):
        generate_stimulus(4, 2.0, 0, 4)
    with pytest.raises(ConfigurationError):
        generate_stimulus(0, 3.0, 0, 4)
    with pytest.raises(ConfigurationError):
        generate_stimulus(0, 2.0, 0, None)


def test_classes_linearly_separable_on_pooled_stats():
    clips = [generate_stimulus(i % 4, 2.0, 5000 + i, 4) for i in range(64)]
    feats = pooled_stats(np.stack([mel_frontend_128(c.samples) for c in clips]))
    labels = np.array([c.class_id for c in clips])
    assert svm_probe(feats, labels).accuracy >= 0.95


def _mix(noise=0.0, sem_noise=0.0, n_voxels=50):
    cfg = DataConfig(n_voxels=n_voxels, d_sem=8, d_feat=6, noise_sigma=noise, sem_noise_sigma=sem_noise, row_nnz=4)
    return MixingModel.create(cfg, d_aco=4)


def test_fmri_zero_noise_is_exact_mixing(rng):
    mix = _mix()
    s, f = rng.standard_normal(8), rng.standard_normal(6)
    x = simulate_fmri(s, f, mix, 3)
    assert np.array_equal(x, s @ mix.a_sem.T + f @ mix.a_aco.T)


def test_fmri_deterministic(rng):
    mix = _mix(noise=1.0)
    s, f = rng.standard_normal(8), rng.standard_normal(6)
    assert np.array_equal(simulate_fmri(s, f, mix, 11), simulate_fmri(s, f, mix, 11))


def test_fmri_noise_variance_monte_carlo(rng):
    from scipy.stats import chi2

    mix = _mix(noise=1.0)
    s, f = rng.standard_normal(8), rng.standard_normal(6)
    n = 10_000
    draws = np.stack([simulate_fmri(s, f, mix, [99, i]) for i in range(n)])
    var = draws.var(axis=0, ddof=1)
    # the fixed +-0.03 band is ~2.1 standard errors of one voxel's variance, so
    # it is applied to the voxel average; each voxel gets an exact chi-square
    # 99.9% interval, Bonferroni-corrected over voxels
    assert 0.97 <= var.mean() <= 1.03
    alpha = 1e-3 / len(var)
    lo, hi = chi2.ppf(alpha / 2, n - 1) / (n - 1), chi2.ppf(1 - alpha / 2, n - 1) / (n - 1)
    assert np.all((var >= lo) & (var <= hi))


def test_fmri_shape_mismatch():
    with pytest.raises(ShapeError):
        simulate_fmri(np.zeros(7), np.zeros(6), _mix(), 0)


def test_dataset_shapes_and_balance(bundle):
    cfg = ExperimentConfig().replace(data__n_train=64, data__n_test=16)
    ds = build_dataset(cfg, bundle)
    assert ds.get("fmri", "train").shape == (64, 400)
    assert ds.get("fmri", "test").shape == (16, 400)
    assert np.array_equal(np.bincount(ds.get("labels", "train")), [16] * 4)
    assert ds.get("mel64").shape[1:] == (64, 200)
    assert ds.get("c_gt").shape[1:] == (104, 96)


def test_default_train_split_balance():
    n_train, n_classes = DataConfig().n_train, DataConfig().n_classes
    labels = np.arange(n_train) % n_classes
    assert np.array_equal(np.bincount(labels), [128] * 4)


def test_dataset_deterministic(small_cfg, bundle, small_ds):
    again = build_dataset(small_cfg, bundle)
    assert again.config == small_ds.config
    for k in small_ds.arrays:
        assert np.array_equal(again.arrays[k], small_ds.arrays[k])


def test_dataset_io_round_trip(small_ds, tmp_path):
    from brainaudio.datagen import Dataset

    small_ds.save(tmp_path / "ds")
    back = Dataset.load(tmp_path / "ds")
    assert back.hash == small_ds.hash
    for k in small_ds.arrays:
        assert np.array_equal(back.arrays[k], small_ds.arrays[k])


def test_dataset_io_missing_file(small_ds, tmp_path):
    from brainaudio.datagen import Dataset

    small_ds.save(tmp_path / "ds")
    (tmp_path / "ds" / "fmri.f32").unlink()
    with pytest.raises(IntegrityError, match="fmri.f32"):
        Dataset.load(tmp_path / "ds")


def test_dataset_io_config_hash_tamper(small_ds, tmp_path):
    import json

    from brainaudio.datagen import Dataset

    small_ds.save(tmp_path / "ds")
    mpath = tmp_path / "ds" / "manifest.json"
    manifest = json.loads(mpath.read_text())
    manifest["config"]["data"]["noise_sigma"] = 9.0
    mpath.write_text(json.dumps(manifest))
    with pytest.raises(CorruptionError):
        Dataset.load(tmp_path / "ds")
