import itertools

import numpy as np
import pytest

from brainaudio.errors import ConfigurationError, DataError, ShapeError
from brainaudio.ridge import RidgeModel, fit_ridge, predict_semantic, select_voxels, top_response_voxels


def brute_abs_corr(x, y):
    """All-pairs Pearson |r| via explicit sums, one voxel at a time."""
    out = np.zeros(x.shape[1])
    for v in range(x.shape[1]):
        a, b = x[:, v], y
        am, bm = a.sum() / len(a), b.sum() / len(b)
        cov = sum((ai - am) * (bi - bm) for ai, bi in zip(a, b))
        va = sum((ai - am) ** 2 for ai in a)
        vb = sum((bi - bm) ** 2 for bi in b)
        out[v] = abs(cov / np.sqrt(va * vb))
    return out


def normal_equation_oracle(x, y, lam):
    """Dense inverse of the augmented normal equations, intercept left unpenalized."""
    n, v = x.shape
    xa = np.hstack([x, np.ones((n, 1))])
    pen = lam * np.eye(v + 1)
    pen[-1, -1] = 0.0
    theta = np.linalg.inv(xa.T @ xa + pen) @ xa.T @ y
    return theta[:-1], theta[-1]


def test_selection_self_correlation(rng):
    x = rng.standard_normal((40, 25))
    assert select_voxels(x, x[:, 17], 3)[0] == 17


@pytest.mark.parametrize("alpha,beta", list(itertools.product([0.5, 3.0, 5.0], [0.0, 1.0])))
def test_selection_affine_invariance(rng, alpha, beta):
    x, y = rng.standard_normal((40, 25)), rng.standard_normal(40)
    assert np.array_equal(select_voxels(x, y, 6), select_voxels(x, alpha * y + beta, 6))


def test_selection_matches_brute_force(rng):
    x, y = rng.standard_normal((40, 25)), rng.standard_normal(40)
    oracle = np.argsort(-brute_abs_corr(x, y), kind="stable")[:6]
    assert np.array_equal(select_voxels(x, y, 6), oracle)


def test_ridge_matches_normal_equations(rng):
    x, y = rng.standard_normal((60, 40)), rng.standard_normal((60, 8))
    model = fit_ridge(x, y, 1.0, 6)
    for d in range(8):
        sel = np.argsort(-brute_abs_corr(x, y[:, d]), kind="stable")[:6]
        assert np.array_equal(model.selection[d], sel)
        w, b = normal_equation_oracle(x[:, sel], y[:, d], 1.0)
        assert np.max(np.abs(model.w[sel, d] - w)) < 1e-8
        assert abs(model.b[d] - b) < 1e-8
        # sparsity: nonzeros only on the selection
        assert set(np.flatnonzero(model.w[:, d])) <= set(sel)


def test_ridge_full_selection_matches_oracle(rng):
    x, y = rng.standard_normal((50, 20)), rng.standard_normal((50, 3))
    model = fit_ridge(x, y, 2.5, 20)
    w, b = normal_equation_oracle(x, y, 2.5)
    assert np.max(np.abs(model.w - w)) < 1e-8 and np.max(np.abs(model.b - b)) < 1e-8


def test_ridge_exact_linear_target(rng):
    x = rng.standard_normal((60, 10))
    model = fit_ridge(x, x[:, [3]], 1e-8, 1)
    assert np.max(np.abs(model.predict_raw(x)[:, 0] - x[:, 3])) < 1e-6


def test_ridge_infinite_penalty_limit(rng):
    x, y = rng.standard_normal((60, 10)), rng.standard_normal((60, 2))
    model = fit_ridge(x, y, 1e9, 5)
    assert np.max(np.abs(model.w)) < 1e-6
    assert np.allclose(model.predict_raw(x), y.mean(axis=0), atol=1e-5)


def test_ridge_monotone_shrinkage(rng):
    x, y = rng.standard_normal((60, 10)), rng.standard_normal((60, 3))
    norms = [np.linalg.norm(fit_ridge(x, y, lam, 10).w) for lam in (0.1, 1.0, 10.0, 100.0)]
    assert all(a >= b for a, b in zip(norms, norms[1:]))


def test_ridge_errors(rng):
    x, y = rng.standard_normal((20, 5)), rng.standard_normal((20, 2))
    with pytest.raises(ConfigurationError):
        fit_ridge(x, y, 0.0, 2)
    with pytest.raises(ConfigurationError):
        fit_ridge(x, y, 1.0, 6)
    with pytest.raises(ShapeError):
        fit_ridge(x, y[:10], 1.0, 2)
    bad = x.copy()
    bad[0, 0] = np.nan
    with pytest.raises(DataError):
        fit_ridge(bad, y, 1.0, 2)


def test_predict_affine_at_origin_and_batching(rng):
    x, y = rng.standard_normal((30, 12)), rng.standard_normal((30, 4))
    model = fit_ridge(x, y, 1.0, 5)
    _, raw = predict_semantic(model, np.zeros(12), return_raw=True)
    assert np.array_equal(raw, model.b)
    batch = predict_semantic(model, x)
    assert np.allclose(np.linalg.norm(batch, axis=1), 1.0)
    for i in range(5):
        assert np.array_equal(predict_semantic(model, x[i]), batch[i])
    with pytest.raises(ShapeError):
        predict_semantic(model, np.zeros(11))


def test_zero_noise_semantic_decoding(bundle):
    from brainaudio.datagen import build_dataset
    from conftest import small_config

    cfg = small_config(data__noise_sigma=0.0, data__n_train=512, data__n_test=32)
    ds = build_dataset(cfg, bundle)
    model = fit_ridge(ds.get("fmri", "train"), ds.get("s_gt", "train"), 1e-6, 400)
    _, raw = predict_semantic(model, ds.get("fmri", "test"), return_raw=True)
    truth = ds.get("s_gt", "test")
    pccs = [np.corrcoef(raw[:, d], truth[:, d])[0, 1] for d in range(truth.shape[1])]
    assert min(pccs) >= 0.999


def test_top_response_voxels(rng):
    w = np.zeros((10, 3))
    w[7] = [1.0, -2.0, 0.5]
    model = RidgeModel(w, np.zeros(3), np.tile(np.arange(10), (3, 1)), 1.0, 10, np.zeros(10))
    assert top_response_voxels(model, 1)[0] == 7
    x, y = rng.standard_normal((40, 15)), rng.standard_normal((40, 4))
    m = fit_ridge(x, y, 1.0, 15)
    oracle = sorted(range(15), key=lambda i: -np.sqrt(sum(m.w[i] ** 2)))
    assert list(top_response_voxels(m, 15)) == oracle
    m2 = RidgeModel(2 * m.w, m.b, m.selection, m.lam, m.k, m.voxel_score)
    assert np.array_equal(top_response_voxels(m2, 8), top_response_voxels(m, 8))
    with pytest.raises(ConfigurationError):
        top_response_voxels(m, 16)


def test_array_round_trip(rng):
    x, y = rng.standard_normal((30, 12)), rng.standard_normal((30, 4))
    m = fit_ridge(x, y, 1.0, 5)
    back = RidgeModel.from_arrays(m.to_arrays(), 12, 1.0)
    assert np.array_equal(back.w, m.w) and np.array_equal(back.selection, m.selection)


def test_lambda_sweep_prefers_heavier_penalty_in_noise(rng):
    from brainaudio.ridge import LAMBDA_GRID, lambda_sweep

    x = rng.standard_normal((200, 150))
    y = x[:, :10] @ rng.standard_normal((10, 30)) + rng.standard_normal((200, 30)) * 3.0
    out = lambda_sweep(x, y)
    assert set(out["scores"]) == set(LAMBDA_GRID)
    assert out["best"] == 100.0
    clean = lambda_sweep(x[:, :10], x[:, :10] @ rng.standard_normal((10, 30)))
    assert clean["best"] == 0.1 and clean["scores"][0.1] > 0.999
