"""Semantic decoder: per-dimension ridge regression on correlation-selected voxels."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DataError, InsufficientDataError, ShapeError


def _abs_correlations(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """|Pearson r| between each column of ``x`` (n, V) and each column of ``y`` (n, D) -> (V, D)."""
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    xn = np.sqrt(np.sum(xc**2, axis=0))
    yn = np.sqrt(np.sum(yc**2, axis=0))
    num = xc.T @ yc
    with np.errstate(invalid="ignore", divide="ignore"):
        r = num / np.outer(xn, yn)
    r[~np.isfinite(r)] = 0.0
    r[xn == 0, :] = 0.0
    return np.abs(r)


def _top_k(scores: np.ndarray, k: int) -> np.ndarray:
    # stable sort on -score keeps lower indices first among ties
    return np.argsort(-scores, kind="stable")[:k]


def select_voxels(x, y_col, k: int) -> np.ndarray:
    """Indices of the ``k`` voxels with the largest |correlation| to ``y_col``."""
    x = np.asarray(x, dtype=np.float64)
    y_col = np.asarray(y_col, dtype=np.float64).reshape(-1, 1)
    if k > x.shape[1]:
        raise ConfigurationError(f"k={k} exceeds the number of voxels {x.shape[1]}")
    if len(x) < 3:
        raise InsufficientDataError("voxel selection needs at least 3 samples")
    return _top_k(_abs_correlations(x, y_col)[:, 0], k)


@dataclass
class RidgeModel:
    w: np.ndarray  # (V, D), zero outside each column's selection
    b: np.ndarray  # (D,)
    selection: np.ndarray  # (D, k) int
    lam: float
    k: int
    voxel_score: np.ndarray  # (V,) max |r| over target dimensions

    def predict_raw(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.w.shape[0]:
            raise ShapeError(f"expected {self.w.shape[0]} voxels, got {x.shape[-1]}")
        # one row at a time so a sample's prediction does not depend on its batch
        rows = x.reshape(-1, x.shape[-1])
        out = np.stack([row[None] @ self.w for row in rows])[:, 0] + self.b
        return out.reshape(*x.shape[:-1], self.w.shape[1])

    def to_arrays(self) -> dict:
        d = self.w.shape[1]
        values = np.stack([self.w[self.selection[j], j] for j in range(d)])
        return {"b": self.b, "selection": self.selection, "values": values, "voxel_score": self.voxel_score}

    @classmethod
    def from_arrays(cls, arrays: dict, n_voxels: int, lam: float) -> "RidgeModel":
        sel = arrays["selection"].astype(np.int64)
        values = arrays["values"].astype(np.float64)
        w = np.zeros((n_voxels, sel.shape[0]))
        for j in range(sel.shape[0]):
            w[sel[j], j] = values[j]
        return cls(w, arrays["b"].astype(np.float64), sel, lam, sel.shape[1], arrays["voxel_score"].astype(np.float64))


def _solve_centered(xs: np.ndarray, y: np.ndarray, lam: float):
    mx, my = xs.mean(axis=0), y.mean(axis=0)
    xc, yc = xs - mx, y - my
    gram = xc.T @ xc + lam * np.eye(xs.shape[1])
    coef = np.linalg.solve(gram, xc.T @ yc)
    return coef, my - mx @ coef


def fit_ridge(x, y, lam: float = 1.0, k: int | None = None) -> RidgeModel:
    """Centered ridge fit of each target column on its own top-``k`` correlated voxels.

    With ``k == V`` every column shares one solve over all voxels.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    n, v = x.shape
    k = v if k is None else k
    if lam <= 0:
        raise ConfigurationError(f"ridge penalty must be > 0, got {lam}")
    if k > v or k < 1:
        raise ConfigurationError(f"k={k} must lie in [1, {v}]")
    if len(y) != n:
        raise ShapeError(f"{n} fMRI samples but {len(y)} targets")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise DataError("non-finite values in ridge inputs")
    if n < 3:
        raise InsufficientDataError("ridge fit needs at least 3 samples")
    if n <= k:
        warnings.warn(f"fitting {k} selected voxels with only {n} samples")
    d = y.shape[1]
    r = _abs_correlations(x, y)
    w = np.zeros((v, d))
    b = np.zeros(d)
    if k == v:
        sel = np.tile(np.arange(v), (d, 1))
        w, b = _solve_centered(x, y, lam)
    else:
        sel = np.stack([_top_k(r[:, j], k) for j in range(d)])
        for j in range(d):
            coef, b[j] = _solve_centered(x[:, sel[j]], y[:, j], lam)
            w[sel[j], j] = coef
    return RidgeModel(w, b, sel, float(lam), int(k), r.max(axis=1))


LAMBDA_GRID = (0.1, 1.0, 10.0, 100.0)


def lambda_sweep(x, y, lams=LAMBDA_GRID, k: int | None = None, holdout_every: int = 5) -> dict:
    """Held-out mean per-sample PCC for each penalty; every ``holdout_every``-th row is held out.

    Returns ``{"scores": {lam: pcc}, "best": lam}`` (ties go to the smaller penalty).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(len(x), -1)
    held = np.arange(len(x)) % holdout_every == holdout_every - 1
    scores = {}
    for lam in lams:
        pred = fit_ridge(x[~held], y[~held], lam, k).predict_raw(x[held])
        pc = pred - pred.mean(1, keepdims=True)
        tc = y[held] - y[held].mean(1, keepdims=True)
        denom = np.sqrt((pc ** 2).sum(1) * (tc ** 2).sum(1))
        scores[float(lam)] = float(np.mean((pc * tc).sum(1) / np.where(denom == 0, 1.0, denom)))
    best = max(scores, key=lambda lam: (scores[lam], -lam))
    return {"scores": scores, "best": best}


def predict_semantic(model: RidgeModel, x, return_raw: bool = False):
    """s = xW + b, L2-normalized; ``return_raw`` also returns the unnormalized vector."""
    raw = model.predict_raw(x)
    norm = np.linalg.norm(raw, axis=-1, keepdims=True)
    s = raw / np.where(norm == 0, 1.0, norm)
    return (s, raw) if return_raw else s


def top_response_voxels(model: RidgeModel, n: int) -> np.ndarray:
    """Voxels ranked by the L2 norm of their row of W; zero rows fall back to correlation rank."""
    v = model.w.shape[0]
    if n > v:
        raise ConfigurationError(f"requested {n} voxels but only {v} exist")
    norms = np.linalg.norm(model.w, axis=1)
    ranked = _top_k(norms, v)
    active = ranked[norms[ranked] > 0]
    if len(active) >= n:
        return active[:n]
    rest = np.setdiff1d(np.arange(v), active)
    rest = rest[np.argsort(-model.voxel_score[rest], kind="stable")]
    return np.concatenate([active, rest])[:n]
