"""Evaluation suite: mel-level PCC/SSIM, embedding-level FD/FAD, paired KL / KL-S, linear probe."""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.signal import convolve2d
from scipy.special import log_expit, log_softmax

from .errors import DegenerateLabelsError, InsufficientDataError, PairingError, ShapeError


class ZeroVarianceWarning(RuntimeWarning):
    pass


def pcc(a, b) -> float:
    """Pearson correlation of two flattened arrays; 0.0 (with a warning) if either is constant."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"pcc: shapes differ {a.shape} vs {b.shape}")
    da, db = a - a.mean(), b - b.mean()
    denom = np.sqrt(np.dot(da, da) * np.dot(db, db))
    if denom == 0.0:
        warnings.warn("pcc of a zero-variance input is defined as 0", ZeroVarianceWarning)
        return 0.0
    return float(np.clip(np.dot(da, db) / denom, -1.0, 1.0))


def _gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - size // 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, win_size: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over all valid 11x11 Gaussian windows; dynamic range from the pair."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shapes differ {a.shape} vs {b.shape}")
    if a.ndim != 2 or min(a.shape) < win_size:
        raise ShapeError(f"ssim needs 2-D inputs with both dims >= {win_size}, got {a.shape}")
    data_range = max(a.max(), b.max()) - min(a.min(), b.min())
    if data_range == 0:
        data_range = 1.0
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    w = _gaussian_window(win_size, sigma)

    def filt(x):
        return convolve2d(x, w, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def _sqrtm_psd(s):
    vals, vecs = np.linalg.eigh(s)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b) -> float:
    mu_a, mu_b = np.atleast_1d(mu_a).astype(np.float64), np.atleast_1d(mu_b).astype(np.float64)
    cov_a, cov_b = np.atleast_2d(cov_a).astype(np.float64), np.atleast_2d(cov_b).astype(np.float64)
    root_a = _sqrtm_psd(cov_a)
    middle = root_a @ cov_b @ root_a
    middle = (middle + middle.T) / 2
    tr_cross = np.sum(np.sqrt(np.clip(np.linalg.eigvalsh(middle), 0.0, None)))
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_cross)
    return max(value, 0.0)


def embedding_moments(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"embeddings must be (n, d), got {x.shape}")
    if len(x) < 2:
        raise InsufficientDataError(f"need at least 2 embeddings, got {len(x)}")
    if len(x) < x.shape[1] + 1:
        warnings.warn(f"{len(x)} samples for {x.shape[1]}-d embeddings: covariance is rank deficient")
    cov = np.cov(x, rowvar=False).reshape(x.shape[1], x.shape[1])
    return x.mean(axis=0), cov + 1e-10 * np.eye(x.shape[1])


def frechet(set_a, set_b) -> float:
    """Frechet distance between Gaussian fits of two embedding sets."""
    return frechet_from_moments(*embedding_moments(set_a), *embedding_moments(set_b))


def kl_softmax(logits_gt, logits_gen):
    logits_gt, logits_gen = np.asarray(logits_gt, np.float64), np.asarray(logits_gen, np.float64)
    lp, lq = log_softmax(logits_gt, axis=-1), log_softmax(logits_gen, axis=-1)
    return np.maximum(np.sum(np.exp(lp) * (lp - lq), axis=-1), 0.0)


def kl_sigmoid(logits_gt, logits_gen):
    logits_gt, logits_gen = np.asarray(logits_gt, np.float64), np.asarray(logits_gen, np.float64)
    lp, lq = log_expit(logits_gt), log_expit(logits_gen)
    lp0, lq0 = log_expit(-logits_gt), log_expit(-logits_gen)
    per_class = np.exp(lp) * (lp - lq) + np.exp(lp0) * (lp0 - lq0)
    return np.maximum(np.sum(per_class, axis=-1), 0.0)


def kl_pair(logits_gt, logits_gen, mode: str = "softmax") -> float:
    """KL(target || generated) over classifier activations."""
    logits_gt, logits_gen = np.asarray(logits_gt), np.asarray(logits_gen)
    if logits_gt.shape != logits_gen.shape:
        raise ShapeError(f"kl_pair: shapes differ {logits_gt.shape} vs {logits_gen.shape}")
    if mode == "softmax":
        return float(kl_softmax(logits_gt, logits_gen))
    if mode == "sigmoid":
        return float(kl_sigmoid(logits_gt, logits_gen))
    raise ValueError(f"mode must be 'softmax' or 'sigmoid', got {mode!r}")


@dataclass
class MetricsReport:
    pcc: float
    ssim: float
    fd: float
    fad: float
    kl: float
    kl_s: float
    n_samples: int
    bundle_hash: str
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_suite(recons, targets, bundle, config: dict | None = None) -> MetricsReport:
    """All six metrics for paired reconstructions / targets (64-band log-mels)."""
    recons = [np.asarray(r, dtype=np.float64) for r in recons]
    targets = [np.asarray(t, dtype=np.float64) for t in targets]
    if len(recons) != len(targets):
        raise PairingError(f"{len(recons)} reconstructions for {len(targets)} targets")
    if len(recons) < 2:
        raise InsufficientDataError("evaluate_suite needs at least 2 pairs")
    pccs = np.array([pcc(r, t) for r, t in zip(recons, targets)])
    ssims = np.array([ssim(r, t) for r, t in zip(recons, targets)])
    rec, tgt = np.stack(recons), np.stack(targets)
    fd_r, fd_t = bundle.embed(rec, "fd"), bundle.embed(tgt, "fd")
    logits_r, logits_t = bundle.classifier_logits(fd_r), bundle.classifier_logits(fd_t)
    return MetricsReport(
        pcc=float(pccs.mean()),
        ssim=float(ssims.mean()),
        fd=frechet(fd_r, fd_t),
        fad=frechet(bundle.embed(rec, "fad"), bundle.embed(tgt, "fad")),
        kl=float(kl_softmax(logits_t, logits_r).mean()),
        kl_s=float(kl_sigmoid(logits_t, logits_r).mean()),
        n_samples=len(recons),
        bundle_hash=bundle.hash,
        config=config or {},
    )


@dataclass
class ProbeResult:
    accuracy: float
    folds: int
    per_fold: list

    def to_dict(self) -> dict:
        return asdict(self)


def svm_probe(features, labels, folds: int = 5, seed: int = 0) -> ProbeResult:
    """Stratified k-fold accuracy of a linear SVM; 3-D features are mean-pooled over axis 1."""
    from sklearn.model_selection import StratifiedKFold
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler
    from sklearn.svm import SVC

    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 3:
        x = x.mean(axis=1)
    y = np.asarray(labels)
    if len(np.unique(y)) < 2:
        raise DegenerateLabelsError("svm_probe needs at least two classes")
    if len(y) < folds:
        raise InsufficientDataError(f"{len(y)} samples for {folds} folds")
    splitter = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    scores = []
    for train, test in splitter.split(x, y):
        clf = make_pipeline(StandardScaler(), SVC(kernel="linear", C=1.0))
        clf.fit(x[train], y[train])
        scores.append(float(np.mean(clf.predict(x[test]) == y[test])))
    return ProbeResult(float(np.mean(scores)), folds, scores)
