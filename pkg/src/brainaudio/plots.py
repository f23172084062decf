"""Deterministic SVG figures: method bar chart, acoustic PCC bars, probe bars and a t-SNE scatter.

SVG output is made byte-stable by fixing matplotlib's SVG id salt and dropping
the date metadata; every figure gets a JSON sidecar with the plotted numbers.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .archive import write_json_atomic

METRIC_KEYS = ("pcc", "ssim", "fd", "fad", "kl", "kl_s")
SVG_SALT = "brainaudio"


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = SVG_SALT
    plt.rcParams["svg.fonttype"] = "path"
    return plt


def save_svg(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".svg.tmp")
    fig.savefig(tmp, format="svg", metadata={"Date": None})
    tmp.replace(path)
    return path


def method_bars(methods: dict, path: Path) -> Path:
    """One panel per metric, one bar per method."""
    plt = _pyplot()
    names = list(methods)
    fig, axes = plt.subplots(2, 3, figsize=(12, 6))
    for ax, key in zip(axes.ravel(), METRIC_KEYS):
        ax.bar(range(len(names)), [methods[n][key] for n in names], color="tab:blue")
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=45, ha="right", fontsize=7)
        ax.set_title(key)
    fig.tight_layout()
    save_svg(fig, path)
    plt.close(fig)
    write_json_atomic(Path(path).with_suffix(".json"), {"methods": names, "n_bars": len(names),
                                                         "values": {n: {k: methods[n][k] for k in METRIC_KEYS}
                                                                    for n in names}})
    return Path(path)


def simple_bars(values: dict, title: str, path: Path, reference: float | None = None) -> Path:
    plt = _pyplot()
    names = list(values)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(range(len(names)), [values[n] for n in names], color="tab:green")
    if reference is not None:
        ax.axhline(reference, color="k", ls="--", lw=1)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_title(title)
    fig.tight_layout()
    save_svg(fig, path)
    plt.close(fig)
    write_json_atomic(Path(path).with_suffix(".json"), {"title": title, "values": values, "reference": reference})
    return Path(path)


def knn_purity(points: np.ndarray, labels: np.ndarray, k: int = 5) -> float:
    """Leave-one-out share of points whose k nearest neighbours' majority label matches their own."""
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    d = ((points[:, None, :] - points[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d, np.inf)
    nn_idx = np.argsort(d, axis=1, kind="stable")[:, :k]
    hits = 0
    for i, row in enumerate(nn_idx):
        votes = np.bincount(labels[row], minlength=labels.max() + 1)
        hits += int(votes.argmax() == labels[i])
    return hits / len(labels)


def tsne_embed(features: np.ndarray, perplexity: float, seed: int) -> np.ndarray:
    from sklearn.manifold import TSNE

    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 3:
        x = x.mean(axis=1)
    perplexity = min(perplexity, (len(x) - 1) / 3.0)
    return TSNE(n_components=2, perplexity=perplexity, init="pca", random_state=seed).fit_transform(x)


def tsne_scatter(sets: dict, labels: np.ndarray, class_names: list, path: Path, perplexity: float,
                 seed: int) -> Path:
    """Side-by-side t-SNE maps (e.g. ground-truth vs decoded semantic features), coloured by class."""
    plt = _pyplot()
    fig, axes = plt.subplots(1, len(sets), figsize=(5 * len(sets), 4.5), squeeze=False)
    sidecar = {"perplexity": perplexity, "seed": seed, "k": 5, "purity": {}}
    for ax, (name, feats) in zip(axes[0], sets.items()):
        emb = tsne_embed(feats, perplexity, seed)
        sidecar["purity"][name] = knn_purity(emb, labels)
        for k, cname in enumerate(class_names):
            sel = labels == k
            ax.scatter(emb[sel, 0], emb[sel, 1], s=10, label=cname)
        ax.set_title(f"{name} (5-NN purity {sidecar['purity'][name]:.2f})")
        ax.set_xticks([])
        ax.set_yticks([])
    axes[0][0].legend(fontsize=7)
    fig.tight_layout()
    save_svg(fig, path)
    plt.close(fig)
    write_json_atomic(Path(path).with_suffix(".json"), sidecar)
    return Path(path)


def emit_plots(ws, seed: int = 0, perplexity: float = 15.0) -> list:
    """Render every figure whose inputs exist in the workspace reports."""
    from .errors import MissingArtifactError, ReportError
    from .ridge import predict_semantic

    reports = ws.reports_dir
    plots = ws.out / "plots"
    written = []
    compare = reports / "compare.json"
    if not compare.exists():
        raise MissingArtifactError(compare, "compare")
    cmp = json.loads(compare.read_text())
    if not cmp.get("methods"):
        raise ReportError(f"{compare} has no method rows")
    order = cmp.get("method_order", sorted(cmp["methods"]))
    written.append(method_bars({n: cmp["methods"][n] for n in order}, plots / "methods.svg"))
    written.append(simple_bars(cmp["acoustic_pcc"], "acoustic latent PCC (test)", plots / "acoustic_pcc.svg"))
    probe = reports / "probe.json"
    if probe.exists():
        pr = json.loads(probe.read_text())
        written.append(simple_bars({k: v["accuracy"] for k, v in pr["probes"].items()}, "linear SVM probe accuracy",
                                   plots / "probe.svg", reference=pr["chance"]))
    bundle = ws.bundle()
    ds = ws.dataset(bundle)
    ridge = ws.semantic(ds)
    labels = ds.get("labels", "test").astype(np.int64)
    sets = {"s_gt": ds.get("s_gt", "test"), "s_decoded": predict_semantic(ridge, ds.get("fmri", "test"))}
    written.append(tsne_scatter(sets, labels, bundle.labels, plots / "tsne_semantic.svg", perplexity, seed))
    return written
