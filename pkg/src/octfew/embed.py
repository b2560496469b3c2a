"""Penultimate-layer features and exact 3-D t-SNE for feature-space plots."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import kernels
from .classifier import ImageStore
from .dataset import ClassLabel, DatasetManifest


@dataclass
class FeatureMatrix:
    values: np.ndarray
    labels: list
    ids: list

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature matrix contains non-finite entries")
        if len(self.labels) != len(self.values) or len(self.ids) != len(self.values):
            raise ValueError("labels/ids must have one entry per feature row")


@dataclass
class EmbeddingResult:
    coords: np.ndarray
    perplexity: float
    iterations: int
    seed: int
    kl: float
    kl_history: list = field(default_factory=list)
    affinity_entropy_error: float = 0.0


def extract_features(model, manifest: DatasetManifest, layer: str | None = None,
                     store: ImageStore | None = None, batch_size: int = 64) -> FeatureMatrix:
    """Flattened output of ``layer`` (default: the backbone's penultimate layer) per record."""
    cfg = model.backbone_config
    layer = layer or cfg.penultimate_layer
    try:
        target = model.get_submodule(layer)
    except AttributeError as exc:
        raise ValueError(f"model has no layer named {layer!r}") from exc
    store = store or ImageStore.for_config(cfg)
    captured = []
    handle = target.register_forward_hook(lambda m, i, o: captured.append(torch.flatten(o, 1).double().numpy()))
    records = list(manifest.records)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for start in range(0, len(records), batch_size):
                model(store.batch(records[start:start + batch_size]))
    finally:
        handle.remove()
        model.train(was_training)
    values = np.concatenate(captured) if captured else np.zeros((0, 0))
    return FeatureMatrix(values, [r.label for r in records], [r.id for r in records])


def pairwise_sq_dists(X: np.ndarray) -> np.ndarray:
    sq = np.sum(X * X, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * X @ X.T
    np.fill_diagonal(d2, 0.0)
    return np.maximum(d2, 0.0)


def joint_affinities(X: np.ndarray, perplexity: float):
    """Symmetrised P and the largest per-row |perplexity - target|."""
    cond, _, entropies = kernels.conditional_affinities(pairwise_sq_dists(X), perplexity)
    P = (cond + cond.T) / (2.0 * X.shape[0])
    P = np.maximum(P, 1e-12)
    np.fill_diagonal(P, 0.0)
    return P, float(np.max(np.abs(np.exp(entropies) - perplexity)))


def tsne_3d(features, perplexity: float = 30.0, iterations: int = 1000, seed: int = 0,
            n_components: int = 3, learning_rate: float = 200.0, exaggeration: float = 12.0,
            exaggeration_iters: int = 250, kl_every: int = 50) -> EmbeddingResult:
    """Exact O(N^2) t-SNE with momentum and per-coordinate gains."""
    X = features.values if isinstance(features, FeatureMatrix) else np.asarray(features, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if X.ndim != 2 or X.shape[1] < 1:
        raise ValueError("features must be a 2-D (N, D) array with D >= 1")
    if n < 3 * perplexity:
        raise ValueError(f"perplexity {perplexity} infeasible for N={n}: need N >= 3 * perplexity = {3 * perplexity:g}")
    P, err = joint_affinities(X, perplexity)
    rng = np.random.default_rng(seed)
    Y = rng.normal(0.0, 1e-4, (n, n_components))
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    history = []
    kl = float("nan")
    for it in range(iterations):
        exag = exaggeration if it < exaggeration_iters else 1.0
        momentum = 0.5 if it < exaggeration_iters else 0.8
        grad, kl = kernels.tsne_gradient(Y, P, exag)
        same_sign = np.sign(grad) == np.sign(update)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        update = momentum * update - learning_rate * gains * grad
        Y = Y + update
        Y -= Y.mean(axis=0)
        if (it + 1) % kl_every == 0:
            history.append((it + 1, kernels.tsne_gradient(Y, P, 1.0)[1]))
    kl = kernels.tsne_gradient(Y, P, 1.0)[1]
    return EmbeddingResult(Y, perplexity, iterations, seed, max(kl, 0.0), history, err)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def _colors():
    import matplotlib

    cmap = matplotlib.colormaps["tab10"]
    return {c: cmap(c.index) for c in ClassLabel}


def _scatter(ax, coords, labels, title):
    colors = _colors()
    for c in ClassLabel:
        mask = np.array([ClassLabel.parse(l) is c for l in labels])
        if mask.any():
            ax.scatter(coords[mask, 0], coords[mask, 1], coords[mask, 2], s=6, color=colors[c], label=c.name)
    ax.set_title(title)
    return ax.legend(loc="upper right", fontsize=6, markerscale=2)


def write_csv(embedding: EmbeddingResult, labels: Sequence, ids: Sequence, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "x", "y", "z"])
        for i, l, row in zip(ids, labels, embedding.coords):
            w.writerow([i, ClassLabel.parse(l).name, *(f"{v:.6f}" for v in row[:3])])


def read_csv(path):
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    coords = np.array([[float(r["x"]), float(r["y"]), float(r["z"])] for r in rows])
    return coords, [r["label"] for r in rows], [r["id"] for r in rows]


def export(embedding: EmbeddingResult, labels: Sequence, ids: Sequence, csv_path, plot_path=None,
           title: str = "") -> dict:
    """Write the coordinates CSV and, optionally, a 3-D scatter PNG.  Returns legend info."""
    write_csv(embedding, labels, ids, csv_path)
    info = {"rows": len(ids)}
    if plot_path is not None:
        info["legend_entries"] = plot_panels([(embedding.coords, labels, title)], plot_path)[0]
    return info


def plot_panels(panels, path) -> list[int]:
    """Side-by-side 3-D scatter panels; ``panels`` is a list of (coords, labels, title)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig = plt.figure(figsize=(5 * len(panels), 5))
    counts = []
    for k, (coords, labels, title) in enumerate(panels):
        ax = fig.add_subplot(1, len(panels), k + 1, projection="3d")
        legend = _scatter(ax, np.asarray(coords), labels, title)
        counts.append(len(legend.get_texts()))
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return counts
