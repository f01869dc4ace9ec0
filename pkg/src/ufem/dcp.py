"""Deep-channel-prior statistics: sparsity, channel correlations, embeddings."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from sklearn.manifold import TSNE
from sklearn.metrics import silhouette_score

from .backbone import BackboneHandle, FeatureMap, extract_features
from .data import as_images


def _data(feature) -> torch.Tensor:
    return feature.data if isinstance(feature, FeatureMap) else torch.as_tensor(feature)


def channel_sparsity(feature) -> torch.Tensor:
    """Fraction of exactly-zero responses per channel.

    (C,H,W) -> (C,); (B,C,H,W) -> (B,C).
    """
    x = _data(feature)
    return (x == 0).to(torch.float64).mean(dim=(-2, -1))


def gram_matrix(feature, normalization: str = "raw") -> torch.Tensor:
    """Channel correlation matrix F F^T with F the (C, H*W) flattened feature.

    Works on (C,H,W) or batched (B,C,H,W) input. ``per_pixel`` divides by
    H*W, ``per_element`` by C*H*W.
    """
    x = _data(feature)
    c, h, w = x.shape[-3:]
    f = x.reshape(*x.shape[:-3], c, h * w)
    g = f @ f.transpose(-1, -2)
    if normalization == "raw":
        return g
    if normalization == "per_pixel":
        return g / (h * w)
    if normalization == "per_element":
        return g / (c * h * w)
    raise ValueError(f"unknown normalization {normalization!r}")


def upper_triangle(g: torch.Tensor, include_diagonal: bool = False) -> torch.Tensor:
    """Row-major upper triangle of the trailing (C, C) matrix."""
    n = g.shape[-1]
    i, j = torch.triu_indices(n, n, offset=0 if include_diagonal else 1)
    return g[..., i, j]


def correlation_vectors(feature, normalization: str = "per_pixel",
                        include_diagonal: bool = False) -> torch.Tensor:
    return upper_triangle(gram_matrix(feature, normalization), include_diagonal)


def embed_2d(vectors, seed: int = 0, perplexity: float = 30.0, max_iter: int = 1000) -> np.ndarray:
    """Deterministic t-SNE embedding to (n, 2)."""
    x = np.asarray(torch.as_tensor(vectors).detach().cpu().numpy() if isinstance(vectors, torch.Tensor)
                   else vectors, dtype=np.float64)
    x = x.reshape(len(x), -1)
    if len(x) < 10:
        raise ValueError(f"need at least 10 vectors to embed, got {len(x)}")
    perp = min(perplexity, (len(x) - 1) / 3.0)
    tsne = TSNE(n_components=2, perplexity=perp, init="pca", random_state=seed,
                max_iter=max_iter, method="exact" if len(x) < 200 else "barnes_hut")
    return tsne.fit_transform(x)


def separability_score(vectors, labels) -> float:
    """Mean silhouette coefficient under Euclidean distance."""
    x = np.asarray(vectors, dtype=np.float64).reshape(len(vectors), -1)
    y = np.asarray(labels)
    uniq, counts = np.unique(y, return_counts=True)
    if len(uniq) < 2:
        raise ValueError("separability needs at least two labels")
    if counts.min() < 2:
        raise ValueError("separability needs at least two points per label")
    if len(uniq) >= len(x):
        raise ValueError("degenerate labelling: one label per point")
    return float(silhouette_score(x, y, metric="euclidean"))


@dataclass
class DCPReport:
    tap: str
    set_names: list[str]
    mean_sparsity: dict[str, float]
    channel_sparsity: dict[str, list[float]]
    separability: dict[str, float]
    embedding_separability: dict[str, float]
    embeddings: dict[str, list[list[float]]] = field(repr=False)
    labels: list[int] = field(repr=False)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n", encoding="utf-8")
        return path


@torch.no_grad()
def dcp_report(handle: BackboneHandle, tap, image_sets: Mapping[str, object], seed: int = 0,
               include_diagonal: bool = False, embed: bool = True, batch: int = 100) -> DCPReport:
    """Sparsity and cluster separability of raw vs correlation representations.

    ``image_sets`` maps a set name to a manifest or (N,3,H,W) tensor.
    Separability is scored on the representations themselves; when ``embed``
    is set the 2-D t-SNE embeddings are produced and scored too.
    """
    if len(image_sets) < 2:
        raise ValueError("dcp_report needs at least two image sets")
    t = handle.tap(tap)
    raw, corr, labels = [], [], []
    mean_sp, ch_sp = {}, {}
    for k, (name, source) in enumerate(image_sets.items()):
        images = as_images(source)
        feats = torch.cat([extract_features(handle, images[i:i + batch], t).data
                           for i in range(0, len(images), batch)])
        sp = channel_sparsity(feats)
        mean_sp[name] = float(sp.mean())
        ch_sp[name] = sp.mean(dim=0).tolist()
        raw.append(feats.reshape(len(feats), -1).double())
        corr.append(correlation_vectors(feats.double(), "per_pixel", include_diagonal))
        labels += [k] * len(feats)
    reps = {"raw_features": torch.cat(raw).numpy(), "correlation_vectors": torch.cat(corr).numpy()}
    sep = {k: separability_score(v, labels) for k, v in reps.items()}
    emb, emb_sep = {}, {}
    if embed:
        for k, v in reps.items():
            e = embed_2d(v, seed)
            emb[k] = e.tolist()
            emb_sep[k] = separability_score(e, labels)
    return DCPReport(t.name, list(image_sets), mean_sp, ch_sp, sep, emb_sep, emb, labels)


def plot_embedding(report: DCPReport, path, representation: str = "correlation_vectors") -> Path:
    """Scatter of the stored 2-D embedding, one colour per image set."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if representation not in report.embeddings:
        raise ValueError(f"report has no {representation!r} embedding (was embed disabled?)")
    pts = np.asarray(report.embeddings[representation])
    labels = np.asarray(report.labels)
    fig, ax = plt.subplots(figsize=(4, 4))
    for k, name in enumerate(report.set_names):
        sel = labels == k
        ax.scatter(pts[sel, 0], pts[sel, 1], s=8, label=name)
    ax.set_title(f"{representation} @ {report.tap}")
    ax.legend(markerscale=2)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path
