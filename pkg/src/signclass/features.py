"""Penultimate-layer embeddings, 2D projection for cluster inspection, and
nearest-neighbor queries over sign variants."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .corpus import CorpusManifest
from .dataset import load_crops


class FeatureError(Exception):
    pass


@dataclass
class EmbeddingSet:
    matrix: np.ndarray  # N x feature_dim, float32
    ids: tuple[str, ...]
    classes: tuple[str, ...]
    proveniences: tuple[str, ...]
    visualization: str

    def __post_init__(self) -> None:
        n = self.matrix.shape[0]
        if not (len(self.ids) == len(self.classes) == len(self.proveniences) == n):
            raise FeatureError("metadata length does not match embedding rows")
        if not np.isfinite(self.matrix).all():
            raise FeatureError("embedding matrix contains non-finite values")

    def row_of(self, annotation_id: str) -> int:
        try:
            return self._index[annotation_id]
        except AttributeError:
            self._index = {i: r for r, i in enumerate(self.ids)}
            return self._index[annotation_id]


@dataclass
class Projection2D:
    coords: np.ndarray  # N x 2
    method: str
    perplexity: float
    seed: int
    ids: tuple[str, ...]
    classes: tuple[str, ...]
    proveniences: tuple[str, ...]


def embed_dataset(
    model,
    manifest: CorpusManifest,
    ids: Sequence[str],
    visualization: str,
    batch_size: int = 64,
) -> EmbeddingSet:
    """One penultimate-layer feature row per annotation, eval-mode prepared."""
    ids = list(ids)
    if not ids:
        raise FeatureError("empty view: nothing to embed")
    crops = load_crops(manifest, ids, visualization)
    rows = []
    for start in range(0, len(crops), batch_size):
        chunk = crops[start : start + batch_size]
        inputs = torch.stack([model.prepare(c.pixels) for c in chunk])
        rows.append(model.extract_features(inputs))
    matrix = np.concatenate(rows, axis=0).astype(np.float32)
    return EmbeddingSet(
        matrix=matrix,
        ids=tuple(c.annotation_id for c in crops),
        classes=tuple(c.sign_class for c in crops),
        proveniences=tuple(c.provenience for c in crops),
        visualization=visualization,
    )


def project_2d(embeddings: EmbeddingSet, perplexity: float = 30.0, seed: int = 0) -> Projection2D:
    """Seeded TSNE projection to 2D, keeping row correspondence.

    Requires N > 3 * perplexity (the usual stability floor); interpret the
    layout with care, as even randomly distributed data can appear clustered.
    """
    from sklearn.manifold import TSNE

    n = embeddings.matrix.shape[0]
    if n <= 3 * perplexity:
        raise FeatureError(
            f"{n} points is too few for perplexity {perplexity}; need N > 3 * perplexity"
        )
    tsne = TSNE(n_components=2, perplexity=perplexity, random_state=seed, init="pca")
    coords = tsne.fit_transform(embeddings.matrix.astype(np.float64))
    return Projection2D(
        coords=np.asarray(coords, dtype=np.float64),
        method="tsne",
        perplexity=perplexity,
        seed=seed,
        ids=embeddings.ids,
        classes=embeddings.classes,
        proveniences=embeddings.proveniences,
    )


def nearest_neighbors(embeddings: EmbeddingSet, query_id: str, k: int) -> list[str]:
    """The k most cosine-similar rows to the query, best first.

    The query itself is excluded; equal similarities are ordered by ascending
    annotation id.
    """
    n = embeddings.matrix.shape[0]
    if k >= n:
        raise FeatureError(f"k={k} must be below the number of rows ({n})")
    row = embeddings.row_of(query_id)
    matrix = embeddings.matrix.astype(np.float64)
    norms = np.linalg.norm(matrix, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = matrix / safe[:, None]
    sims = unit @ unit[row]
    sims[norms == 0] = 0.0
    if norms[row] == 0:
        sims[:] = 0.0
    candidates = [(float(-sims[i]), embeddings.ids[i]) for i in range(n) if i != row]
    candidates.sort()
    return [ann_id for _, ann_id in candidates[:k]]


def save_embeddings_csv(embeddings: EmbeddingSet, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dim = embeddings.matrix.shape[1]
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "class", "provenience", "viz"] + [f"f{i}" for i in range(dim)])
        for r in range(embeddings.matrix.shape[0]):
            writer.writerow(
                [embeddings.ids[r], embeddings.classes[r], embeddings.proveniences[r], embeddings.visualization]
                + [repr(float(v)) for v in embeddings.matrix[r]]
            )


def save_projection_csv(projection: Projection2D, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "class", "provenience", "x", "y"])
        for r in range(projection.coords.shape[0]):
            writer.writerow(
                [
                    projection.ids[r],
                    projection.classes[r],
                    projection.proveniences[r],
                    repr(float(projection.coords[r, 0])),
                    repr(float(projection.coords[r, 1])),
                ]
            )
