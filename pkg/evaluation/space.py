"""Possibility space: PCA then t-SNE of eval-set embeddings down to 2D."""
import itertools
import logging
import os
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.decomposition import PCA
from sklearn.manifold import TSNE
from sklearn.metrics import silhouette_score

from errors import ContractViolation
from evaluation.harness import EvalSet
from evaluation.similarity import common_indices, embed_eval_set

logger = logging.getLogger(__name__)

JITTER = 1e-6


@dataclass
class PossibilitySpace:
    coords: np.ndarray
    tags: Tuple[str, ...]
    indices: Tuple[int, ...]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({'model': list(self.tags), 'index': list(self.indices),
                             'x': self.coords[:, 0], 'y': self.coords[:, 1]})

    def to_csv(self, path: str) -> str:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        self.to_frame().to_csv(path, index=False)
        return path

    def silhouette(self) -> float:
        if len(set(self.tags)) < 2:
            raise ContractViolation("Silhouette needs at least two tags")
        return float(silhouette_score(self.coords, np.asarray(self.tags)))


def pca_stage(points: np.ndarray, n_components: Optional[int] = 50, seed: int = 0) -> Tuple[np.ndarray, PCA]:
    """PCA to min(n_components, rank); components are returned in the fitted PCA."""
    points = np.asarray(points, dtype=np.float64)
    rank = int(np.linalg.matrix_rank(points - points.mean(axis=0)))
    cap = min(points.shape[0], points.shape[1])
    dim = max(min(2, cap), min(n_components or cap, rank, cap))
    pca = PCA(n_components=dim, random_state=seed)
    return pca.fit_transform(points), pca


def project_embeddings(points: np.ndarray, pca_dim: int = 50, perplexity: float = 30.0, seed: int = 0) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n < 3:
        raise ContractViolation(f"Need at least 3 points for a 2D embedding, got {n}")
    if len(np.unique(points, axis=0)) < n:
        points = points + JITTER * np.random.default_rng(seed).standard_normal(points.shape)
    reduced, _ = pca_stage(points, pca_dim, seed)
    perplexity = float(min(perplexity, max(1.0, (n - 1) / 3.0)))
    tsne = TSNE(n_components=2, perplexity=perplexity, init='pca', random_state=seed)
    return tsne.fit_transform(reduced)


def possibility_space(eval_sets: Sequence[EvalSet], embedder, mode: str = 'content', pca_dim: int = 50,
                      perplexity: float = 30.0, seed: int = 0, workers: int = 4) -> PossibilitySpace:
    if len(eval_sets) < 2:
        raise ContractViolation("The possibility space compares at least two eval sets")
    indices = common_indices(eval_sets)
    blocks, tags, idx = [], [], []
    for eval_set in eval_sets:
        blocks.append(embed_eval_set(eval_set, embedder, mode, indices, workers))
        tags.extend([eval_set.model] * len(indices))
        idx.extend(indices)
    return space_from_embeddings(np.concatenate(blocks), tags, idx, pca_dim, perplexity, seed)


def space_from_embeddings(points: np.ndarray, tags: Sequence[str], indices: Optional[Sequence[int]] = None,
                          pca_dim: int = 50, perplexity: float = 30.0, seed: int = 0) -> PossibilitySpace:
    coords = project_embeddings(points, pca_dim, perplexity, seed)
    indices = tuple(indices) if indices is not None else tuple(range(len(tags)))
    return PossibilitySpace(coords, tuple(tags), indices)


def pairwise_spaces(eval_sets: Sequence[EvalSet], embedder, **kwargs) -> Dict[Tuple[str, str], PossibilitySpace]:
    """One joint projection per pair of models."""
    return {(a.model, b.model): possibility_space([a, b], embedder, **kwargs)
            for a, b in itertools.combinations(eval_sets, 2)}


def plot_possibility_space(space: PossibilitySpace, path: str, title: str = 'Possibility space') -> str:
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt
    import seaborn as sns

    fig, ax = plt.subplots(figsize=(6, 6))
    sns.scatterplot(data=space.to_frame(), x='x', y='y', hue='model', s=18, alpha=0.8, ax=ax)
    ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path
