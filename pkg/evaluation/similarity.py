"""Cross-model content / style similarity over paired eval sets."""
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from errors import ContractViolation, PairingError, ShapeError
from evaluation.harness import SIMILARITY_MODES, EvalSet, check_pairing

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class SimilarityMatrix:
    models: Tuple[str, ...]
    matrix: np.ndarray
    mode: str = 'content'

    def __post_init__(self):
        matrix = np.asarray(self.matrix, dtype=np.float64)
        object.__setattr__(self, 'matrix', matrix)
        object.__setattr__(self, 'models', tuple(self.models))
        if matrix.shape != (len(self.models), len(self.models)):
            raise ShapeError(f"{len(self.models)} models but a {matrix.shape} matrix")
        if not np.allclose(matrix, matrix.T, atol=SYMMETRY_TOL, rtol=0.0):
            raise ContractViolation("Similarity matrix is not symmetric")
        if self.mode not in SIMILARITY_MODES:
            raise ContractViolation(f"Unknown similarity mode: {self.mode}")

    def value(self, a: str, b: str) -> float:
        return float(self.matrix[self.models.index(a), self.models.index(b)])

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.matrix, columns=list(self.models))
        df.insert(0, 'model', list(self.models))
        return df

    def to_csv(self, path: str) -> str:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        self.to_frame().to_csv(path, index=False)
        return path

    @classmethod
    def from_csv(cls, path: str, mode: str = 'content') -> 'SimilarityMatrix':
        df = pd.read_csv(path)
        models = tuple(str(m) for m in df['model'])
        return cls(models, df[list(models)].to_numpy(dtype=np.float64), mode)


def pairwise_mean_cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Mean over i of cosine(a_i, b_i) for index-paired rows."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"Paired embeddings must share an (n, d) shape, got {a.shape} and {b.shape}")
    na = np.maximum(np.linalg.norm(a, axis=1), 1e-12)
    nb = np.maximum(np.linalg.norm(b, axis=1), 1e-12)
    return float(np.mean(np.sum(a * b, axis=1) / (na * nb)))


def similarity_from_embeddings(embeddings: Dict[str, np.ndarray], mode: str = 'content') -> SimilarityMatrix:
    names = list(embeddings)
    dims = {np.asarray(e).shape for e in embeddings.values()}
    if len(dims) != 1:
        raise ShapeError(f"Embedding shapes differ across models: {sorted(dims)}")
    matrix = np.zeros((len(names), len(names)))
    for i, a in enumerate(names):
        for j in range(i, len(names)):
            matrix[i, j] = matrix[j, i] = pairwise_mean_cosine(embeddings[a], embeddings[names[j]])
    return SimilarityMatrix(tuple(names), matrix, mode)


def _embed_fn(embedder, mode: str):
    method = {'content': 'embed_content', 'style': 'embed_style'}.get(mode)
    if method is None:
        raise ContractViolation(f"Unknown similarity mode: {mode}")
    fn = getattr(embedder, method, None)
    if fn is None:
        raise ContractViolation(f"Embedder does not declare a {mode} embedding channel")
    return fn


def common_indices(eval_sets: Sequence[EvalSet]) -> List[int]:
    failed = set()
    for eval_set in eval_sets:
        failed.update(eval_set.failures)
    return [i for i in range(len(eval_sets[0])) if i not in failed]


def embed_eval_set(eval_set: EvalSet, embedder, mode: str = 'content', indices=None, workers: int = 4) -> np.ndarray:
    embed = _embed_fn(embedder, mode)
    items = [eval_set.items[i] for i in (indices if indices is not None else range(len(eval_set)))]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        vectors = list(tqdm(pool.map(lambda item: np.asarray(embed(item.load_image()), dtype=np.float64), items),
                            total=len(items), desc=f'{mode} {eval_set.model}', leave=False))
    return np.stack(vectors) if vectors else np.zeros((0, 0))


def similarity_matrix(eval_sets: Sequence[EvalSet], embedder, mode: str = 'content', workers: int = 4) -> SimilarityMatrix:
    """Entry (a, b) = mean over paired indices of cosine(emb(a_i), emb(b_i))."""
    check_pairing(eval_sets)
    names = [s.model for s in eval_sets]
    if len(set(names)) != len(names):
        raise PairingError(f"Duplicate model names among eval sets: {names}")
    indices = common_indices(eval_sets)
    if not indices:
        raise PairingError("No index has an image in every eval set")
    if len(indices) < len(eval_sets[0]):
        logger.warning(f"Comparing {len(indices)} of {len(eval_sets[0])} indices; the rest failed in some set")
    embeddings = {s.model: embed_eval_set(s, embedder, mode, indices, workers) for s in eval_sets}
    return similarity_from_embeddings(embeddings, mode)


def plot_similarity_heatmap(matrix: SimilarityMatrix, path: str) -> str:
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt
    import seaborn as sns

    size = max(4.0, 0.8 * len(matrix.models) + 2.0)
    fig, ax = plt.subplots(figsize=(size, size * 0.85))
    sns.heatmap(matrix.to_frame().set_index('model'), annot=True, fmt='.2f', cmap='viridis', vmin=0.0, vmax=1.0,
                square=True, ax=ax)
    ax.set_title(f"{matrix.mode.capitalize()} similarity")
    fig.tight_layout()
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path
