"""Dataset ingestion, caption-driven Mediums subset, k-means over embeddings."""
import hashlib
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import spacy
import torch
from PIL import Image
from sklearn.cluster import kmeans_plusplus
from sklearn.metrics.pairwise import euclidean_distances
from tqdm import tqdm

from config import cache_dir
from errors import ConfigError, ContractViolation, DatasetError
from run_storage import append_jsonl, read_jsonl
from style_classifiers import ClusterModel
from utils.style_labels import EXPECTED_SIZES, get_default_style_labels

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = ('.png', '.jpg', '.jpeg', '.bmp', '.webp')
DEFAULT_KEYWORDS = ('painting', 'drawing', 'art')
DATASET_NAMES = ('full', 'mediums', 'toy')


@dataclass
class DataConfig:
    root: str = ''
    name: str = ''
    keywords: Tuple[str, ...] = DEFAULT_KEYWORDS
    top_n: int = 10
    k: int = 0  # 0: one cluster per class of the label set
    kmeans_seed: int = 0
    max_iter: int = 300
    tol: float = 1e-4
    cluster_source: str = 'image'
    label_set: str = 'full'
    workers: int = 4
    caption_retries: int = 2

    def __post_init__(self):
        if self.name and self.name not in DATASET_NAMES:
            raise ConfigError(f"data.name must be one of {DATASET_NAMES}, got {self.name!r}")
        if self.cluster_source not in ('image', 'text'):
            raise ConfigError("data.cluster_source must be 'image' or 'text'")
        if self.top_n < 1 or self.k == 1 or self.k < 0 or self.workers < 1 or self.caption_retries < 0:
            raise ConfigError("data.top_n >= 1, data.k = 0 or >= 2, data.workers >= 1, data.caption_retries >= 0")


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass(frozen=True)
class ImageRecord:
    path: str
    label: str
    caption: Optional[str] = None

    def file_hash(self) -> str:
        return file_sha256(self.path)


@dataclass
class LabeledImageSet:
    records: List[ImageRecord]
    label_set: Tuple[str, ...]
    name: str = 'toy'

    def __post_init__(self):
        self.label_set = tuple(self.label_set)
        if self.name not in DATASET_NAMES:
            raise DatasetError(f"Unknown dataset name: {self.name}")
        if len(set(self.label_set)) != len(self.label_set):
            raise DatasetError("label_set must be unique")
        expected = EXPECTED_SIZES.get(self.name)
        if expected is not None and len(self.label_set) != expected:
            raise DatasetError(f"The {self.name} dataset needs {expected} labels, found {len(self.label_set)}")
        known = set(self.label_set)
        stray = sorted({r.label for r in self.records} - known)
        if stray:
            raise DatasetError(f"Records carry labels outside the label set: {', '.join(stray)}")

    def __len__(self) -> int:
        return len(self.records)

    def label_index(self, label: str) -> int:
        return self.label_set.index(label)

    def label_indices(self) -> np.ndarray:
        lookup = {label: i for i, label in enumerate(self.label_set)}
        return np.array([lookup[r.label] for r in self.records], dtype=np.int64)

    def counts(self) -> Dict[str, int]:
        counts = {label: 0 for label in self.label_set}
        for r in self.records:
            counts[r.label] += 1
        return counts

    def subset(self, labels: Sequence[str], name: str) -> 'LabeledImageSet':
        keep = set(labels)
        return LabeledImageSet([r for r in self.records if r.label in keep], tuple(sorted(keep)), name)


def _infer_name(n_labels: int) -> str:
    for name, size in EXPECTED_SIZES.items():
        if size == n_labels:
            return name
    return 'toy'


def read_image(path: str) -> Image.Image:
    with Image.open(path) as image:
        image.load()
        return image.convert('RGB')


def load_dataset(root_dir: str, name: Optional[str] = None) -> LabeledImageSet:
    """Enumerate root/<label>/<image> in sorted order. Unreadable files are skipped and counted."""
    if not root_dir or not os.path.isdir(root_dir):
        logger.error(f"Dataset directory not found: {root_dir}")
        raise DatasetError(f"Dataset directory not found: {root_dir}")

    registry = get_default_style_labels()
    label_dirs = sorted(d for d in os.listdir(root_dir) if os.path.isdir(os.path.join(root_dir, d)))
    records: List[ImageRecord] = []
    labels = set()
    skipped = 0
    for directory in label_dirs:
        label = registry.canonicalize(directory) or directory
        for filename in sorted(os.listdir(os.path.join(root_dir, directory))):
            path = os.path.join(root_dir, directory, filename)
            if not filename.lower().endswith(IMAGE_EXTENSIONS) or not os.path.isfile(path):
                continue
            try:
                with Image.open(path) as image:
                    image.verify()
            except Exception as e:
                skipped += 1
                logger.warning(f"Skip unreadable image {path}: {e}")
                continue
            records.append(ImageRecord(path=path, label=label))
            labels.add(label)

    if skipped:
        logger.warning(f"Skipped {skipped} unreadable images under {root_dir}")
    if not records:
        raise DatasetError(f"No readable images under {root_dir}")

    label_set = tuple(sorted(labels))
    dataset = LabeledImageSet(records, label_set, name or _infer_name(len(label_set)))
    logger.info(f"Loaded {len(records)} images in {len(label_set)} classes from {root_dir}")
    return dataset


_nlp = None


def _tokenizer():
    global _nlp
    if _nlp is None:
        _nlp = spacy.blank('en')
    return _nlp


def caption_tokens(caption: str) -> List[str]:
    return [token.lower_ for token in _tokenizer()(caption or '') if not (token.is_punct or token.is_space)]


def caption_matches(caption: str, keywords: Sequence[str] = DEFAULT_KEYWORDS) -> bool:
    """True when some token starts with some keyword ("paintings" matches "painting")."""
    keywords = [k.lower() for k in keywords]
    return any(token.startswith(k) for token in caption_tokens(caption) for k in keywords)


class CaptionCache:
    """JSON-lines sidecar {"hash", "caption"} keyed by the sha256 of the image bytes."""

    def __init__(self, path: Optional[str] = None):
        self.path = path or os.path.join(cache_dir(), 'captions.jsonl')
        self._lock = threading.Lock()
        self._captions: Dict[str, str] = {row['hash']: row['caption'] for row in read_jsonl(self.path)}

    def __len__(self) -> int:
        return len(self._captions)

    def __contains__(self, digest: str) -> bool:
        return digest in self._captions

    def get(self, digest: str) -> Optional[str]:
        return self._captions.get(digest)

    def put(self, digest: str, caption: str):
        with self._lock:
            if self._captions.get(digest) == caption:
                return
            self._captions[digest] = caption
            append_jsonl(self.path, [{'hash': digest, 'caption': caption}])


def _caption_with_retry(captioner, path: str, retries: int) -> str:
    last_error = None
    for attempt in range(retries + 1):
        try:
            return captioner.caption(read_image(path))
        except Exception as e:
            last_error = e
            logger.warning(f"Caption attempt {attempt + 1}/{retries + 1} failed for {path}: {e}")
    logger.error(f"Captioning failed for {path} after {retries + 1} attempts")
    raise last_error


def caption_dataset(dataset: LabeledImageSet, captioner, cache: Optional[CaptionCache] = None,
                    workers: int = 4, retries: int = 2) -> List[str]:
    """Captions in record order; cache hits skip the captioner."""
    hashes = [r.file_hash() for r in dataset.records]
    captions: List[Optional[str]] = [cache.get(h) if cache is not None else None for h in hashes]
    pending = [i for i, c in enumerate(captions) if c is None]
    if pending:
        logger.info(f"Captioning {len(pending)} images ({len(hashes) - len(pending)} cached)")
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {pool.submit(_caption_with_retry, captioner, dataset.records[i].path, retries): i for i in pending}
        for future in tqdm(as_completed(futures), total=len(futures), desc='Captioning', leave=False):
            i = futures[future]
            captions[i] = future.result()
            if cache is not None:
                cache.put(hashes[i], captions[i])
    return captions


@dataclass(frozen=True)
class SubsetClassRow:
    label: str
    quantity: int
    match_percent: float


@dataclass
class SubsetReport:
    rows: List[SubsetClassRow]
    selected: Tuple[str, ...]
    keywords: Tuple[str, ...] = DEFAULT_KEYWORDS

    def __post_init__(self):
        for row in self.rows:
            if not 0.0 <= row.match_percent <= 100.0:
                raise ContractViolation(f"Match percentage out of range for {row.label}: {row.match_percent}")
            if row.quantity < 0:
                raise ContractViolation(f"Negative quantity for {row.label}")

    def row(self, label: str) -> SubsetClassRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    def to_frame(self) -> pd.DataFrame:
        selected = set(self.selected)
        return pd.DataFrame([{
            'style': r.label,
            'quantity': r.quantity,
            'percent': round(r.match_percent, 2),
            'selected': r.label in selected,
        } for r in self.rows], columns=['style', 'quantity', 'percent', 'selected'])

    def to_csv(self, path: str) -> str:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        self.to_frame().to_csv(path, index=False)
        return path

    @classmethod
    def from_csv(cls, path: str, keywords: Sequence[str] = DEFAULT_KEYWORDS) -> 'SubsetReport':
        df = pd.read_csv(path)
        rows = [SubsetClassRow(str(r['style']), int(r['quantity']), float(r['percent'])) for _, r in df.iterrows()]
        selected = tuple(str(s) for s in df.loc[df['selected'].astype(bool), 'style'])
        return cls(rows, selected, tuple(keywords))


REFERENCE_MEDIUMS_REPORT = SubsetReport(
    rows=[
        SubsetClassRow('expressionism', 6054, 91.56),
        SubsetClassRow('post-impressionism', 5832, 89.25),
        SubsetClassRow('fauvism', 841, 96.08),
        SubsetClassRow('abstract-expressionism', 2518, 89.95),
        SubsetClassRow('na-ve-art-primitivism', 2148, 93.39),
        SubsetClassRow('cubism', 2027, 91.61),
        SubsetClassRow('synthetic-cubism', 197, 89.85),
        SubsetClassRow('analytical-cubism', 105, 91.43),
        SubsetClassRow('new-realism', 280, 96.07),
        SubsetClassRow('action-painting', 93, 93.55),
    ],
    selected=('expressionism', 'post-impressionism', 'fauvism', 'abstract-expressionism', 'na-ve-art-primitivism',
              'cubism', 'synthetic-cubism', 'analytical-cubism', 'new-realism', 'action-painting'),
)


def build_mediums_subset(dataset: LabeledImageSet, captioner, keywords: Sequence[str] = DEFAULT_KEYWORDS,
                         top_n: int = 10, cache: Optional[CaptionCache] = None, workers: int = 4,
                         retries: int = 2) -> Tuple[LabeledImageSet, SubsetReport]:
    """Keep the top_n classes whose captions most often mention a keyword."""
    if top_n < 1:
        raise ContractViolation("top_n must be >= 1")
    if top_n > len(dataset.label_set):
        raise ContractViolation(f"top_n={top_n} exceeds the {len(dataset.label_set)} available classes")
    start = time.time()
    captions = caption_dataset(dataset, captioner, cache, workers, retries)

    totals = dataset.counts()
    hits = {label: 0 for label in dataset.label_set}
    for record, caption in zip(dataset.records, captions):
        if caption_matches(caption, keywords):
            hits[record.label] += 1
    rows = [SubsetClassRow(label, totals[label], 100.0 * hits[label] / totals[label] if totals[label] else 0.0)
            for label in dataset.label_set]
    rows.sort(key=lambda r: (-r.match_percent, r.label))
    selected = tuple(r.label for r in rows[:top_n])

    captioned = LabeledImageSet([replace(r, caption=c) for r, c in zip(dataset.records, captions)],
                                dataset.label_set, dataset.name)
    name = 'mediums' if len(selected) == EXPECTED_SIZES['mediums'] else 'toy'
    subset = captioned.subset(selected, name)
    logger.info(f"Selected {len(selected)} classes ({len(subset)} images) in {time.time() - start:.2f} seconds")
    return subset, SubsetReport(rows, selected, tuple(keywords))


@dataclass
class KMeansFit:
    centers: np.ndarray
    assignment: np.ndarray
    inertia: float
    n_iter: int
    inertia_history: List[float] = field(default_factory=list)


def _repair_empty(assignment: np.ndarray, d2: np.ndarray, k: int) -> np.ndarray:
    """Give every empty cluster the point farthest from its own center, taken from a cluster with > 1 member."""
    for j in range(k):
        counts = np.bincount(assignment, minlength=k)
        if counts[j] > 0:
            continue
        own = d2[np.arange(len(assignment)), assignment]
        own = np.where(counts[assignment] > 1, own, -np.inf)
        assignment[int(np.argmax(own))] = j
    return assignment


def kmeans_lloyd(points, k: int, seed: int = 0, max_iter: int = 300, tol: float = 1e-4) -> KMeansFit:
    """Lloyd's algorithm from a seeded k-means++ start.

    Stops when the assignment is unchanged or the relative inertia change drops below tol; the returned
    assignment is always the nearest-center assignment for the returned centers.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise ContractViolation(f"Expected a nonempty (n, d) matrix, got shape {points.shape}")
    n = points.shape[0]
    if k < 2:
        raise ContractViolation("k must be >= 2")
    if k > n:
        raise ContractViolation(f"k={k} exceeds the {n} embedded points")

    centers, _ = kmeans_plusplus(points, n_clusters=k, random_state=seed)
    centers = centers.astype(np.float64)
    history: List[float] = []
    previous = None
    assignment = np.zeros(n, dtype=np.int64)
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        d2 = euclidean_distances(points, centers, squared=True)
        assignment = _repair_empty(np.argmin(d2, axis=1), d2, k)
        centers = np.stack([points[assignment == j].mean(axis=0) for j in range(k)])
        inertia = float(((points - centers[assignment]) ** 2).sum())
        history.append(inertia)
        if previous is not None and np.array_equal(assignment, previous):
            break
        if len(history) > 1 and history[-2] - inertia <= tol * max(history[-2], np.finfo(float).tiny):
            break
        previous = assignment

    # a tol stop leaves the centers one update ahead of the assignment
    for _ in range(max_iter):
        d2 = euclidean_distances(points, centers, squared=True)
        settled = _repair_empty(np.argmin(d2, axis=1), d2, k)
        if np.array_equal(settled, assignment):
            break
        assignment = settled
        centers = np.stack([points[assignment == j].mean(axis=0) for j in range(k)])
        history.append(float(((points - centers[assignment]) ** 2).sum()))
        n_iter += 1
    return KMeansFit(centers, assignment, history[-1], n_iter, history)


def embed_dataset(dataset: LabeledImageSet, embedder, workers: int = 4) -> np.ndarray:
    """(n, d) image embeddings in record order."""
    def embed(record):
        return np.asarray(embedder.embed_image(read_image(record.path)), dtype=np.float64)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        vectors = list(tqdm(pool.map(embed, dataset.records), total=len(dataset), desc='Embedding', leave=False))
    return np.stack(vectors)


def fit_clusters(data: Union[LabeledImageSet, np.ndarray], embedder=None, k: int = 10, seed: int = 0,
                 max_iter: int = 300, tol: float = 1e-4, workers: int = 4) -> ClusterModel:
    if isinstance(data, LabeledImageSet):
        if len(data) == 0:
            raise DatasetError("Cannot fit clusters on an empty dataset")
        if embedder is None:
            raise ConfigError("fit_clusters on images needs an embedder backend")
        points = embed_dataset(data, embedder, workers)
    else:
        points = np.asarray(data, dtype=np.float64)
    start = time.time()
    fit = kmeans_lloyd(points, k, seed, max_iter, tol)
    logger.info(f"k-means k={k} converged in {fit.n_iter} iterations ({time.time() - start:.2f} seconds), inertia {fit.inertia:.4f}")
    return ClusterModel(fit.centers, fit_seed=seed, inertia=fit.inertia, n_iter=fit.n_iter, source='image',
                        inertia_history=tuple(fit.inertia_history))


def fit_text_clusters(labels: Sequence[str], embedder, k: int, seed: int = 0, max_iter: int = 300,
                      tol: float = 1e-4) -> ClusterModel:
    """Cluster the text embeddings of the style labels themselves."""
    labels = tuple(labels)
    if k > len(labels):
        raise ContractViolation(f"k={k} exceeds the {len(labels)} labels")
    points = np.stack([np.asarray(embedder.embed_text(label), dtype=np.float64) for label in labels])
    fit = kmeans_lloyd(points, k, seed, max_iter, tol)
    return ClusterModel(fit.centers, fit_seed=seed, inertia=fit.inertia, n_iter=fit.n_iter, source='text',
                        inertia_history=tuple(fit.inertia_history))


def load_image_tensors(dataset: LabeledImageSet, image_dim: int):
    """(N, 3, image_dim, image_dim) tensors in [-1, 1] plus label indices, for CAN training."""
    from can_gan import StyleImageTensors

    images = []
    for record in tqdm(dataset.records, desc='Loading images', leave=False):
        image = read_image(record.path).resize((image_dim, image_dim), Image.BICUBIC)
        array = np.asarray(image, dtype=np.float32) / 255.0
        images.append(torch.from_numpy(array).permute(2, 0, 1) * 2.0 - 1.0)
    return StyleImageTensors(torch.stack(images), torch.from_numpy(dataset.label_indices()), dataset.label_set)
