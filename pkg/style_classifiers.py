import json
import logging
import os
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import softmax

from backends import as_image_array
from errors import ConfigError, ContractViolation, ShapeError

logger = logging.getLogger(__name__)

EPS_PROB = 1e-12
EPS_DIST = 1e-6
CLASSIFIER_KINDS = ('discriminator', 'zero_shot', 'kmeans')


@dataclass(frozen=True, eq=False)
class StyleDistribution:
    probs: np.ndarray
    labels: Tuple[str, ...]

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        labels = tuple(self.labels)
        object.__setattr__(self, 'probs', probs)
        object.__setattr__(self, 'labels', labels)
        if probs.ndim != 1 or probs.shape[0] < 2:
            raise ShapeError(f"A style distribution needs at least 2 classes, got shape {probs.shape}")
        if len(labels) != probs.shape[0]:
            raise ShapeError(f"{len(labels)} labels for {probs.shape[0]} probabilities")
        if not np.all(np.isfinite(probs)) or np.any(probs < 0):
            raise ContractViolation("Probabilities must be finite and nonnegative")
        if abs(probs.sum() - 1.0) > 1e-9:
            raise ContractViolation(f"Probabilities sum to {probs.sum():.12f}, not 1")

    @property
    def n_classes(self) -> int:
        return int(self.probs.shape[0])

    def argmax(self) -> int:
        return int(np.argmax(self.probs))

    def top_label(self) -> str:
        return self.labels[self.argmax()]


@dataclass(frozen=True)
class UniformTarget:
    n_classes: int

    def __post_init__(self):
        if self.n_classes < 2:
            raise ContractViolation("Uniform target needs at least 2 classes")

    @property
    def probs(self) -> np.ndarray:
        return np.full(self.n_classes, 1.0 / self.n_classes)


@dataclass(frozen=True, eq=False)
class ClusterModel:
    centers: np.ndarray
    fit_seed: int = 0
    inertia: float = 0.0
    n_iter: int = 0
    source: str = 'image'
    inertia_history: Tuple[float, ...] = ()

    def __post_init__(self):
        centers = np.asarray(self.centers, dtype=np.float64)
        object.__setattr__(self, 'centers', centers)
        if centers.ndim != 2 or centers.shape[0] < 2:
            raise ShapeError(f"Cluster model needs a k x d center matrix with k >= 2, got {centers.shape}")
        if not np.all(np.isfinite(centers)):
            raise ContractViolation("Cluster centers must be finite")
        if self.inertia < 0:
            raise ContractViolation("Inertia must be nonnegative")

    @property
    def k(self) -> int:
        return int(self.centers.shape[0])

    @property
    def embed_dim(self) -> int:
        return int(self.centers.shape[1])

    @property
    def labels(self) -> Tuple[str, ...]:
        return tuple(f"cluster_{i}" for i in range(self.k))

    def to_dict(self) -> dict:
        return {
            'k': self.k,
            'dim': self.embed_dim,
            'seed': int(self.fit_seed),
            'inertia': float(self.inertia),
            'n_iter': int(self.n_iter),
            'source': self.source,
            'centers': self.centers.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'ClusterModel':
        model = cls(centers=np.asarray(data['centers'], dtype=np.float64), fit_seed=int(data.get('seed', 0)),
                    inertia=float(data.get('inertia', 0.0)), n_iter=int(data.get('n_iter', 0)),
                    source=data.get('source', 'image'))
        if model.k != int(data['k']) or model.embed_dim != int(data['dim']):
            raise ShapeError("Cluster file k/dim disagree with the stored centers")
        return model

    def save(self, path: str) -> str:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, indent=2)
        return path

    @classmethod
    def load(cls, path: str) -> 'ClusterModel':
        with open(path, 'r', encoding='utf-8') as f:
            return cls.from_dict(json.load(f))


def _check_labels(labels: Sequence[str]) -> Tuple[str, ...]:
    labels = tuple(labels)
    if len(labels) < 2:
        raise ContractViolation("At least two labels are required")
    if any(not isinstance(label, str) or not label.strip() for label in labels):
        raise ContractViolation("Labels must be nonempty strings")
    if len(set(labels)) != len(labels):
        seen, dupes = set(), []
        for label in labels:
            if label in seen:
                dupes.append(label)
            seen.add(label)
        raise ContractViolation(f"Duplicate labels: {', '.join(sorted(set(dupes)))}")
    return labels


def distribution_from_scores(scores, labels: Sequence[str], temperature: float = 1.0) -> StyleDistribution:
    if temperature <= 0:
        raise ConfigError("temperature must be positive")
    scores = np.asarray(scores, dtype=np.float64)
    return StyleDistribution(probs=softmax(scores / temperature), labels=tuple(labels))


def classify_zero_shot(image, labels: Sequence[str], similarity_backend, temperature: float = 1.0) -> StyleDistribution:
    """softmax over similarity(label, image) for each label; labels are used verbatim as query text."""
    labels = _check_labels(labels)
    scores = [similarity_backend.similarity(label, image) for label in labels]
    return distribution_from_scores(scores, labels, temperature)


def kmeans_distribution(embedding, clusters: ClusterModel, temperature: float = 1.0) -> StyleDistribution:
    embedding = np.asarray(embedding, dtype=np.float64)
    if embedding.shape != (clusters.embed_dim,):
        raise ShapeError(f"Embedding dimension {embedding.shape} does not match cluster dim {clusters.embed_dim}")
    distances = np.linalg.norm(clusters.centers - embedding[None, :], axis=1)
    return distribution_from_scores(1.0 / np.maximum(distances, EPS_DIST), clusters.labels, temperature)


def classify_kmeans(image, clusters: ClusterModel, embedder_backend, temperature: float = 1.0) -> StyleDistribution:
    return kmeans_distribution(embedder_backend.embed_image(image), clusters, temperature)


def image_to_model_input(image, image_dim: int) -> torch.Tensor:
    """HxWx3 [0,1] image -> 1x3xHxW tensor in [-1,1]."""
    if isinstance(image, torch.Tensor) and image.ndim == 4:
        batch = image
    else:
        array = as_image_array(image)
        batch = torch.from_numpy(array).permute(2, 0, 1).unsqueeze(0).float() * 2.0 - 1.0
    if batch.shape[-1] != image_dim or batch.shape[-2] != image_dim:
        raise ShapeError(f"Discriminator expects {image_dim}x{image_dim} images, got {tuple(batch.shape[-2:])}")
    return batch


@torch.no_grad()
def discriminator_logits(image, discriminator) -> np.ndarray:
    was_training = discriminator.training
    discriminator.eval()
    try:
        param = next(discriminator.parameters())
        batch = image_to_model_input(image, discriminator.image_dim).to(param.device, param.dtype)
        logits = discriminator.style_logits(batch)[0]
    finally:
        discriminator.train(was_training)
    return logits.double().cpu().numpy()


def classify_discriminator(image, discriminator, labels: Optional[Sequence[str]] = None,
                           temperature: float = 1.0) -> StyleDistribution:
    logits = discriminator_logits(image, discriminator)
    if labels is None:
        labels = tuple(getattr(discriminator, 'labels', None) or (f"style_{i}" for i in range(logits.shape[0])))
    return distribution_from_scores(logits, labels, temperature)


def style_ambiguity(dist: StyleDistribution) -> float:
    """Cross-entropy of the predicted distribution against a uniform target: -(1/N) sum_i log c_i.

    The minimum is ln N, reached exactly at the uniform distribution.
    """
    return float(-np.mean(np.log(np.maximum(dist.probs, EPS_PROB))))


def style_classification_loss(dist: StyleDistribution, true_label_index: int) -> float:
    if not 0 <= int(true_label_index) < dist.n_classes:
        raise ContractViolation(f"Label index {true_label_index} out of range for {dist.n_classes} classes")
    return float(-np.log(max(dist.probs[int(true_label_index)], EPS_PROB)))


def style_ambiguity_from_probs(probs: torch.Tensor) -> torch.Tensor:
    """Batched, differentiable style ambiguity over the last dimension."""
    return -torch.log(probs.clamp_min(EPS_PROB)).mean(dim=-1)


def style_ambiguity_from_logits(logits: torch.Tensor) -> torch.Tensor:
    return style_ambiguity_from_probs(F.softmax(logits, dim=-1))


def style_classification_loss_from_probs(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    picked = probs.gather(-1, labels.long().unsqueeze(-1)).squeeze(-1)
    return -torch.log(picked.clamp_min(EPS_PROB))


def make_classifier(kind: str, *, labels: Optional[Sequence[str]] = None, similarity_backend=None,
                    clusters: Optional[ClusterModel] = None, embedder_backend=None, discriminator=None,
                    temperature: float = 1.0) -> Callable[[object], StyleDistribution]:
    """Bind one of the three classifiers to its frozen parameters: image -> StyleDistribution."""
    if kind == 'zero_shot':
        if similarity_backend is None or labels is None:
            raise ConfigError("zero_shot classifier needs labels and a similarity backend")
        labels = _check_labels(labels)
        return lambda image: classify_zero_shot(image, labels, similarity_backend, temperature)
    if kind == 'kmeans':
        if clusters is None or embedder_backend is None:
            raise ConfigError("kmeans classifier needs a cluster model and an embedder backend")
        return lambda image: classify_kmeans(image, clusters, embedder_backend, temperature)
    if kind == 'discriminator':
        if discriminator is None:
            raise ConfigError("discriminator classifier needs a trained discriminator")
        return lambda image: classify_discriminator(image, discriminator, labels, temperature)
    raise ConfigError(f"Unknown classifier kind: {kind} (expected one of {', '.join(CLASSIFIER_KINDS)})")
