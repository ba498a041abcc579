import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import ConfigError, ContractViolation
from style_classifiers import StyleDistribution, style_ambiguity

logger = logging.getLogger(__name__)

CLASSIFIER_KINDS = ('discriminator', 'zero_shot', 'kmeans', 'none')


@dataclass
class RewardConfig:
    lambda_novelty: float = 1.0
    lambda_utility: float = 0.25
    classifier_kind: str = 'discriminator'
    label_set: str = 'full'
    clusters_path: str = ''
    discriminator_path: str = ''
    temperature: float = 1.0

    def __post_init__(self):
        if self.lambda_novelty < 0 or self.lambda_utility < 0:
            raise ConfigError("lambda_novelty and lambda_utility must be >= 0")
        if self.classifier_kind not in CLASSIFIER_KINDS:
            raise ConfigError(f"Unknown classifier_kind: {self.classifier_kind}")
        if self.lambda_novelty == 0 and self.lambda_utility == 0 and self.classifier_kind != 'none':
            raise ConfigError("Both lambdas are zero; use classifier_kind = 'none' for the basic baseline")
        if self.lambda_novelty > 0 and self.classifier_kind == 'none':
            raise ConfigError("lambda_novelty > 0 needs a style classifier")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")


@dataclass(frozen=True)
class MethodPreset:
    name: str
    lambda_novelty: float
    lambda_utility: float
    classifier_kind: str
    dataset: Optional[str]
    inference_steps: int

    def reward_config(self) -> RewardConfig:
        return RewardConfig(lambda_novelty=self.lambda_novelty, lambda_utility=self.lambda_utility,
                            classifier_kind=self.classifier_kind, label_set=self.dataset or 'full')


METHOD_PRESETS: Dict[str, MethodPreset] = {p.name: p for p in (
    MethodPreset('disc-full', 1.0, 0.25, 'discriminator', 'full', 30),
    MethodPreset('disc-med', 1.0, 0.25, 'discriminator', 'mediums', 30),
    MethodPreset('clip-full', 1.0, 0.25, 'zero_shot', 'full', 30),
    MethodPreset('clip-med', 1.0, 0.25, 'zero_shot', 'mediums', 30),
    MethodPreset('kmeans-full', 1.0, 0.25, 'kmeans', 'full', 30),
    MethodPreset('kmeans-med', 1.0, 0.25, 'kmeans', 'mediums', 30),
    MethodPreset('utility-30', 0.0, 1.0, 'none', None, 30),
    MethodPreset('utility-10', 0.0, 1.0, 'none', None, 10),
    MethodPreset('basic-30', 0.0, 0.0, 'none', None, 30),
    MethodPreset('basic-10', 0.0, 0.0, 'none', None, 10),
)}


@dataclass
class RewardRecord:
    total: float
    novelty_term: float
    utility_term: float
    prompt: str
    sample_id: int
    advantage: Optional[float] = None

    def to_log_row(self) -> dict:
        return {
            'sample_id': int(self.sample_id),
            'prompt': self.prompt,
            'novelty': float(self.novelty_term),
            'utility': float(self.utility_term),
            'total': float(self.total),
            'advantage': None if self.advantage is None else float(self.advantage),
        }


def creative_reward(image, prompt: str, classifier: Optional[Callable[[object], StyleDistribution]],
                    similarity_backend, config: RewardConfig, sample_id: int = 0) -> RewardRecord:
    """R(x0) = -lambda_novelty * CE(C(x0), U) + lambda_utility * similarity(prompt, x0)."""
    if config.classifier_kind == 'none':
        novelty = 0.0
    else:
        if classifier is None:
            raise ContractViolation(f"classifier_kind={config.classifier_kind} but no classifier was given")
        novelty = style_ambiguity(classifier(image))

    if similarity_backend is None:
        if config.lambda_utility > 0:
            raise ContractViolation("lambda_utility > 0 needs a similarity backend")
        utility = 0.0
    else:
        utility = float(similarity_backend.similarity(prompt, image))

    total = -config.lambda_novelty * novelty + config.lambda_utility * utility
    return RewardRecord(total=total, novelty_term=novelty, utility_term=utility, prompt=prompt, sample_id=sample_id)


@dataclass
class RewardStack:
    """A classifier, a similarity backend and the lambdas: everything needed to score one sample."""

    config: RewardConfig
    classifier: Optional[Callable[[object], StyleDistribution]] = None
    similarity_backend: object = None

    @property
    def utility_scale(self) -> str:
        return getattr(self.similarity_backend, 'similarity_scale', 'native')

    def score(self, image, prompt: str, sample_id: int = 0) -> RewardRecord:
        return creative_reward(image, prompt, self.classifier, self.similarity_backend, self.config, sample_id)


@dataclass
class _Moments:
    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    @property
    def variance(self) -> float:
        return self.m2 / self.count if self.count > 0 else 0.0


@dataclass
class PromptStatTracker:
    """Per-prompt streaming mean / population variance (Welford), full history."""

    min_count: int = 2
    eps_std: float = 1e-6
    _stats: Dict[str, _Moments] = field(default_factory=dict, repr=False)

    def update(self, prompt: str, raw_reward: float):
        raw_reward = float(raw_reward)
        if not math.isfinite(raw_reward):
            raise ContractViolation(f"Non-finite reward for prompt {prompt!r}: {raw_reward}")
        m = self._stats.setdefault(prompt, _Moments())
        m.count += 1
        delta = raw_reward - m.mean
        m.mean += delta / m.count
        m.m2 += delta * (raw_reward - m.mean)

    def normalize(self, prompt: str, raw_reward: float) -> float:
        m = self._stats.get(prompt)
        if m is None or m.count == 0:
            return 0.0
        if m.count < self.min_count:
            return float(raw_reward) - m.mean
        return (float(raw_reward) - m.mean) / max(math.sqrt(m.variance), self.eps_std)

    def stats(self, prompt: str) -> Tuple[int, float, float]:
        m = self._stats.get(prompt, _Moments())
        return m.count, m.mean, m.variance

    def prompts(self) -> List[str]:
        return sorted(self._stats)

    def update_batch(self, prompts: Sequence[str], rewards: Sequence[float]) -> np.ndarray:
        """Fold a whole sampling round into the moments, then normalize each reward with the updated moments."""
        if len(prompts) != len(rewards):
            raise ContractViolation("prompts and rewards must have the same length")
        for prompt, reward in zip(prompts, rewards):
            self.update(prompt, reward)
        return np.array([self.normalize(p, r) for p, r in zip(prompts, rewards)], dtype=np.float64)


def update_and_normalize(tracker: PromptStatTracker, prompt: str, raw_reward: float) -> float:
    tracker.update(prompt, raw_reward)
    return tracker.normalize(prompt, raw_reward)
