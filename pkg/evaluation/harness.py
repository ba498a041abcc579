import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from PIL import Image
from tqdm import tqdm

from backends import as_image_array, require_method, to_pil
from errors import ConfigError, ContractViolation, PairingError
from run_storage import read_json, write_json
from style_classifiers import style_ambiguity

logger = logging.getLogger(__name__)

MANIFEST_FILE = 'manifest.json'
METRICS = ('aesthetic', 'image_reward', 'prompt_alignment', 'dcr', 'ccr')
SIMILARITY_MODES = ('content', 'style')


@dataclass
class EvalConfig:
    n: int = 100
    base_seed: int = 0
    prompts: Tuple[str, ...] = ('painting', 'drawing', 'art')
    model_name: str = ''
    sampler: str = 'diffusion'
    checkpoint: str = ''
    n_steps: int = 30
    eta: float = 0.0
    eval_sets: Tuple[str, ...] = ()
    metrics: Tuple[str, ...] = ('aesthetic', 'image_reward')
    similarity_mode: str = 'content'
    pca_dim: int = 50
    perplexity: float = 30.0
    tsne_seed: int = 0
    workers: int = 4

    def __post_init__(self):
        self.prompts = tuple(self.prompts)
        self.metrics = tuple(self.metrics)
        self.eval_sets = tuple(self.eval_sets)
        if self.n < 1:
            raise ConfigError("eval.n must be >= 1")
        if not self.prompts:
            raise ConfigError("eval.prompts must not be empty")
        unknown = [m for m in self.metrics if m not in METRICS]
        if unknown:
            raise ConfigError(f"Unknown eval metrics: {', '.join(unknown)}")
        if self.similarity_mode not in SIMILARITY_MODES:
            raise ConfigError(f"eval.similarity_mode must be one of {SIMILARITY_MODES}")
        if self.sampler not in ('diffusion', 'can'):
            raise ConfigError("eval.sampler must be 'diffusion' or 'can'")


@dataclass
class EvalItem:
    index: int
    prompt: str
    seed: int
    image: Optional[np.ndarray] = None
    file: Optional[str] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None and (self.image is not None or self.file is not None)

    def load_image(self) -> np.ndarray:
        if self.image is None:
            if self.file is None:
                raise ContractViolation(f"Eval item {self.index} has no image")
            with Image.open(self.file) as image:
                self.image = as_image_array(image.convert('RGB'))
        return self.image


@dataclass
class EvalSet:
    model: str
    base_seed: int
    items: List[EvalItem] = field(default_factory=list)

    def __post_init__(self):
        for i, item in enumerate(self.items):
            if item.index != i:
                raise ContractViolation(f"Eval set {self.model}: item {i} carries index {item.index}")

    def __len__(self) -> int:
        return len(self.items)

    @property
    def pairing(self) -> List[Tuple[str, int]]:
        return [(item.prompt, item.seed) for item in self.items]

    @property
    def failures(self) -> List[int]:
        return [item.index for item in self.items if not item.ok]

    def save(self, directory: str) -> str:
        """PNG per item plus manifest.json {"model","base_seed","items":[{"i","prompt","seed","file"}]}."""
        os.makedirs(directory, exist_ok=True)
        entries = []
        for item in self.items:
            entry = {'i': item.index, 'prompt': item.prompt, 'seed': int(item.seed), 'file': None}
            if item.ok:
                filename = f"{item.index:04d}.png"
                to_pil(item.load_image()).save(os.path.join(directory, filename))
                entry['file'] = filename
            else:
                entry['error'] = item.error
            entries.append(entry)
        write_json(os.path.join(directory, MANIFEST_FILE), {'model': self.model, 'base_seed': int(self.base_seed),
                                                             'items': entries})
        return directory

    @classmethod
    def load(cls, directory: str) -> 'EvalSet':
        manifest = read_json(os.path.join(directory, MANIFEST_FILE))
        items = [EvalItem(index=int(e['i']), prompt=e['prompt'], seed=int(e['seed']),
                          file=os.path.join(directory, e['file']) if e.get('file') else None,
                          error=e.get('error') or (None if e.get('file') else 'missing image'))
                 for e in manifest['items']]
        return cls(model=manifest['model'], base_seed=int(manifest['base_seed']), items=items)


def derive_eval_pairs(prompts: Sequence[str], base_seed: int, n: int = 100) -> List[Tuple[str, int]]:
    """The (prompt, seed) sequence every model in a comparison group shares."""
    if not prompts:
        raise ContractViolation("At least one prompt is required")
    rng = np.random.default_rng(base_seed)
    pairs = []
    for _ in range(n):
        prompt = prompts[int(rng.integers(len(prompts)))]
        seed = int(rng.integers(0, 2 ** 31 - 1))
        pairs.append((prompt, seed))
    return pairs


def generate_eval_set(sampler: Callable[[str, int], np.ndarray], model_name: str, prompts: Sequence[str],
                      base_seed: int, n: int = 100) -> EvalSet:
    """Sample one image per derived (prompt, seed); failures are recorded per index and the run continues."""
    start = time.time()
    items = []
    for i, (prompt, seed) in enumerate(tqdm(derive_eval_pairs(prompts, base_seed, n), desc=f'Eval {model_name}')):
        try:
            image = as_image_array(sampler(prompt, seed))
            items.append(EvalItem(i, prompt, seed, image=image))
        except Exception as e:
            logger.warning(f"Sampling failed for {model_name} at index {i}: {e}")
            items.append(EvalItem(i, prompt, seed, error=str(e)))
    eval_set = EvalSet(model_name, base_seed, items)
    logger.info(f"Generated {len(items)} images for {model_name} in {time.time() - start:.2f} seconds "
                f"({len(eval_set.failures)} failures)")
    return eval_set


def check_pairing(eval_sets: Sequence[EvalSet]):
    if not eval_sets:
        raise PairingError("No eval sets to compare")
    reference = eval_sets[0]
    for other in eval_sets[1:]:
        if len(other) != len(reference):
            raise PairingError(f"{other.model} has {len(other)} items, {reference.model} has {len(reference)}")
        for a, b in zip(reference.items, other.items):
            if (a.prompt, a.seed) != (b.prompt, b.seed):
                raise PairingError(f"Index {a.index}: {reference.model} used ({a.prompt!r}, {a.seed}) "
                                   f"but {other.model} used ({b.prompt!r}, {b.seed})")


@dataclass(frozen=True)
class MetricSummary:
    mean: float
    std: float
    n: int
    failures: int = 0

    def __post_init__(self):
        if self.std < 0:
            raise ContractViolation("std must be nonnegative")

    def cell(self, digits: int = 2) -> str:
        return f"{self.mean:.{digits}f} ( {self.std:.{digits}f} )"


def summarize(values: Sequence[float], failures: int = 0) -> MetricSummary:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return MetricSummary(float('nan'), 0.0, 0, failures)
    return MetricSummary(float(values.mean()), float(values.std()), int(values.size), failures)


@dataclass
class ScoreTable:
    """model -> metric -> summary, plus the raw per-image values behind each summary."""

    summaries: Dict[str, Dict[str, MetricSummary]] = field(default_factory=dict)
    values: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)

    @property
    def models(self) -> List[str]:
        return list(self.summaries)

    @property
    def metrics(self) -> List[str]:
        seen = []
        for per_model in self.summaries.values():
            seen.extend(m for m in per_model if m not in seen)
        return seen

    def cell(self, model: str, metric: str) -> str:
        return self.summaries[model][metric].cell()

    def to_frame(self) -> pd.DataFrame:
        rows = [{'model': model, 'metric': metric, 'mean': s.mean, 'std': s.std, 'n': s.n, 'failures': s.failures}
                for model, per_model in self.summaries.items() for metric, s in per_model.items()]
        return pd.DataFrame(rows, columns=['model', 'metric', 'mean', 'std', 'n', 'failures'])

    def formatted_frame(self) -> pd.DataFrame:
        metrics = self.metrics
        rows = []
        for model, per_model in self.summaries.items():
            row = {'model': model}
            row.update({m: per_model[m].cell() if m in per_model else '' for m in metrics})
            rows.append(row)
        return pd.DataFrame(rows, columns=['model'] + metrics)

    def values_frame(self) -> pd.DataFrame:
        rows = [{'model': model, 'metric': metric, 'value': float(v)}
                for model, per_model in self.values.items() for metric, arr in per_model.items() for v in arr]
        return pd.DataFrame(rows, columns=['model', 'metric', 'value'])

    def to_csv(self, directory: str) -> str:
        os.makedirs(directory, exist_ok=True)
        self.to_frame().to_csv(os.path.join(directory, 'scores.csv'), index=False)
        self.formatted_frame().to_csv(os.path.join(directory, 'scores_formatted.csv'), index=False)
        self.values_frame().to_csv(os.path.join(directory, 'score_values.csv'), index=False)
        return directory

    @classmethod
    def from_csv(cls, directory: str) -> 'ScoreTable':
        table = cls()
        for _, r in pd.read_csv(os.path.join(directory, 'scores.csv')).iterrows():
            table.summaries.setdefault(r['model'], {})[r['metric']] = MetricSummary(
                float(r['mean']), float(r['std']), int(r['n']), int(r['failures']))
        values_path = os.path.join(directory, 'score_values.csv')
        if os.path.exists(values_path):
            df = pd.read_csv(values_path)
            for (model, metric), group in df.groupby(['model', 'metric'], sort=False):
                table.values.setdefault(model, {})[metric] = group['value'].to_numpy(dtype=np.float64)
        return table

    @classmethod
    def merge(cls, tables: Sequence['ScoreTable']) -> 'ScoreTable':
        merged = cls()
        for table in tables:
            for model, per_model in table.summaries.items():
                merged.summaries.setdefault(model, {}).update(per_model)
            for model, per_model in table.values.items():
                merged.values.setdefault(model, {}).update(per_model)
        return merged


Scorer = Callable[[np.ndarray, str], float]


def score_eval_set(eval_set: EvalSet, scorers: Dict[str, Scorer], workers: int = 4) -> ScoreTable:
    """Population mean / std per metric; per-image scorer failures are excluded and counted."""
    usable = [item for item in eval_set.items if item.ok]
    table = ScoreTable()
    table.summaries[eval_set.model] = {}
    table.values[eval_set.model] = {}
    for name, scorer in scorers.items():
        def score(item):
            try:
                value = float(scorer(item.load_image(), item.prompt))
                if not np.isfinite(value):
                    raise ValueError(f"non-finite score {value}")
                return value
            except Exception as e:
                logger.warning(f"Scorer {name} failed on {eval_set.model}[{item.index}]: {e}")
                return None

        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(tqdm(pool.map(score, usable), total=len(usable), desc=f'{name} {eval_set.model}', leave=False))
        values = [v for v in results if v is not None]
        failures = len(results) - len(values) + len(eval_set.failures)
        table.summaries[eval_set.model][name] = summarize(values, failures)
        table.values[eval_set.model][name] = np.asarray(values, dtype=np.float64)
    return table


def make_scorers(metrics: Sequence[str], *, aesthetic_backend=None, image_reward_backend=None,
                 similarity_backend=None, discriminator_classifier=None, zero_shot_classifier=None) -> Dict[str, Scorer]:
    """Bind each requested metric to its backend: (image, prompt) -> float."""
    scorers: Dict[str, Scorer] = {}
    for metric in metrics:
        if metric == 'aesthetic':
            require_method(aesthetic_backend, 'aesthetic_score', 'aesthetic')
            scorers[metric] = lambda image, prompt: aesthetic_backend.aesthetic_score(image)
        elif metric == 'image_reward':
            require_method(image_reward_backend, 'image_reward_score', 'image_reward')
            scorers[metric] = lambda image, prompt: image_reward_backend.image_reward_score(prompt, image)
        elif metric == 'prompt_alignment':
            require_method(similarity_backend, 'similarity', 'similarity')
            scorers[metric] = lambda image, prompt: similarity_backend.similarity(prompt, image)
        elif metric == 'dcr':
            if discriminator_classifier is None:
                raise ConfigError("dcr needs a discriminator classifier")
            scorers[metric] = lambda image, prompt: -style_ambiguity(discriminator_classifier(image))
        elif metric == 'ccr':
            if zero_shot_classifier is None:
                raise ConfigError("ccr needs a zero-shot classifier")
            scorers[metric] = lambda image, prompt: -style_ambiguity(zero_shot_classifier(image))
        else:
            raise ConfigError(f"Unknown metric: {metric}")
    return scorers
