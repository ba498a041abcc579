"""Adapters over the pretrained scoring / embedding models plus a deterministic mock.

Every other module talks to models only through the methods defined here
(`embed_image`, `embed_text`, `similarity`, `caption`, `aesthetic_score`,
`image_reward_score`, `embed_content`, `embed_style`). Images cross this
boundary as HxWx3 float arrays in [0, 1].
"""
import hashlib
import importlib.util
import logging
import threading
import time
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image

from config import default_device
from errors import BackendUnavailableError, ConfigError, ContractViolation, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_EMBED_DIM = 768
BACKEND_KINDS = ('similarity', 'embedder', 'captioner', 'aesthetic', 'image_reward', 'vit_features', 'mock')
EMBEDDER_KINDS = ('similarity', 'embedder', 'vit_features', 'mock')

DEFAULT_CAPTION_WORDS = ('painting', 'drawing', 'art')
MOCK_CAPTION_SUBJECTS = ('a landscape', 'a woman', 'a city street', 'flowers', 'a man', 'the sea', 'a house', 'trees')


@dataclass(frozen=True)
class BackendDescriptor:
    name: str
    embed_dim: int
    deterministic: bool
    kind: str

    def __post_init__(self):
        if not self.name:
            raise ConfigError("Backend name must be nonempty")
        if self.kind not in BACKEND_KINDS:
            raise ConfigError(f"Unknown backend kind: {self.kind}")
        if self.kind in EMBEDDER_KINDS and self.embed_dim <= 0:
            raise ConfigError(f"Embedder backend {self.name} needs embed_dim > 0")


def as_image_array(image) -> np.ndarray:
    """Coerce tensors / PIL images / arrays to an HxWx3 float64 array clipped to [0, 1]."""
    if isinstance(image, Image.Image):
        array = np.asarray(image.convert('RGB'), dtype=np.float64) / 255.0
    elif isinstance(image, torch.Tensor):
        array = image.detach().to('cpu', torch.float64).numpy()
    else:
        try:
            array = np.asarray(image, dtype=np.float64)
        except (TypeError, ValueError) as e:
            raise ShapeError(f"Not an image: {type(image).__name__}") from e

    if array.ndim == 2:
        array = np.repeat(array[:, :, None], 3, axis=2)
    elif array.ndim == 3 and array.shape[2] == 1:
        array = np.repeat(array, 3, axis=2)
    if array.ndim != 3 or array.shape[2] != 3:
        raise ShapeError(f"Expected an HxWx3 image, got shape {array.shape}")
    if array.shape[0] == 0 or array.shape[1] == 0:
        raise ShapeError("Image has an empty spatial dimension")
    if not np.all(np.isfinite(array)):
        raise ShapeError("Image contains non-finite values")
    return np.clip(array, 0.0, 1.0)


def to_pil(image) -> Image.Image:
    array = as_image_array(image)
    return Image.fromarray(np.round(array * 255.0).astype(np.uint8), mode='RGB')


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def _require_text(text: str):
    if not isinstance(text, str) or not text.strip():
        raise ContractViolation("Text must be a nonempty string")


class MockBackend:
    """Seeded random projection of pixel statistics; implements every backend role.

    Image features: a constant 1.0, the 4x4 grid of per-channel block means (centered
    at 0.5) and the per-channel standard deviations. Text features are a vector drawn
    from a generator seeded by the text's sha256, pushed through the same projection,
    so mock similarity is a plain cosine in one shared space.
    """

    similarity_scale = 'cosine'

    def __init__(self, seed: int = 0, embed_dim: int = DEFAULT_EMBED_DIM,
                 caption_words: Sequence[str] = DEFAULT_CAPTION_WORDS, grid: int = 4):
        if embed_dim <= 0:
            raise ConfigError("embed_dim must be positive")
        if not caption_words:
            raise ConfigError("caption_words must be nonempty")
        self.seed = int(seed)
        self.embed_dim = int(embed_dim)
        self.grid = int(grid)
        self.caption_words = tuple(w.lower() for w in caption_words)
        self.n_features = 1 + self.grid * self.grid * 3 + 3
        self.n_style_features = 13
        rng = np.random.default_rng(self.seed)
        self.projection = rng.standard_normal((self.embed_dim, self.n_features)) / np.sqrt(self.n_features)
        self.style_projection = rng.standard_normal((self.embed_dim, self.n_style_features)) / np.sqrt(self.n_style_features)
        self._pinned: Dict[str, np.ndarray] = {}

    def describe(self) -> BackendDescriptor:
        return BackendDescriptor(name=f"mock:{self.seed}", embed_dim=self.embed_dim, deterministic=True, kind='mock')

    def featurize(self, image) -> np.ndarray:
        array = as_image_array(image)
        h, w, _ = array.shape
        # nearest-neighbour upsample so every grid block covers at least one pixel
        if h < self.grid:
            array = np.repeat(array, -(-self.grid // h), axis=0)
        if w < self.grid:
            array = np.repeat(array, -(-self.grid // w), axis=1)
        h, w, _ = array.shape
        blocks = []
        for rows in np.array_split(np.arange(h), self.grid):
            for cols in np.array_split(np.arange(w), self.grid):
                blocks.append(array[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1].mean(axis=(0, 1)) - 0.5)
        stds = array.std(axis=(0, 1))
        return np.concatenate([[1.0], np.concatenate(blocks), stds])

    def style_features(self, image) -> np.ndarray:
        array = as_image_array(image)
        means = array.mean(axis=(0, 1)) - 0.5
        stds = array.std(axis=(0, 1))
        dx = np.abs(np.diff(array, axis=1)).mean(axis=(0, 1)) if array.shape[1] > 1 else np.zeros(3)
        dy = np.abs(np.diff(array, axis=0)).mean(axis=(0, 1)) if array.shape[0] > 1 else np.zeros(3)
        return np.concatenate([[1.0], means, stds, dx, dy])

    def embed_image(self, image) -> np.ndarray:
        return self.projection @ self.featurize(image)

    def embed_text(self, text: str) -> np.ndarray:
        _require_text(text)
        if text in self._pinned:
            return self._pinned[text].copy()
        digest = hashlib.sha256(text.encode('utf-8')).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], 'little'))
        return self.projection @ rng.standard_normal(self.n_features)

    def pin_text(self, text: str, vector) -> None:
        """Force the embedding returned for `text` (test hook)."""
        _require_text(text)
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.embed_dim,):
            raise ShapeError(f"Pinned vector must have shape ({self.embed_dim},), got {vector.shape}")
        self._pinned[text] = vector.copy()

    def similarity(self, text: str, image) -> float:
        return cosine(self.embed_text(text), self.embed_image(image))

    def caption(self, image) -> str:
        digest = hashlib.sha256(self.embed_image(image).tobytes()).digest()
        word = self.caption_words[digest[0] % len(self.caption_words)]
        subject = MOCK_CAPTION_SUBJECTS[digest[1] % len(MOCK_CAPTION_SUBJECTS)]
        return f"a {word} of {subject}".lower()

    def aesthetic_score(self, image) -> float:
        return float(5.0 + 2.0 * np.tanh(self.embed_image(image).mean()))

    def image_reward_score(self, text: str, image) -> float:
        return 2.0 * self.similarity(text, image)

    def embed_content(self, image) -> np.ndarray:
        return self.embed_image(image)

    def embed_style(self, image) -> np.ndarray:
        return self.style_projection @ self.style_features(image)


def _import_backend_module(name: str):
    try:
        return importlib.import_module(name)
    except ImportError as e:
        logger.error(f"Backend package {name} is not importable: {e}")
        raise BackendUnavailableError(f"Package {name} is not installed or failed to import: {e}") from e


def _timed_load(label: str, loader):
    start = time.time()
    logger.info(f"Loading {label}")
    try:
        model = loader()
    except Exception as e:
        logger.error(f"Failed to load {label}: {e}")
        raise BackendUnavailableError(f"Could not load {label}: {e}") from e
    logger.info(f"{label} loaded in {time.time() - start:.2f} seconds")
    return model


class ClipSimilarityBackend:
    """CLIP ViT-L/14 through sentence-transformers; similarity is cosine of normalized embeddings."""

    MODEL_NAME = 'clip-ViT-L-14'
    similarity_scale = 'cosine'

    def __init__(self, checkpoint: Optional[str] = None, device: Optional[str] = None):
        st = _import_backend_module('sentence_transformers')

        self.checkpoint = checkpoint or self.MODEL_NAME
        self.device = device or default_device()
        self.model = _timed_load(f"CLIP model {self.checkpoint}",
                                 lambda: st.SentenceTransformer(self.checkpoint, device=self.device))
        self.embed_dim = self.model.get_sentence_embedding_dimension() or DEFAULT_EMBED_DIM

    @classmethod
    def is_available(cls) -> bool:
        return importlib.util.find_spec('sentence_transformers') is not None

    def describe(self) -> BackendDescriptor:
        return BackendDescriptor(name=self.checkpoint, embed_dim=self.embed_dim, deterministic=True, kind='similarity')

    def embed_image(self, image) -> np.ndarray:
        emb = self.model.encode(to_pil(image), normalize_embeddings=True, convert_to_numpy=True)
        return emb.astype(np.float64)

    def embed_text(self, text: str) -> np.ndarray:
        _require_text(text)
        emb = self.model.encode(text, normalize_embeddings=True, convert_to_numpy=True)
        return emb.astype(np.float64)

    def similarity(self, text: str, image) -> float:
        util = _import_backend_module('sentence_transformers.util')

        return float(util.cos_sim(self.embed_text(text), self.embed_image(image))[0][0])


class BlipCaptioner:
    MODEL_NAME = 'Salesforce/blip-image-captioning-base'

    def __init__(self, checkpoint: Optional[str] = None, device: Optional[str] = None, max_new_tokens: int = 30):
        transformers = _import_backend_module('transformers')

        self.checkpoint = checkpoint or self.MODEL_NAME
        self.device = device or default_device()
        self.max_new_tokens = max_new_tokens
        self.processor = _timed_load(f"BLIP processor {self.checkpoint}",
                                     lambda: transformers.BlipProcessor.from_pretrained(self.checkpoint))
        self.model = _timed_load(f"BLIP model {self.checkpoint}",
                                 lambda: transformers.BlipForConditionalGeneration.from_pretrained(self.checkpoint).to(self.device).eval())

    @classmethod
    def is_available(cls) -> bool:
        return importlib.util.find_spec('transformers') is not None

    def describe(self) -> BackendDescriptor:
        return BackendDescriptor(name=self.checkpoint, embed_dim=0, deterministic=True, kind='captioner')

    @torch.no_grad()
    def caption(self, image) -> str:
        inputs = self.processor(images=to_pil(image), return_tensors='pt').to(self.device)
        out = self.model.generate(**inputs, max_new_tokens=self.max_new_tokens)
        text = self.processor.decode(out[0], skip_special_tokens=True).strip().lower()
        return text or 'an image'


class DinoFeatureBackend:
    """DINO ViT-S/16: class token = content embedding, mean last-layer attention keys = style embedding."""

    MODEL_NAME = 'facebook/dino-vits16'

    def __init__(self, checkpoint: Optional[str] = None, device: Optional[str] = None):
        transformers = _import_backend_module('transformers')

        self.checkpoint = checkpoint or self.MODEL_NAME
        self.device = device or default_device()
        self.processor = _timed_load(f"DINO processor {self.checkpoint}",
                                     lambda: transformers.AutoImageProcessor.from_pretrained(self.checkpoint))
        self.model = _timed_load(f"DINO model {self.checkpoint}",
                                 lambda: transformers.AutoModel.from_pretrained(self.checkpoint).to(self.device).eval())
        self.embed_dim = int(self.model.config.hidden_size)
        self._lock = threading.Lock()

    @classmethod
    def is_available(cls) -> bool:
        return importlib.util.find_spec('transformers') is not None

    def describe(self) -> BackendDescriptor:
        return BackendDescriptor(name=self.checkpoint, embed_dim=self.embed_dim, deterministic=True, kind='vit_features')

    @torch.no_grad()
    def _features(self, image) -> Tuple[np.ndarray, np.ndarray]:
        captured = {}

        def hook(_module, _inputs, output):
            captured['keys'] = output

        key_layer = self.model.encoder.layer[-1].attention.attention.key
        inputs = self.processor(images=to_pil(image), return_tensors='pt').to(self.device)
        # forward hooks are per-module state
        with self._lock:
            handle = key_layer.register_forward_hook(hook)
            try:
                outputs = self.model(**inputs)
            finally:
                handle.remove()
        content = outputs.last_hidden_state[0, 0]
        style = captured['keys'][0, 1:].mean(dim=0)
        return content.double().cpu().numpy(), style.double().cpu().numpy()

    def embed_image(self, image) -> np.ndarray:
        return self.embed_content(image)

    def embed_content(self, image) -> np.ndarray:
        return self._features(image)[0]

    def embed_style(self, image) -> np.ndarray:
        return self._features(image)[1]


class AestheticMLP(torch.nn.Module):
    def __init__(self):
        super().__init__()
        self.layers = torch.nn.Sequential(
            torch.nn.Linear(768, 1024),
            torch.nn.Dropout(0.2),
            torch.nn.Linear(1024, 128),
            torch.nn.Dropout(0.2),
            torch.nn.Linear(128, 64),
            torch.nn.Dropout(0.1),
            torch.nn.Linear(64, 16),
            torch.nn.Linear(16, 1),
        )

    def forward(self, embed):
        return self.layers(embed)


class AestheticBackend:
    """LAION aesthetic predictor: CLIP ViT-L/14 image embedding into an MLP trained on AVA ratings (1-10)."""

    CLIP_NAME = 'openai/clip-vit-large-patch14'
    WEIGHTS_REPO = 'trl-lib/ddpo-aesthetic-predictor'
    WEIGHTS_FILE = 'aesthetic-model.pth'
    score_range = (1.0, 10.0)

    def __init__(self, checkpoint: Optional[str] = None, device: Optional[str] = None):
        hub = _import_backend_module('huggingface_hub')
        transformers = _import_backend_module('transformers')

        self.device = device or default_device()
        self.checkpoint = checkpoint or self.WEIGHTS_REPO
        self.clip = _timed_load(f"CLIP model {self.CLIP_NAME}",
                                lambda: transformers.CLIPModel.from_pretrained(self.CLIP_NAME).to(self.device).eval())
        self.processor = _timed_load(f"CLIP processor {self.CLIP_NAME}",
                                     lambda: transformers.CLIPProcessor.from_pretrained(self.CLIP_NAME))

        def load_mlp():
            path = hub.hf_hub_download(self.checkpoint, self.WEIGHTS_FILE)
            mlp = AestheticMLP()
            mlp.load_state_dict(torch.load(path, map_location='cpu', weights_only=True))
            return mlp.to(self.device).eval()

        self.mlp = _timed_load(f"aesthetic head {self.checkpoint}", load_mlp)

    @classmethod
    def is_available(cls) -> bool:
        return importlib.util.find_spec('transformers') is not None and importlib.util.find_spec('huggingface_hub') is not None

    def describe(self) -> BackendDescriptor:
        return BackendDescriptor(name=self.checkpoint, embed_dim=768, deterministic=True, kind='aesthetic')

    @torch.no_grad()
    def aesthetic_score(self, image) -> float:
        inputs = self.processor(images=to_pil(image), return_tensors='pt').to(self.device)
        embed = self.clip.get_image_features(**inputs)
        embed = embed / torch.linalg.vector_norm(embed, dim=-1, keepdim=True)
        return float(self.mlp(embed).squeeze())


class ImageRewardBackend:
    MODEL_NAME = 'ImageReward-v1.0'

    def __init__(self, checkpoint: Optional[str] = None, device: Optional[str] = None):
        self.checkpoint = checkpoint or self.MODEL_NAME
        self.device = device or default_device()
        RM = _import_backend_module('ImageReward')

        self.model = _timed_load(f"ImageReward model {self.checkpoint}",
                                 lambda: RM.load(self.checkpoint, device=self.device).eval())
        self.model.requires_grad_(False)

    @classmethod
    def is_available(cls) -> bool:
        return importlib.util.find_spec('ImageReward') is not None

    def describe(self) -> BackendDescriptor:
        return BackendDescriptor(name=self.checkpoint, embed_dim=0, deterministic=True, kind='image_reward')

    @torch.no_grad()
    def image_reward_score(self, text: str, image) -> float:
        _require_text(text)
        return float(self.model.score(text, to_pil(image)))


BACKEND_FACTORIES = {
    'clip-vit-l-14': ClipSimilarityBackend,
    'blip-base': BlipCaptioner,
    'dino-vits16': DinoFeatureBackend,
    'laion-aesthetic': AestheticBackend,
    'image-reward': ImageRewardBackend,
}

_backend_cache: Dict[Tuple[str, int, str], object] = {}
_cache_lock = threading.Lock()


def load_backend(spec: str, embed_dim: int = DEFAULT_EMBED_DIM, device: Optional[str] = None):
    """Resolve a backend spec string: 'mock:<seed>' or '<name>[:<checkpoint>]'.

    Pretrained backends are loaded once per process and shared.
    """
    spec = (spec or '').strip()
    if not spec:
        raise ConfigError("Empty backend spec")
    name, _, checkpoint = spec.partition(':')
    if name == 'mock':
        try:
            seed = int(checkpoint) if checkpoint else 0
        except ValueError as e:
            raise ConfigError(f"Mock backend seed must be an integer: {spec}") from e
        return MockBackend(seed=seed, embed_dim=embed_dim)

    factory = BACKEND_FACTORIES.get(name)
    if factory is None:
        raise ConfigError(f"Unknown backend: {name} (known: mock, {', '.join(sorted(BACKEND_FACTORIES))})")
    device = device or default_device()
    key = (spec, embed_dim, device)
    with _cache_lock:
        if key not in _backend_cache:
            _backend_cache[key] = factory(checkpoint or None, device=device)
        return _backend_cache[key]


def require_method(backend, method: str, role: str):
    if backend is None or not callable(getattr(backend, method, None)):
        raise BackendUnavailableError(f"Backend configured for {role} does not provide {method}()")
    return backend


@dataclass
class BackendConfig:
    similarity: str = 'mock:0'
    embedder: str = 'mock:0'
    captioner: str = 'mock:0'
    aesthetic: str = 'mock:0'
    image_reward: str = 'mock:0'
    style_embedder: str = 'mock:0'
    embed_dim: int = DEFAULT_EMBED_DIM
    device: str = ''

    def __post_init__(self):
        if self.embed_dim <= 0:
            raise ConfigError("backend.embed_dim must be positive")

    def load(self, role: str):
        spec = getattr(self, role, None)
        if spec is None:
            raise ConfigError(f"Unknown backend role: {role}")
        return load_backend(spec, embed_dim=self.embed_dim, device=self.device or None)
