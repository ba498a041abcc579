import json
import logging
import os
from typing import Dict, List, Optional, Sequence, Tuple

logger = logging.getLogger(__name__)

FULL_STYLE_LABELS: Tuple[str, ...] = (
    'contemporary-realism', 'art-nouveau-modern', 'abstract-expressionism', 'northern-renaissance',
    'mannerism-late-renaissance', 'early-renaissance', 'realism', 'action-painting',
    'color-field-painting', 'pop-art', 'new-realism', 'pointillism', 'expressionism',
    'analytical-cubism', 'symbolism', 'fauvism', 'minimalism', 'cubism', 'romanticism',
    'ukiyo-e', 'high-renaissance', 'synthetic-cubism', 'baroque', 'post-impressionism',
    'impressionism', 'rococo', 'na-ve-art-primitivism',
)

MEDIUMS_STYLE_LABELS: Tuple[str, ...] = (
    'expressionism', 'post-impressionism', 'fauvism', 'abstract-expressionism',
    'na-ve-art-primitivism', 'cubism', 'synthetic-cubism', 'analytical-cubism',
    'new-realism', 'action-painting',
)

EXPECTED_SIZES = {'full': 27, 'mediums': 10}


class StyleLabelRegistry:
    """
    Named style label sets with optional JSON override.

    JSON structure (optional file: labels/style_labels.json):
    {
      "sets": {"full": ["baroque", ...], "mediums": [...]},
      "aliases": {"naive art": "na-ve-art-primitivism"}
    }
    """

    def __init__(self, json_path: Optional[str] = None):
        self.sets: Dict[str, Tuple[str, ...]] = {}
        self.aliases: Dict[str, str] = {}
        if json_path and os.path.exists(json_path):
            try:
                with open(json_path, 'r', encoding='utf-8') as f:
                    data = json.load(f)
                self.sets = {name: tuple(labels) for name, labels in data.get('sets', {}).items()}
                self.aliases = {k.strip().lower(): v for k, v in data.get('aliases', {}).items()}
            except Exception as e:
                logger.warning(f"Ignoring unreadable label override {json_path}: {e}")
                self.sets, self.aliases = {}, {}
        if not self.sets:
            self.sets = self._default_sets()
        if not self.aliases:
            self.aliases = self._default_aliases()

    def _default_sets(self) -> Dict[str, Tuple[str, ...]]:
        return {'full': FULL_STYLE_LABELS, 'mediums': MEDIUMS_STYLE_LABELS}

    def _default_aliases(self) -> Dict[str, str]:
        return {
            'naive art': 'na-ve-art-primitivism',
            'naive-art-primitivism': 'na-ve-art-primitivism',
            'primitivism': 'na-ve-art-primitivism',
            'art nouveau': 'art-nouveau-modern',
            'late renaissance': 'mannerism-late-renaissance',
            'mannerism': 'mannerism-late-renaissance',
            'ukiyo e': 'ukiyo-e',
        }

    def names(self) -> List[str]:
        return sorted(self.sets)

    def get(self, name: str) -> Tuple[str, ...]:
        if name not in self.sets:
            raise KeyError(f"Unknown label set: {name}")
        return self.sets[name]

    def canonicalize(self, label: str) -> Optional[str]:
        s = (label or '').strip().lower()
        if not s:
            return None
        s = self.aliases.get(s, s)
        return s.replace(' ', '-').replace('_', '-')

    def register(self, name: str, labels: Sequence[str]):
        self.sets[name] = tuple(labels)


def read_label_file(path: str) -> Tuple[str, ...]:
    with open(path, 'r', encoding='utf-8') as f:
        return tuple(line.strip() for line in f if line.strip())


def write_label_file(path: str, labels: Sequence[str]) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        f.write('\n'.join(labels) + '\n')
    return path


_default_instance: Optional[StyleLabelRegistry] = None


def get_default_style_labels() -> StyleLabelRegistry:
    global _default_instance
    if _default_instance is None:
        json_path = os.path.abspath(os.path.join(os.path.dirname(os.path.abspath(__file__)), '..', 'labels', 'style_labels.json'))
        _default_instance = StyleLabelRegistry(json_path if os.path.exists(json_path) else None)
    return _default_instance
