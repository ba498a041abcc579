import copy
import dataclasses
import hashlib
import json
import logging
import os
import tomllib
from typing import Any, Dict, Iterable, Optional

from dotenv import load_dotenv

from errors import ConfigError

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)

DEFAULT_CACHE_DIR = os.path.join('.cache', 'creative')

SECTIONS = ('run', 'backend', 'reward', 'diffusion', 'trainer', 'can', 'data', 'eval')


def cache_dir() -> str:
    path = os.getenv('CREATIVE_CACHE_DIR') or DEFAULT_CACHE_DIR
    os.makedirs(path, exist_ok=True)
    return path


def default_device() -> str:
    return os.getenv('CREATIVE_DEVICE', 'cpu')


def default_log_level() -> str:
    return os.getenv('CREATIVE_LOG_LEVEL', 'INFO').upper()


def load_config(path: Optional[str]) -> Dict[str, Dict[str, Any]]:
    """Read a TOML run config. A missing path yields an empty config with every section present."""
    config: Dict[str, Dict[str, Any]] = {name: {} for name in SECTIONS}
    if not path:
        return config
    if not os.path.exists(path):
        raise ConfigError(f"Config file not found: {path}")
    try:
        with open(path, 'rb') as f:
            data = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"Invalid TOML in {path}: {e}") from e

    for name, section in data.items():
        if name not in SECTIONS:
            raise ConfigError(f"Unknown config section [{name}] in {path}")
        if not isinstance(section, dict):
            raise ConfigError(f"Config section [{name}] must be a table")
        config[name].update(section)
    return config


def parse_override_value(raw: str) -> Any:
    # TOML literal syntax keeps 0.25 / true / [..] typed; bare words stay strings
    try:
        return tomllib.loads(f"value = {raw}")['value']
    except tomllib.TOMLDecodeError:
        return raw


def apply_overrides(config: Dict[str, Dict[str, Any]], overrides: Iterable[str]) -> Dict[str, Dict[str, Any]]:
    resolved = copy.deepcopy(config)
    for item in overrides or []:
        if '=' not in item:
            raise ConfigError(f"Override must look like section.key=value, got {item!r}")
        dotted, raw = item.split('=', 1)
        parts = dotted.strip().split('.')
        if len(parts) != 2 or not all(parts):
            raise ConfigError(f"Override key must be section.key, got {dotted!r}")
        section, key = parts
        if section not in SECTIONS:
            raise ConfigError(f"Unknown config section in override: {section}")
        resolved.setdefault(section, {})[key] = parse_override_value(raw.strip())
        logger.debug(f"Override {section}.{key} = {resolved[section][key]!r}")
    return resolved


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(',', ':'), default=_json_default)


def _json_default(value):
    if dataclasses.is_dataclass(value):
        return dataclasses.asdict(value)
    if isinstance(value, (set, frozenset)):
        return sorted(value)
    if isinstance(value, tuple):
        return list(value)
    raise TypeError(f"Not JSON serializable: {type(value).__name__}")


def config_hash(resolved: Dict[str, Any]) -> str:
    return hashlib.sha256(canonical_json(resolved).encode('utf-8')).hexdigest()[:12]


def build_section(cls, data: Optional[Dict[str, Any]], section: str = ''):
    """Instantiate a config dataclass from a TOML table, rejecting keys it does not declare.

    Lists are turned into tuples for tuple-typed fields so the dataclasses stay hashable.
    """
    data = dict(data or {})
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        label = f"[{section}]" if section else cls.__name__
        raise ConfigError(f"Unknown key(s) in {label}: {', '.join(unknown)}")
    for name, value in list(data.items()):
        if isinstance(value, list) and 'tuple' in str(known[name].type).lower():
            data[name] = tuple(tuple(v) if isinstance(v, list) else v for v in value)
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid {section or cls.__name__} config: {e}") from e


def resolved_snapshot(config: Dict[str, Dict[str, Any]], command: str, seed: Optional[int]) -> Dict[str, Any]:
    snapshot = copy.deepcopy(config)
    snapshot.setdefault('run', {})
    snapshot['run']['command'] = command
    if seed is not None:
        snapshot['run']['seed'] = seed
    return snapshot


