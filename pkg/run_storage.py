import json
import logging
import os
import shutil
import tempfile
from typing import Any, Dict, Iterable, List, Optional

import torch

from config import canonical_json, config_hash

logger = logging.getLogger(__name__)

SNAPSHOT_FILE = 'config_snapshot.json'


def write_json(path: str, data: Any, indent: int = 2) -> str:
    """Write JSON atomically (temp file in the same directory, then os.replace)."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix='.tmp-', suffix='.json')
    try:
        with os.fdopen(fd, 'w', encoding='utf-8') as f:
            json.dump(data, f, indent=indent, sort_keys=True)
            f.write('\n')
        os.replace(tmp_path, path)
    except Exception as e:
        logger.error(f"Error writing {path}: {str(e)}")
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise
    return path


def read_json(path: str) -> Any:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except Exception as e:
        logger.error(f"Error loading {path}: {str(e)}")
        raise


def append_jsonl(path: str, rows: Iterable[Dict[str, Any]]) -> int:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    count = 0
    with open(path, 'a', encoding='utf-8') as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + '\n')
            count += 1
    return count


def read_jsonl(path: str) -> List[Dict[str, Any]]:
    if not os.path.exists(path) or os.path.getsize(path) == 0:
        return []
    rows = []
    with open(path, 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError:
                logger.warning(f"Skipping malformed line {line_no} in {path}")
    return rows


def prepare_run_dir(out_dir: str, command: str, resolved: Dict[str, Any]) -> str:
    """Create <out>/<command>-<hash> with the resolved config snapshot in it.

    A new directory is assembled under a temporary sibling name and renamed into place, so it never
    appears without its snapshot. An existing one (same resolved config) is reused.
    """
    digest = config_hash(resolved)
    run_dir = os.path.join(out_dir, f"{command}-{digest}")
    if os.path.isdir(run_dir):
        write_config_snapshot(run_dir, resolved)
    else:
        os.makedirs(out_dir, exist_ok=True)
        staging = tempfile.mkdtemp(dir=out_dir, prefix=f".{command}-{digest}-")
        write_config_snapshot(staging, resolved)
        try:
            os.rename(staging, run_dir)
        except OSError:
            # another process won the rename
            shutil.rmtree(staging, ignore_errors=True)
            if not os.path.isdir(run_dir):
                raise
    logger.info(f"Run directory: {run_dir}")
    return run_dir


def write_config_snapshot(run_dir: str, resolved: Dict[str, Any]) -> str:
    snapshot = {
        'config_hash': config_hash(resolved),
        'config': json.loads(canonical_json(resolved)),
    }
    return write_json(os.path.join(run_dir, SNAPSHOT_FILE), snapshot)


def load_config_snapshot(run_dir: str) -> Dict[str, Any]:
    return read_json(os.path.join(run_dir, SNAPSHOT_FILE))['config']


def save_checkpoint(path: str, tensors: Dict[str, Any], digest: str, metadata: Optional[Dict[str, Any]] = None) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    payload = {'config_hash': digest, 'tensors': tensors, 'metadata': dict(metadata or {})}
    torch.save(payload, path)
    logger.info(f"Saved checkpoint to {path}")
    return path


def load_checkpoint(path: str, map_location: str = 'cpu') -> Dict[str, Any]:
    try:
        return torch.load(path, map_location=map_location, weights_only=False)
    except Exception as e:
        logger.error(f"Error loading checkpoint {path}: {str(e)}")
        raise
