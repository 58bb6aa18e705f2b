import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from dataclasses import is_dataclass
from pathlib import Path
from typing import Any
from typing import Callable
from typing import Iterable
from typing import List
from typing import TypeVar

import numpy as np

from .constants import ENV_THREADS
from .exceptions import ConfigError

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def worker_count() -> int:
    """Number of worker threads, capped by the VARDEBLUR_THREADS variable."""
    default = os.cpu_count() or 1
    raw = os.environ.get(ENV_THREADS)
    if not raw:
        return default
    try:
        value = int(raw)
    except ValueError as e:
        raise ConfigError(f"{ENV_THREADS} must be an integer, got {raw!r}") from e
    if value < 1:
        raise ConfigError(f"{ENV_THREADS} must be >= 1, got {value}")
    return min(value, default)


def parallel_map(fn: Callable[[T], R], items: Iterable[T]) -> List[R]:
    """
    Map fn over items with the shared thread pool.

    Results come back in input order, so callers stay deterministic.
    """
    items = list(items)
    workers = min(worker_count(), len(items))
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def to_jsonable(value: Any) -> Any:
    """Convert dataclasses, numpy scalars/arrays and paths to JSON types."""
    if is_dataclass(value) and not isinstance(value, type):
        return to_jsonable(asdict(value))
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    return value


def write_json(path: Path, payload: Any) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(to_jsonable(payload), f, indent=2, sort_keys=True)
        f.write("\n")


def read_json(path: Path) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def all_finite(*arrays: np.ndarray) -> bool:
    return all(bool(np.all(np.isfinite(a))) for a in arrays)
