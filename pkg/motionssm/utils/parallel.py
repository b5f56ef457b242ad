import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

logger = logging.getLogger(__name__)

THREADS_ENV_VAR = 'MOTIONSSM_THREADS'

T = TypeVar('T')
R = TypeVar('R')


def max_workers() -> int:
    default = os.cpu_count() or 1
    value = os.environ.get(THREADS_ENV_VAR)
    if not value:
        return default

    try:
        workers = int(value)
    except ValueError:
        workers = 0

    if workers < 1:
        logger.warning(
            f'Ignoring invalid {THREADS_ENV_VAR}={value!r}, '
            f'using {default} threads'
        )
        return default

    return workers


def ordered_map(func: Callable[[T], R], items: Iterable[T]) -> list[R]:
    """Map func over items, possibly in threads, keeping input order

    Results are always returned in the order of `items`, so reductions
    over the result list are deterministic regardless of thread count.
    """
    items = list(items)
    workers = min(max_workers(), len(items))
    if workers <= 1:
        return [func(x) for x in items]

    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(func, items))
