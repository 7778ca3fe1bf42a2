import concurrent.futures
import logging
import os
from typing import Callable, Iterable, List, Optional, Tuple

from config import settings
from core.errors import NegfError

logger = logging.getLogger(__name__)


def resolve_threads(requested: Optional[int] = None) -> int:
    """--threads flag, then NEGFMINI_THREADS, then the machine's core count."""
    if requested:
        return max(1, int(requested))
    env = os.getenv(settings.THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            logger.warning(f"Ignoring non-integer {settings.THREADS_ENV}={env!r}")
    return os.cpu_count() or 1


def map_points(fn: Callable, points: Iterable, threads: int = 1) -> Tuple[List, List]:
    """Run fn over independent points; results keep the input order.

    Returns (results, failures) where failures lists (point, error) for every
    point that raised a NegfError; its result slot is None.
    """
    points = list(points)

    def guarded(point):
        try:
            return fn(point), None
        except NegfError as e:
            return None, e

    if threads <= 1 or len(points) <= 1:
        outcomes = [guarded(p) for p in points]
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as executor:
            outcomes = list(executor.map(guarded, points))

    results = [res for res, _ in outcomes]
    failures = [(p, err) for p, (_, err) in zip(points, outcomes) if err is not None]
    for point, err in failures:
        logger.error(f"point {point} failed: {err}")
    return results, failures
