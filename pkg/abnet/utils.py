"""
This module provides small runtime helpers shared by the training, decoding
and pipeline code:

1. seed_everything: seeds torch and switches on deterministic kernels.
2. map_concurrently: runs a function over items on a thread pool and returns
   results in input order.
3. process_stats: resident memory and CPU time of the current process.
"""

import concurrent.futures
import logging
from typing import Callable, List, Sequence, TypeVar

import psutil
import torch

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def seed_everything(seed: int) -> None:
    """
    Seed torch and request deterministic algorithms.

    numpy streams are created per use from explicit seeds, so they need no
    global state here.
    """
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    logger.debug("Seeded torch with %s", seed)


def map_concurrently(fn: Callable[[T], R], items: Sequence[T], workers: int = 1) -> List[R]:
    """
    Apply fn to every item, optionally on a thread pool.

    Args:
        fn (callable): Function applied to each item.
        items (sequence): Inputs.
        workers (int): Thread count; 1 runs inline.

    Returns:
        list: Results in the order of `items`.
    """
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as executor:
        futures = [executor.submit(fn, item) for item in items]
        return [future.result() for future in futures]


def process_stats() -> dict:
    """Resident set size (bytes) and user+system CPU seconds of this process."""
    proc = psutil.Process()
    cpu = proc.cpu_times()
    return {"rss": proc.memory_info().rss, "cpu_seconds": cpu.user + cpu.system}
