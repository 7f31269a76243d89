import time
from functools import wraps
import logging

import numpy as np

logger = logging.getLogger(__name__)

# name -> wall seconds of the latest call, read by the runner for summaries
timings = {}


def performance_monitor(func):
    @wraps(func)
    def wrapper(*args, **kwargs):
        start_time = time.perf_counter()
        try:
            return func(*args, **kwargs)
        finally:
            elapsed = time.perf_counter() - start_time
            timings[func.__name__] = elapsed
            logger.info(f"{func.__name__} took {elapsed:.2f} seconds")
    return wrapper


def stream(seed: int, *path):
    """Independent generator for one (seed, stream, index...) path."""
    return np.random.default_rng(np.random.SeedSequence([seed, *path]))


def derive_seed(seed: int, *path) -> int:
    state = np.random.SeedSequence([seed, *path]).generate_state(2, dtype=np.uint32)
    return (int(state[0]) << 32) | int(state[1])
