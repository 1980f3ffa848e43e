__all__ = ["check_seed", "make_grid", "n_threads", "parse_float_list", "prng_key"]

import logging
import os

import jax
import jax.numpy as jnp
import numpy as np
from jax.typing import ArrayLike

logger = logging.getLogger(__name__)

THREADS_ENV = "HERDLAB_THREADS"


def make_grid(low: float, high: float, step: float) -> np.ndarray:
    """A closed grid low, low + step, ..., high (the endpoint is kept when it lands
    on the grid)."""
    if step <= 0:
        msg = f"Grid step must be positive, got {step}"
        raise ValueError(msg)
    n = int(np.floor((high - low) / step + 1e-9)) + 1
    return low + step * np.arange(n)


def parse_float_list(text: str) -> list[float]:
    """Parse ``"0.1,0.2,0.7"`` or a grid ``"0:4:0.5"`` (low:high:step)."""
    text = text.strip()
    try:
        if ":" in text:
            low, high, step = (float(s) for s in text.split(":"))
            return [float(x) for x in make_grid(low, high, step)]
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError as e:
        msg = f"Cannot parse '{text}' as a list of numbers"
        raise ValueError(msg) from e


def check_seed(seed: int) -> int:
    if int(seed) != seed or not 0 <= int(seed) < 2**64:
        msg = f"Seeds are unsigned 64-bit integers, got {seed}"
        raise ValueError(msg)
    return int(seed)


def prng_key(seed: ArrayLike) -> jax.Array:
    """A Threefry-2x32 key from an unsigned 64-bit seed (works under vmap)."""
    return jax.random.PRNGKey(jnp.asarray(seed, dtype=jnp.uint64))


def n_threads() -> int:
    """Worker threads to use: ``HERDLAB_THREADS`` if set, else the CPU count."""
    value = os.environ.get(THREADS_ENV)
    if value is None:
        return os.cpu_count() or 1

    try:
        n = int(value)
    except ValueError:
        n = 0
    if n < 1:
        logger.warning("Ignoring invalid %s=%r", THREADS_ENV, value)
        return os.cpu_count() or 1
    return n
