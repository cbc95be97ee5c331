"""Seed derivation and order-preserving bounded-parallel mapping."""

from __future__ import annotations

import hashlib
import random
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")

_SEED_BITS = 63


def derive_seed(root: int, *parts: str | int) -> int:
    """Stable per-record seed from a root seed and identifying parts.

    Records can then be processed in any order (or in parallel) without
    changing the randomness any one of them sees.
    """
    h = hashlib.sha256()
    h.update(str(root).encode("utf-8"))
    for p in parts:
        h.update(b"\x1f")
        h.update(str(p).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "big") % (1 << _SEED_BITS)


def spawn_rng(root: int, *parts: str | int) -> random.Random:
    return random.Random(derive_seed(root, *parts))


def map_ordered(fn: Callable[[T], R], items: Iterable[T], concurrency: int = 8) -> list[R]:
    """Apply ``fn`` with at most ``concurrency`` in flight; results in input order."""
    items = list(items)
    if concurrency <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        return list(pool.map(fn, items))
