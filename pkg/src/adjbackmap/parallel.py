"""Order-preserving parallel map and a fixed-shape reduction tree.

Results never depend on the worker count: ``parallel_map`` returns in
input order and ``tree_reduce`` always pairs neighbours the same way.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

A = TypeVar("A")
B = TypeVar("B")


def parallel_map(fn: Callable[[A], B], items: Iterable[A], threads: int = 1) -> list[B]:
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def tree_reduce(merge: Callable[[B, B], B], parts: Sequence[B]) -> B:
    """Pairwise reduction over a balanced binary tree of ``parts``."""
    if not parts:
        raise ValueError("nothing to reduce")
    level = list(parts)
    while len(level) > 1:
        nxt = [merge(level[i], level[i + 1]) for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0]
