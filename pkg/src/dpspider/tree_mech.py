"""Binary tree mechanism for private prefix sums.

Every dyadic interval ``(u, v)`` of ``[1, capacity]`` carries one stored
Gaussian noise vector.  ``tree_noise(tree, t)`` sums the stored vectors of the
greedy dyadic cover of ``[1, t]``, so each prefix accumulates at most
``log2(capacity)`` noise terms while every single position is covered by
exactly one node per level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def _next_pow2(n: int) -> int:
    return 1 << max(0, (int(n) - 1).bit_length())


def dyadic_intervals(capacity: int) -> list[tuple[int, int]]:
    """All stored intervals for a power-of-two ``capacity``, finest level first."""
    out = []
    size = 1
    while size <= capacity:
        for j in range(capacity // size):
            out.append((j * size + 1, (j + 1) * size))
        size *= 2
    return out


def node_intervals(t: int, capacity: int) -> list[tuple[int, int]]:
    """Greedy dyadic decomposition of ``[1, t]``.

    Walks block sizes from ``capacity`` down to 1 and takes a block whenever it
    still fits inside ``[1, t]``.

    >>> node_intervals(7, 8)
    [(1, 4), (5, 6), (7, 7)]
    """
    capacity = _next_pow2(capacity)
    if not 1 <= t <= capacity:
        raise ValueError(f"t={t} outside [1, {capacity}]")
    nodes = []
    k = 0
    size = capacity
    while k < t and size >= 1:
        if k + size <= t:
            nodes.append((k + 1, k + size))
            k += size
        size //= 2
    return nodes


@dataclass(frozen=True)
class TreeNoise:
    """Stored node noises; ``capacity`` is the padded power of two and
    ``length`` the number of positions that may be queried."""

    capacity: int
    length: int
    sigma: float
    d: int
    seed: object
    node_noise: dict = field(repr=False)


def init_tree(capacity: int, d: int, sigma: float, seed) -> TreeNoise:
    """Sample all node noises up front.

    ``capacity`` is rounded up to a power of two; queries are still limited to
    ``[1, capacity]`` as requested.
    """
    if capacity < 1:
        raise ValueError("capacity must be at least 1")
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    cap = _next_pow2(capacity)
    intervals = dyadic_intervals(cap)
    if sigma == 0:
        noise = np.zeros((len(intervals), d))
    else:
        rng = np.random.default_rng(seed)
        noise = sigma * rng.standard_normal((len(intervals), d))
    node_noise = {iv: noise[i] for i, iv in enumerate(intervals)}
    return TreeNoise(cap, int(capacity), float(sigma), int(d), seed, node_noise)


def tree_noise(tree: TreeNoise, t: int) -> np.ndarray:
    if not 1 <= t <= tree.length:
        raise ValueError(f"t={t} outside [1, {tree.length}]")
    out = np.zeros(tree.d)
    for iv in node_intervals(t, tree.capacity):
        out = out + tree.node_noise[iv]
    return out


def calibrate_sigma(s: float, capacity: float, epsilon: float, delta: float) -> float:
    """Per-coordinate node noise scale for ``(epsilon, delta)``-DP prefix sums
    whose per-step increments have L2 sensitivity ``s``."""
    if s < 0:
        raise ValueError("sensitivity must be nonnegative")
    if capacity < 2:
        raise ValueError("sequence length must be at least 2")
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if s == 0 or math.isinf(epsilon):
        return 0.0
    return 4.0 * s * math.sqrt(math.log(capacity) * math.log(1.0 / delta)) / epsilon
