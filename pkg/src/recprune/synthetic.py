"""Deterministic planted-preference interaction generator for desk-scale runs.

Users and items are assigned to matching groups; most of a user's
interactions land inside the user's own item block, the rest are uniform
noise. The resulting edge set has learnable low-rank structure, which makes
small training runs informative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SyntheticConfig:
    num_users: int = 400
    num_items: int = 800
    num_groups: int = 8
    interactions_per_user: int = 30
    noise: float = 0.2  # probability an interaction ignores the planted group
    seed: int = 0

    def validate(self) -> None:
        if min(self.num_users, self.num_items, self.num_groups, self.interactions_per_user) < 1:
            raise ValueError("synthetic sizes must be positive")
        if self.num_groups > self.num_items:
            raise ValueError("need at least one item per group")
        if not 0.0 <= self.noise <= 1.0:
            raise ValueError("noise must be in [0, 1]")


def generate_planted_interactions(config: SyntheticConfig) -> np.ndarray:
    """Return a deduplicated (E, 2) edge array with planted block structure."""
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    M, N, G = config.num_users, config.num_items, config.num_groups
    # contiguous item blocks per group; users assigned round-robin
    block_bounds = np.linspace(0, N, G + 1).astype(np.int64)
    edges: list[np.ndarray] = []
    for user in range(M):
        group = user % G
        lo, hi = block_bounds[group], block_bounds[group + 1]
        mean = config.interactions_per_user
        count = int(rng.integers(max(3, mean // 2), mean + mean // 2 + 1))
        in_block = int(rng.binomial(count, 1.0 - config.noise))
        in_block = min(in_block, hi - lo)
        chosen = rng.choice(hi - lo, size=in_block, replace=False) + lo
        uniform = rng.integers(0, N, size=count - in_block)
        items = np.unique(np.concatenate([chosen, uniform]))
        while len(items) < 3:  # keep every user splittable
            items = np.unique(np.concatenate([items, rng.integers(0, N, size=3)]))
        user_edges = np.stack([np.full(len(items), user, dtype=np.int64), items], axis=1)
        edges.append(user_edges)
    return np.concatenate(edges, axis=0)
