"""All-ranking top-K evaluation: Recall@K and NDCG@K over held-out items."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .data import InteractionGraph
from .embedding import EmbeddingTable, PruneMask, apply_mask

DEFAULT_K = 20


@dataclass(frozen=True)
class RankingMetrics:
    """Averages over users with at least one held-out item; per-user values
    are retained for significance checks."""

    recall_at_k: float
    ndcg_at_k: float
    k: int
    users_evaluated: int
    per_user_recall: np.ndarray
    per_user_ndcg: np.ndarray
    user_indices: np.ndarray


def rank_items(scores: np.ndarray, train_items: np.ndarray, k: int) -> np.ndarray:
    """Top-k item indices by score, excluding training items, ties broken by
    ascending item index."""
    scores = np.array(scores, dtype=np.float64, copy=True)
    train_items = np.asarray(train_items, dtype=np.int64)
    if len(train_items):
        scores[train_items] = -np.inf
    remaining = scores.size - len(train_items)
    if k > remaining:
        warnings.warn(
            f"k={k} exceeds the {remaining} rankable items; returning all of them",
            stacklevel=2,
        )
        k = remaining
    # stable sort on negated scores: descending score, ties by ascending index
    order = np.argsort(-scores, kind="stable")
    return order[:k]


def recall_at_k(top_k: np.ndarray, test_items: np.ndarray) -> float:
    """|topK intersect test| / |test|."""
    test_items = np.asarray(test_items, dtype=np.int64)
    if len(test_items) == 0:
        raise ValueError("recall undefined for an empty test set")
    hits = np.isin(top_k, test_items).sum()
    return float(hits) / len(test_items)


def ndcg_at_k(top_k: np.ndarray, test_items: np.ndarray, k: int | None = None) -> float:
    """Binary-relevance NDCG with the ideal DCG truncated at min(|test|, k)."""
    test_items = np.asarray(test_items, dtype=np.int64)
    if len(test_items) == 0:
        raise ValueError("ndcg undefined for an empty test set")
    if k is None:
        k = len(top_k)
    hit_positions = np.nonzero(np.isin(top_k, test_items))[0] + 1  # 1-based ranks
    dcg = float(np.sum(1.0 / np.log2(hit_positions + 1)))
    ideal_ranks = np.arange(1, min(len(test_items), k) + 1)
    idcg = float(np.sum(1.0 / np.log2(ideal_ranks + 1)))
    return dcg / idcg


def evaluate_model(
    model,
    table: EmbeddingTable | np.ndarray,
    mask: PruneMask | None,
    graph: InteractionGraph,
    split: str = "validation",
    k: int = DEFAULT_K,
    block_size: int = 512,
) -> RankingMetrics:
    """Full-ranking evaluation of every user with held-out items in ``split``.

    Scoring is blocked over users to bound peak memory; training items are
    always excluded from the candidate ranking, held-out items of the other
    split are not.
    """
    values = table.values if isinstance(table, EmbeddingTable) else np.asarray(table)
    base = values if mask is None else apply_mask(values, mask)
    output = model.output_table(base)
    M = graph.num_users
    held_out = graph.held_out_items(split)
    eval_users = np.asarray([u for u in range(M) if len(held_out[u])], dtype=np.int64)
    if len(eval_users) == 0:
        raise ValueError(f"no users with held-out items in split {split!r}")

    item_vectors = output[M:]
    recalls = np.empty(len(eval_users))
    ndcgs = np.empty(len(eval_users))
    for start in range(0, len(eval_users), block_size):
        block = eval_users[start:start + block_size]
        scores = output[block] @ item_vectors.T
        for offset, user in enumerate(block):
            top = rank_items(scores[offset], graph.train_adjacency[user], k)
            recalls[start + offset] = recall_at_k(top, held_out[user])
            ndcgs[start + offset] = ndcg_at_k(top, held_out[user], k)
    return RankingMetrics(
        recall_at_k=float(recalls.mean()),
        ndcg_at_k=float(ndcgs.mean()),
        k=k,
        users_evaluated=len(eval_users),
        per_user_recall=recalls,
        per_user_ndcg=ndcgs,
        user_indices=eval_users,
    )
