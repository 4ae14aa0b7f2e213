"""Interaction records, deterministic per-user splits, and bipartite graph construction."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

MANIFEST_SCHEMA = 1
DEFAULT_RATIO = (0.7, 0.1, 0.2)
MIN_SPLITTABLE = 3  # users with fewer interactions go entirely to training


class InteractionDataError(ValueError):
    """Malformed interaction file or inconsistent split input."""


@dataclass(frozen=True)
class RawInteractions:
    """Deduplicated (user, item) pairs re-indexed to contiguous 0-based IDs.

    ``user_ids[k]`` / ``item_ids[k]`` hold the original file ID that was
    mapped to internal index ``k``.
    """

    edges: np.ndarray  # (E, 2) int64, sorted by (user, item)
    num_users: int
    num_items: int
    user_ids: np.ndarray
    item_ids: np.ndarray


def load_interactions(path: str | Path, format: str = "edge-list") -> RawInteractions:
    """Read an interaction file and re-index IDs to contiguous ranges.

    Supported formats: ``edge-list`` ("user item" per line) and
    ``adjacency-list`` ("user item item ..." per line). Duplicate pairs are
    dropped. Raises :class:`InteractionDataError` with the offending line
    number on malformed input.
    """
    if format not in ("edge-list", "adjacency-list"):
        raise ValueError(f"unknown interaction format: {format!r}")
    path = Path(path)
    pairs: list[tuple[int, int]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens:
                continue
            try:
                values = [int(tok) for tok in tokens]
            except ValueError as exc:
                raise InteractionDataError(
                    f"{path}: line {lineno}: non-integer token"
                ) from exc
            if min(values) < 0:
                raise InteractionDataError(
                    f"{path}: line {lineno}: negative ID"
                )
            if format == "edge-list":
                if len(values) != 2:
                    raise InteractionDataError(
                        f"{path}: line {lineno}: expected 'user item', got {len(values)} tokens"
                    )
                pairs.append((values[0], values[1]))
            else:
                user = values[0]
                pairs.extend((user, item) for item in values[1:])
    if not pairs:
        raise InteractionDataError(f"{path}: no interactions found")
    arr = np.asarray(pairs, dtype=np.int64)
    user_ids, u_idx = np.unique(arr[:, 0], return_inverse=True)
    item_ids, i_idx = np.unique(arr[:, 1], return_inverse=True)
    edges = np.unique(np.stack([u_idx, i_idx], axis=1), axis=0)
    return RawInteractions(
        edges=edges,
        num_users=int(len(user_ids)),
        num_items=int(len(item_ids)),
        user_ids=user_ids,
        item_ids=item_ids,
    )


def save_id_map(original_ids: np.ndarray, path: str | Path) -> None:
    """Persist an "original_id<TAB>internal_index" mapping file."""
    with open(path, "w", encoding="utf-8") as fh:
        for idx, orig in enumerate(np.asarray(original_ids)):
            fh.write(f"{int(orig)}\t{idx}\n")


def load_id_map(path: str | Path) -> np.ndarray:
    """Load a mapping file back into an original-ID array (indexed by internal index)."""
    originals = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            orig, idx = line.split("\t")
            if int(idx) != len(originals):
                raise InteractionDataError(f"{path}: line {lineno}: non-contiguous index")
            originals.append(int(orig))
    return np.asarray(originals, dtype=np.int64)


@dataclass(frozen=True)
class DatasetSplit:
    """Disjoint train/validation/test edge sets from a per-user shuffled cut."""

    num_users: int
    num_items: int
    train: np.ndarray  # (n, 2) int64, sorted by (user, item)
    validation: np.ndarray
    test: np.ndarray
    seed: int
    ratio: tuple[float, float, float]
    forced_train_users: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))

    def edges_of(self, which: str) -> np.ndarray:
        if which not in ("train", "validation", "test"):
            raise ValueError(f"unknown split name: {which!r}")
        return getattr(self, which)

    @property
    def total_edges(self) -> int:
        return len(self.train) + len(self.validation) + len(self.test)


def _sorted_edges(edges: list[tuple[int, int]] | np.ndarray) -> np.ndarray:
    arr = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if len(arr) == 0:
        return arr
    order = np.lexsort((arr[:, 1], arr[:, 0]))
    return arr[order]


def split_dataset(
    edges: np.ndarray,
    ratio: tuple[float, float, float] = DEFAULT_RATIO,
    seed: int = 0,
    num_users: int | None = None,
    num_items: int | None = None,
) -> DatasetSplit:
    """Per-user shuffled partition of the edge set, deterministic for a fixed seed.

    Each user's items are shuffled, then cut so validation gets
    ``floor(r_val * n)`` and test ``floor(r_test * n)`` items (min 1 each when
    the user has >= 3 interactions and the ratio component is positive);
    the remainder trains. Users with < 3 interactions go entirely to training
    and are recorded in ``forced_train_users``.
    """
    edges = np.unique(np.asarray(edges, dtype=np.int64).reshape(-1, 2), axis=0)
    if len(edges) == 0:
        raise InteractionDataError("cannot split an empty edge set")
    r = np.asarray(ratio, dtype=np.float64)
    if r.shape != (3,) or np.any(r < 0) or r.sum() <= 0:
        raise ValueError(f"ratio must be three non-negative values, got {ratio!r}")
    r = r / r.sum()
    if num_users is None:
        num_users = int(edges[:, 0].max()) + 1
    if num_items is None:
        num_items = int(edges[:, 1].max()) + 1

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    train_parts: list[np.ndarray] = []
    valid_parts: list[np.ndarray] = []
    test_parts: list[np.ndarray] = []
    forced: list[int] = []

    # edges are sorted by user, so per-user groups are contiguous
    bounds = np.searchsorted(edges[:, 0], np.arange(num_users + 1))
    for user in range(num_users):
        user_edges = edges[bounds[user]:bounds[user + 1]]
        n = len(user_edges)
        if n == 0:
            continue
        if n < MIN_SPLITTABLE:
            train_parts.append(user_edges)
            forced.append(user)
            continue
        n_valid = int(np.floor(r[1] * n))
        if r[1] > 0:
            n_valid = max(1, n_valid)
        n_test = int(np.floor(r[2] * n))
        if r[2] > 0:
            n_test = max(1, n_test)
        # at least one training interaction per user, shrinking test then valid
        while n - n_valid - n_test < 1:
            if n_test > 1 or (n_test == 1 and n_valid == 0):
                n_test -= 1
            else:
                n_valid -= 1
        perm = rng.permutation(n)
        shuffled = user_edges[perm]
        n_train = n - n_valid - n_test
        train_parts.append(shuffled[:n_train])
        valid_parts.append(shuffled[n_train:n_train + n_valid])
        test_parts.append(shuffled[n_train + n_valid:])

    def collect(parts: list[np.ndarray]) -> np.ndarray:
        if not parts:
            return np.empty((0, 2), dtype=np.int64)
        return _sorted_edges(np.concatenate(parts, axis=0))

    return DatasetSplit(
        num_users=num_users,
        num_items=num_items,
        train=collect(train_parts),
        validation=collect(valid_parts),
        test=collect(test_parts),
        seed=seed,
        ratio=(float(r[0]), float(r[1]), float(r[2])),
        forced_train_users=np.asarray(forced, dtype=np.int64),
    )


def save_split_manifest(split: DatasetSplit, path: str | Path) -> None:
    """Write the split as a line-oriented manifest: a JSON header plus one
    "user<TAB>item<TAB>split" record per edge."""
    header = {
        "schema": MANIFEST_SCHEMA,
        "seed": split.seed,
        "ratio": list(split.ratio),
        "num_users": split.num_users,
        "num_items": split.num_items,
        "counts": {
            "train": int(len(split.train)),
            "validation": int(len(split.validation)),
            "test": int(len(split.test)),
        },
        "forced_train_users": [int(u) for u in split.forced_train_users],
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("#" + json.dumps(header, sort_keys=True) + "\n")
        for name in ("train", "validation", "test"):
            for user, item in split.edges_of(name):
                fh.write(f"{user}\t{item}\t{name}\n")


def load_split_manifest(path: str | Path) -> DatasetSplit:
    """Reconstruct a :class:`DatasetSplit` from its manifest file."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        if not first.startswith("#"):
            raise InteractionDataError(f"{path}: missing manifest header")
        header = json.loads(first[1:])
        parts: dict[str, list[tuple[int, int]]] = {"train": [], "validation": [], "test": []}
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                user, item, name = line.split()
                parts[name].append((int(user), int(item)))
            except (ValueError, KeyError) as exc:
                raise InteractionDataError(f"{path}: line {lineno}: bad record") from exc
    split = DatasetSplit(
        num_users=int(header["num_users"]),
        num_items=int(header["num_items"]),
        train=_sorted_edges(parts["train"]),
        validation=_sorted_edges(parts["validation"]),
        test=_sorted_edges(parts["test"]),
        seed=int(header["seed"]),
        ratio=tuple(header["ratio"]),
        forced_train_users=np.asarray(header.get("forced_train_users", []), dtype=np.int64),
    )
    for name in ("train", "validation", "test"):
        if len(split.edges_of(name)) != header["counts"][name]:
            raise InteractionDataError(f"{path}: {name} count mismatch with header")
    return split


def interaction_density(num_edges: int, num_users: int, num_items: int) -> float:
    """Dataset density |E| / (M * N)."""
    return num_edges / (num_users * num_items)


@dataclass(frozen=True)
class InteractionGraph:
    """Immutable bipartite user-item graph over the training edges.

    Node rows 0..M-1 are users, rows M..M+N-1 are items. ``interaction_matrix``
    is the M x N 0/1 training matrix R; ``adjacency`` is the symmetric
    (M+N) x (M+N) block matrix [[0, R], [R^T, 0]]; ``degrees[i]`` counts the
    nonzeros of row i of the adjacency.
    """

    num_users: int
    num_items: int
    split: DatasetSplit
    edges: np.ndarray  # training edges, (E, 2) int64 sorted
    train_adjacency: tuple[np.ndarray, ...]  # per-user sorted training items
    interaction_matrix: sp.csr_matrix
    adjacency: sp.csr_matrix
    degrees: np.ndarray
    validation_items: tuple[np.ndarray, ...]
    test_items: tuple[np.ndarray, ...]
    train_edge_codes: np.ndarray  # sorted user*N+item codes, for membership tests

    @property
    def num_nodes(self) -> int:
        return self.num_users + self.num_items

    @property
    def density(self) -> float:
        return interaction_density(self.split.total_edges, self.num_users, self.num_items)

    def held_out_items(self, which: str) -> tuple[np.ndarray, ...]:
        if which == "validation":
            return self.validation_items
        if which == "test":
            return self.test_items
        raise ValueError(f"no held-out split named {which!r}")

    def has_train_edge(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        """Vectorized membership test for (user, item) pairs against training edges."""
        codes = np.asarray(users, dtype=np.int64) * self.num_items + np.asarray(items, dtype=np.int64)
        pos = np.searchsorted(self.train_edge_codes, codes)
        pos = np.minimum(pos, len(self.train_edge_codes) - 1)
        return self.train_edge_codes[pos] == codes


def _per_user_items(edges: np.ndarray, num_users: int) -> tuple[np.ndarray, ...]:
    out: list[np.ndarray] = []
    bounds = np.searchsorted(edges[:, 0], np.arange(num_users + 1))
    for user in range(num_users):
        out.append(np.ascontiguousarray(edges[bounds[user]:bounds[user + 1], 1]))
    return tuple(out)


def build_graph(split: DatasetSplit) -> InteractionGraph:
    """Assemble R, the block adjacency A, degree vector, and neighbor lists
    from the training edges of a split."""
    M, N = split.num_users, split.num_items
    tr = split.train
    if len(tr) == 0:
        raise InteractionDataError("split has no training edges")
    data = np.ones(len(tr), dtype=np.float64)
    R = sp.csr_matrix((data, (tr[:, 0], tr[:, 1])), shape=(M, N))
    A = sp.bmat([[None, R], [R.T, None]], format="csr", dtype=np.float64)
    degrees = np.diff(A.indptr).astype(np.int64)
    codes = np.sort(tr[:, 0] * N + tr[:, 1])
    return InteractionGraph(
        num_users=M,
        num_items=N,
        split=split,
        edges=tr,
        train_adjacency=_per_user_items(tr, M),
        interaction_matrix=R,
        adjacency=A,
        degrees=degrees,
        validation_items=_per_user_items(split.validation, M),
        test_items=_per_user_items(split.test, M),
        train_edge_codes=codes,
    )
