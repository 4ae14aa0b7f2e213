"""Dense embedding table with a frozen init snapshot, binary prune masks,
rewinding, and sparse CSR export."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
import scipy.sparse as sp

if TYPE_CHECKING:
    from .evaluation import RankingMetrics

INIT_STD = 0.01
CSR_MAGIC = b"RPCS"
CSR_VERSION = 1


class SparseArtifactError(RuntimeError):
    """Corrupt or inconsistent CSR artifact file."""


@dataclass
class EmbeddingTable:
    """(M+N) x F parameter matrix; rows 0..M-1 are users, M..M+N-1 items.

    ``init_snapshot`` is written once at creation, kept read-only, and used
    for rewinding.
    """

    values: np.ndarray
    init_snapshot: np.ndarray
    num_users: int
    num_items: int
    embedding_size: int
    init_seed: int

    @property
    def num_rows(self) -> int:
        return self.num_users + self.num_items

    def fresh_copy(self) -> "EmbeddingTable":
        """Independent table starting from the same init snapshot."""
        return EmbeddingTable(
            values=self.init_snapshot.copy(),
            init_snapshot=self.init_snapshot,
            num_users=self.num_users,
            num_items=self.num_items,
            embedding_size=self.embedding_size,
            init_seed=self.init_seed,
        )


def init_table(num_users: int, num_items: int, embedding_size: int, seed: int) -> EmbeddingTable:
    """Draw a fresh table i.i.d. Normal(0, 0.01^2), deterministic per seed."""
    if min(num_users, num_items, embedding_size) < 1:
        raise ValueError("table dimensions must be positive")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    values = rng.normal(0.0, INIT_STD, size=(num_users + num_items, embedding_size))
    snapshot = values.copy()
    snapshot.setflags(write=False)
    return EmbeddingTable(
        values=values,
        init_snapshot=snapshot,
        num_users=num_users,
        num_items=num_items,
        embedding_size=embedding_size,
        init_seed=seed,
    )


@dataclass
class PruneMask:
    """Binary keep/prune matrix aligned with a table; 0 marks a pruned entry.

    ``pruned_at[r, c]`` optionally records the pruning iteration that zeroed
    the entry (-1 while alive).
    """

    bits: np.ndarray  # uint8, same shape as the table
    pruned_at: np.ndarray | None = None

    @classmethod
    def all_ones(cls, shape: tuple[int, int], track_provenance: bool = False) -> "PruneMask":
        bits = np.ones(shape, dtype=np.uint8)
        pruned_at = np.full(shape, -1, dtype=np.int32) if track_provenance else None
        return cls(bits=bits, pruned_at=pruned_at)

    @property
    def nnz(self) -> int:
        return int(self.bits.sum())

    @property
    def sparsity(self) -> float:
        return 1.0 - self.nnz / self.bits.size

    def copy(self) -> "PruneMask":
        return PruneMask(
            bits=self.bits.copy(),
            pruned_at=None if self.pruned_at is None else self.pruned_at.copy(),
        )


@dataclass
class TicketRecord:
    """One entry of a lottery-ticket set: a mask plus its provenance and
    (once retrained) its held-out results."""

    mask: PruneMask
    sparsity: float
    imp_iteration: int
    theoretical_sparsity: float | None = None
    retrain_metrics: "RankingMetrics | None" = None
    retrain_best_epoch: int | None = None
    validation_metrics: "RankingMetrics | None" = None
    is_winner: bool | None = None
    accuracy_winner: bool | None = None

    def __post_init__(self) -> None:
        if abs(self.sparsity - self.mask.sparsity) > 1e-12:
            raise ValueError(
                f"ticket sparsity {self.sparsity} disagrees with mask {self.mask.sparsity}"
            )


def apply_mask(table: EmbeddingTable | np.ndarray, mask: PruneMask) -> np.ndarray:
    """Entry-wise product M (*) X; masked entries read as exactly 0.0."""
    values = table.values if isinstance(table, EmbeddingTable) else np.asarray(table)
    if values.shape != mask.bits.shape:
        raise ValueError(f"shape mismatch: table {values.shape} vs mask {mask.bits.shape}")
    return values * mask.bits


def rewind(table: EmbeddingTable) -> None:
    """Reset the table to its initialization snapshot, bitwise."""
    table.values[...] = table.init_snapshot


@dataclass(frozen=True)
class SparsityStats:
    f_user_max: int  # max nonzero count over user rows
    f_item_max: int  # max nonzero count over item rows
    nnz: int
    sparsity: float
    dense_bytes: int
    csr_bytes: int


def csr_byte_size(num_rows: int, nnz: int) -> int:
    """int64 row pointers + int32 column indices + float64 values."""
    return 8 * (num_rows + 1) + 4 * nnz + 8 * nnz


def sparsity_stats(mask: PruneMask, num_users: int) -> SparsityStats:
    """Effective sparse embedding sizes and memory footprint of a mask."""
    row_nnz = mask.bits.sum(axis=1, dtype=np.int64)
    num_rows = mask.bits.shape[0]
    nnz = int(row_nnz.sum())
    return SparsityStats(
        f_user_max=int(row_nnz[:num_users].max()),
        f_item_max=int(row_nnz[num_users:].max()),
        nnz=nnz,
        sparsity=1.0 - nnz / mask.bits.size,
        dense_bytes=8 * mask.bits.size,
        csr_bytes=csr_byte_size(num_rows, nnz),
    )


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def export_sparse(table: EmbeddingTable, mask: PruneMask, path: str | Path) -> Path:
    """Write the masked table as a CSR artifact: a binary header {M, N, F, nnz},
    the three flat arrays little-endian, and a text sidecar with checksums.

    The CSR pattern follows the mask bits, so nnz always equals the mask's
    nonzero count even if a kept value happens to be 0.0.
    """
    path = Path(path)
    masked = apply_mask(table, mask)
    pattern = sp.csr_matrix(mask.bits)
    row_ptr = pattern.indptr.astype("<i8")
    col_idx = pattern.indices.astype("<i4")
    # np.nonzero walks row-major, matching canonical CSR data order
    data = masked[mask.bits.astype(bool)].astype("<f8")

    header = struct.pack(
        "<4sIQQQQ",
        CSR_MAGIC,
        CSR_VERSION,
        table.num_users,
        table.num_items,
        table.embedding_size,
        len(data),
    )
    payload = header + row_ptr.tobytes() + col_idx.tobytes() + data.tobytes()
    with open(path, "wb") as fh:
        fh.write(payload)
    sidecar = {
        "schema": CSR_VERSION,
        "row_ptr_sha256": _sha256(row_ptr.tobytes()),
        "col_idx_sha256": _sha256(col_idx.tobytes()),
        "values_sha256": _sha256(data.tobytes()),
        "file_sha256": _sha256(payload),
        "file_bytes": len(payload),
    }
    with open(_sidecar_path(path), "w", encoding="utf-8") as fh:
        for key in sorted(sidecar):
            fh.write(f"{key}\t{sidecar[key]}\n")
    return path


def _sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".checksums")


@dataclass(frozen=True)
class SparseArtifact:
    num_users: int
    num_items: int
    embedding_size: int
    matrix: sp.csr_matrix  # (M+N) x F

    def to_dense(self) -> np.ndarray:
        return np.asarray(self.matrix.todense())


def import_sparse(path: str | Path) -> SparseArtifact:
    """Read a CSR artifact back, verifying the sidecar checksums."""
    path = Path(path)
    with open(path, "rb") as fh:
        payload = fh.read()
    if len(payload) < 44 or payload[:4] != CSR_MAGIC:
        raise SparseArtifactError(f"{path}: not a CSR artifact")
    magic, version, m, n, f, nnz = struct.unpack_from("<4sIQQQQ", payload, 0)
    if version != CSR_VERSION:
        raise SparseArtifactError(f"{path}: unsupported version {version}")
    offset = struct.calcsize("<4sIQQQQ")
    rows = m + n
    row_ptr = np.frombuffer(payload, dtype="<i8", count=rows + 1, offset=offset)
    offset += row_ptr.nbytes
    col_idx = np.frombuffer(payload, dtype="<i4", count=nnz, offset=offset)
    offset += col_idx.nbytes
    data = np.frombuffer(payload, dtype="<f8", count=nnz, offset=offset)

    sidecar: dict[str, str] = {}
    with open(_sidecar_path(path), encoding="utf-8") as fh:
        for line in fh:
            key, value = line.rstrip("\n").split("\t")
            sidecar[key] = value
    checks = {
        "row_ptr_sha256": row_ptr.tobytes(),
        "col_idx_sha256": col_idx.tobytes(),
        "values_sha256": data.tobytes(),
        "file_sha256": payload,
    }
    for key, blob in checks.items():
        if sidecar.get(key) != _sha256(blob):
            raise SparseArtifactError(f"{path}: checksum mismatch for {key}")
    matrix = sp.csr_matrix(
        (data.astype(np.float64), col_idx.astype(np.int64), row_ptr.astype(np.int64)),
        shape=(rows, f),
    )
    return SparseArtifact(num_users=m, num_items=n, embedding_size=f, matrix=matrix)


def save_snapshot(table: EmbeddingTable, path: str | Path) -> None:
    """Persist the init snapshot (with shape and seed) for exact rewinding."""
    np.savez(
        path,
        values=table.init_snapshot,
        num_users=table.num_users,
        num_items=table.num_items,
        embedding_size=table.embedding_size,
        init_seed=table.init_seed,
    )


def load_snapshot(path: str | Path) -> EmbeddingTable:
    with np.load(path) as blob:
        snapshot = blob["values"].copy()
        snapshot.setflags(write=False)
        return EmbeddingTable(
            values=snapshot.copy(),
            init_snapshot=snapshot,
            num_users=int(blob["num_users"]),
            num_items=int(blob["num_items"]),
            embedding_size=int(blob["embedding_size"]),
            init_seed=int(blob["init_seed"]),
        )


def mask_digest(mask: PruneMask) -> str:
    """Stable content hash of a mask (bit pattern plus shape)."""
    shape = json.dumps(mask.bits.shape).encode()
    return _sha256(shape + np.packbits(mask.bits).tobytes())


def save_mask(
    mask: PruneMask,
    path: str | Path,
    iteration: int,
    theoretical_sparsity: float,
    parent_digest: str = "",
) -> None:
    """Persist a mask artifact: bit-packed matrix plus iteration/sparsity
    metadata and the parent mask's checksum."""
    arrays = {
        "packed": np.packbits(mask.bits),
        "shape": np.asarray(mask.bits.shape, dtype=np.int64),
        "iteration": np.asarray(iteration, dtype=np.int64),
        "theoretical_sparsity": np.asarray(theoretical_sparsity, dtype=np.float64),
        "measured_sparsity": np.asarray(mask.sparsity, dtype=np.float64),
        "parent_digest": np.asarray(parent_digest),
        "digest": np.asarray(mask_digest(mask)),
    }
    if mask.pruned_at is not None:
        arrays["pruned_at"] = mask.pruned_at
    np.savez(path, **arrays)


def load_mask(path: str | Path) -> tuple[PruneMask, dict]:
    with np.load(path) as blob:
        shape = tuple(int(x) for x in blob["shape"])
        bits = np.unpackbits(blob["packed"], count=shape[0] * shape[1]).reshape(shape)
        mask = PruneMask(
            bits=bits.astype(np.uint8),
            pruned_at=blob["pruned_at"].copy() if "pruned_at" in blob else None,
        )
        meta = {
            "iteration": int(blob["iteration"]),
            "theoretical_sparsity": float(blob["theoretical_sparsity"]),
            "measured_sparsity": float(blob["measured_sparsity"]),
            "parent_digest": str(blob["parent_digest"]),
            "digest": str(blob["digest"]),
        }
    if meta["digest"] != mask_digest(mask):
        raise SparseArtifactError(f"{path}: mask digest mismatch")
    return mask, meta
