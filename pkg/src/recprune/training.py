"""BPR training: uniform negative sampling with rejection, Adam under mask
constraints, checkpointing, and best-epoch selection."""

from __future__ import annotations

import json
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .data import InteractionGraph
from .embedding import EmbeddingTable, PruneMask
from .evaluation import RankingMetrics, evaluate_model

_REJECTION_ROUNDS = 64


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    learning_rate: float = 0.001
    l2_weight: float = 0.0001
    batch_size: int = 2048
    negatives_per_positive: int = 1
    sampler_seed: int = 0
    eval_every: int = 10  # validation cadence; the last epoch is always evaluated
    metric_for_selection: str = "recall"
    k: int = 20
    l2_full_table: bool = False  # literal whole-table ||X||^2 per step
    eval_block_size: int = 512

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate <= 0 or self.l2_weight < 0:
            raise ValueError("learning_rate must be positive, l2_weight non-negative")
        if min(self.batch_size, self.negatives_per_positive, self.eval_every, self.k) < 1:
            raise ValueError("batch_size, negatives_per_positive, eval_every, k must be >= 1")
        if self.metric_for_selection not in ("recall", "ndcg"):
            raise ValueError(f"unknown selection metric {self.metric_for_selection!r}")


@dataclass
class AdamState:
    """Adam moment matrices shaped like the table; masked coordinates stay
    exactly zero because their gradients are zeroed before the update."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, values: np.ndarray) -> "AdamState":
        return cls(m=np.zeros_like(values), v=np.zeros_like(values))

    def update(
        self,
        values: np.ndarray,
        grad: np.ndarray,
        mask_bits: np.ndarray | None,
        learning_rate: float,
    ) -> None:
        self.step += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * np.square(grad)
        m_hat = self.m / (1.0 - self.beta1 ** self.step)
        v_hat = self.v / (1.0 - self.beta2 ** self.step)
        delta = learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)
        if mask_bits is not None:
            delta *= mask_bits
        values -= delta


@dataclass
class TrainState:
    epoch: int
    adam: AdamState
    rng: np.random.Generator


def make_rng(*entropy: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(entropy)))


def derive_seed(base_seed: int, stream: int) -> int:
    """Stable derived integer seed for a sub-stream (e.g. one IMP iteration)."""
    return int(np.random.SeedSequence([base_seed, stream]).generate_state(1)[0])


def sample_batch(
    graph: InteractionGraph,
    batch_size: int,
    rng: np.random.Generator,
    negatives_per_positive: int = 1,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Uniform (user, pos-item) draws from the training edges plus rejection-
    sampled negatives j with (u, j) outside the user's training set."""
    edges = graph.edges
    if len(edges) == 0:
        raise ValueError("graph has no training edges")
    N = graph.num_items
    full_users = np.flatnonzero(graph.degrees[:graph.num_users] == N)
    if len(full_users):
        warnings.warn(
            f"{len(full_users)} users interact with every item; their edges are skipped",
            stacklevel=2,
        )
        keep = ~np.isin(edges[:, 0], full_users)
        edges = edges[keep]
        if len(edges) == 0:
            raise ValueError("all training edges belong to users with full item coverage")
    picks = rng.integers(0, len(edges), size=batch_size)
    users = edges[picks, 0]
    pos_items = edges[picks, 1]
    if negatives_per_positive > 1:
        users = np.repeat(users, negatives_per_positive)
        pos_items = np.repeat(pos_items, negatives_per_positive)
    neg_items = rng.integers(0, N, size=len(users))
    bad = np.flatnonzero(graph.has_train_edge(users, neg_items))
    for _ in range(_REJECTION_ROUNDS):
        if len(bad) == 0:
            break
        neg_items[bad] = rng.integers(0, N, size=len(bad))
        bad = bad[graph.has_train_edge(users[bad], neg_items[bad])]
    for a in bad:  # pathological users: sample the explicit complement
        allowed = np.setdiff1d(np.arange(N), graph.train_adjacency[users[a]], assume_unique=True)
        neg_items[a] = allowed[rng.integers(0, len(allowed))]
    return users, pos_items, neg_items


def bpr_loss(
    pos_scores: np.ndarray,
    neg_scores: np.ndarray,
    l2_weight: float = 0.0,
    reg_embeddings: np.ndarray | None = None,
) -> float:
    """Mean softplus(-(pos - neg)) plus the batch-normalized L2 penalty of the
    sampled triples' base embeddings. Stable for margins of any magnitude."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if pos.shape != neg.shape:
        raise ValueError("positive and negative score lists must have equal length")
    margin = pos - neg
    loss = float(np.mean(np.logaddexp(0.0, -margin)))
    if l2_weight and reg_embeddings is not None:
        loss += l2_weight * float(np.sum(np.square(reg_embeddings))) / margin.size
    return loss


def _scatter_add_rows(num_rows: int, rows: np.ndarray, contributions: np.ndarray) -> np.ndarray:
    """Deterministic scatter-add of row vectors (sparse accumulation matrix)."""
    n = len(rows)
    selector = sp.csr_matrix(
        (np.ones(n), (rows, np.arange(n))), shape=(num_rows, n)
    )
    return selector @ contributions


def bpr_loss_and_grad(
    model,
    values: np.ndarray,
    mask_bits: np.ndarray | None,
    num_users: int,
    users: np.ndarray,
    pos_items: np.ndarray,
    neg_items: np.ndarray,
    l2_weight: float,
    l2_full_table: bool = False,
) -> tuple[float, np.ndarray]:
    """Loss and the analytic full-table gradient for one batch of triples.

    The forward pass reads the masked table, and the returned gradient is
    multiplied by the mask, so pruned coordinates receive exactly zero.
    """
    base = values * mask_bits if mask_bits is not None else values
    output = model.output_table(base)
    u = np.asarray(users, dtype=np.int64)
    ip = num_users + np.asarray(pos_items, dtype=np.int64)
    ineg = num_users + np.asarray(neg_items, dtype=np.int64)
    pos = np.einsum("af,af->a", output[u], output[ip])
    neg = np.einsum("af,af->a", output[u], output[ineg])
    margin = pos - neg
    B = margin.size
    loss = float(np.mean(np.logaddexp(0.0, -margin)))

    coeff = (-expit(-margin) / B)[:, None]
    rows = np.concatenate([u, ip, ineg])
    contribs = np.concatenate([
        coeff * (output[ip] - output[ineg]),
        coeff * output[u],
        -coeff * output[u],
    ])
    grad_base = model.backward(_scatter_add_rows(output.shape[0], rows, contribs))

    if l2_weight:
        if l2_full_table:
            loss += l2_weight * float(np.sum(np.square(base)))
            grad_base = grad_base + (2.0 * l2_weight) * base
        else:
            loss += l2_weight * float(np.sum(np.square(base[rows]))) / B
            grad_base = grad_base + _scatter_add_rows(
                output.shape[0], rows, (2.0 * l2_weight / B) * base[rows]
            )
    if mask_bits is not None:
        grad_base = grad_base * mask_bits
    return loss, grad_base


def train_epoch(
    model,
    table: EmbeddingTable,
    mask: PruneMask,
    graph: InteractionGraph,
    config: TrainConfig,
    state: TrainState,
) -> float:
    """One pass of ceil(|E_train| / batch_size) sampled batches; returns the
    mean batch loss."""
    num_batches = math.ceil(len(graph.edges) / config.batch_size)
    total = 0.0
    for _ in range(num_batches):
        users, pos_items, neg_items = sample_batch(
            graph, config.batch_size, state.rng, config.negatives_per_positive
        )
        loss, grad = bpr_loss_and_grad(
            model,
            table.values,
            mask.bits,
            table.num_users,
            users,
            pos_items,
            neg_items,
            config.l2_weight,
            config.l2_full_table,
        )
        if not np.isfinite(loss):
            raise RuntimeError(
                f"non-finite loss {loss} at epoch {state.epoch + 1} "
                f"(lr={config.learning_rate}, batch={config.batch_size})"
            )
        state.adam.update(table.values, grad, mask.bits, config.learning_rate)
        total += loss
    state.epoch += 1
    return total / num_batches


@dataclass(frozen=True)
class EpochEval:
    epoch: int
    loss: float
    recall_at_k: float
    ndcg_at_k: float
    seconds: float


@dataclass
class TrainResult:
    best_values: np.ndarray
    best_epoch: int
    best_validation: RankingMetrics
    history: list[EpochEval]
    state: TrainState
    epochs_run: int


def save_checkpoint(
    path: str | Path,
    table: EmbeddingTable,
    mask: PruneMask,
    state: TrainState,
    best_values: np.ndarray,
    best_epoch: int,
    best_metric: float,
    history: list[EpochEval],
    config_hash: str = "",
) -> None:
    """Resumable training checkpoint: table, mask, Adam state, epoch, RNG state."""
    np.savez(
        path,
        values=table.values,
        mask_packed=np.packbits(mask.bits),
        mask_shape=np.asarray(mask.bits.shape, dtype=np.int64),
        adam_m=state.adam.m,
        adam_v=state.adam.v,
        adam_step=np.asarray(state.adam.step, dtype=np.int64),
        epoch=np.asarray(state.epoch, dtype=np.int64),
        rng_state=np.asarray(json.dumps(state.rng.bit_generator.state)),
        best_values=best_values,
        best_epoch=np.asarray(best_epoch, dtype=np.int64),
        best_metric=np.asarray(best_metric, dtype=np.float64),
        history=np.asarray(json.dumps([list(row.__dict__.values()) for row in history])),
        config_hash=np.asarray(config_hash),
    )


def load_checkpoint(path: str | Path) -> dict:
    with np.load(path) as blob:
        shape = tuple(int(x) for x in blob["mask_shape"])
        bits = np.unpackbits(blob["mask_packed"], count=shape[0] * shape[1]).reshape(shape)
        rng = np.random.default_rng()
        rng.bit_generator.state = json.loads(str(blob["rng_state"]))
        return {
            "values": blob["values"].copy(),
            "mask": PruneMask(bits=bits.astype(np.uint8)),
            "adam_m": blob["adam_m"].copy(),
            "adam_v": blob["adam_v"].copy(),
            "adam_step": int(blob["adam_step"]),
            "epoch": int(blob["epoch"]),
            "rng": rng,
            "best_values": blob["best_values"].copy(),
            "best_epoch": int(blob["best_epoch"]),
            "best_metric": float(blob["best_metric"]),
            "history": [EpochEval(*row) for row in json.loads(str(blob["history"]))],
            "config_hash": str(blob["config_hash"]),
        }


def train_to_best(
    model,
    table: EmbeddingTable,
    mask: PruneMask | None,
    graph: InteractionGraph,
    config: TrainConfig,
    checkpoint_path: str | Path | None = None,
    checkpoint_every: int | None = None,
    stop_after_epoch: int | None = None,
    resume: bool = False,
    config_hash: str = "",
) -> TrainResult:
    """Run the full epoch budget, tracking the best validation snapshot.

    The table is left at its final-epoch state (used for magnitude pruning);
    the best-validation parameters are returned separately. Ties on the
    selection metric keep the earliest epoch.
    """
    config.validate()
    if mask is None:
        mask = PruneMask.all_ones(table.values.shape)
    metric_attr = "recall_at_k" if config.metric_for_selection == "recall" else "ndcg_at_k"

    # hard-zero contract: pruned coordinates are zeroed up front and stay zero
    table.values *= mask.bits
    state = TrainState(
        epoch=0,
        adam=AdamState.zeros_like(table.values),
        rng=make_rng(config.sampler_seed),
    )
    best_values = table.values.copy()
    best_epoch = 0
    best_metric = -np.inf
    history: list[EpochEval] = []

    if resume and checkpoint_path is not None and Path(checkpoint_path).exists():
        ckpt = load_checkpoint(checkpoint_path)
        table.values[...] = ckpt["values"]
        state.adam.m[...] = ckpt["adam_m"]
        state.adam.v[...] = ckpt["adam_v"]
        state.adam.step = ckpt["adam_step"]
        state.epoch = ckpt["epoch"]
        state.rng = ckpt["rng"]
        best_values = ckpt["best_values"]
        best_epoch = ckpt["best_epoch"]
        best_metric = ckpt["best_metric"]
        history = ckpt["history"]

    started = time.perf_counter()
    if config.epochs == 0:
        metrics = evaluate_model(
            model, table.values, mask, graph, "validation", config.k, config.eval_block_size
        )
        history.append(EpochEval(0, math.nan, metrics.recall_at_k, metrics.ndcg_at_k, 0.0))
        return TrainResult(best_values, 0, metrics, history, state, 0)

    for epoch in range(state.epoch + 1, config.epochs + 1):
        loss = train_epoch(model, table, mask, graph, config, state)
        if epoch % config.eval_every == 0 or epoch == config.epochs:
            metrics = evaluate_model(
                model, table.values, mask, graph, "validation", config.k, config.eval_block_size
            )
            history.append(
                EpochEval(
                    epoch, loss, metrics.recall_at_k, metrics.ndcg_at_k,
                    time.perf_counter() - started,
                )
            )
            value = getattr(metrics, metric_attr)
            if value > best_metric:
                best_metric = value
                best_epoch = epoch
                best_values = table.values.copy()
        if checkpoint_path is not None and checkpoint_every and epoch % checkpoint_every == 0:
            save_checkpoint(
                checkpoint_path, table, mask, state,
                best_values, best_epoch, best_metric, history, config_hash,
            )
        if stop_after_epoch is not None and epoch >= stop_after_epoch:
            break

    best_validation = evaluate_model(
        model, best_values, mask, graph, "validation", config.k, config.eval_block_size
    )
    return TrainResult(best_values, best_epoch, best_validation, history, state, state.epoch)
