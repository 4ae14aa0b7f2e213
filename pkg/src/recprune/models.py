"""Scoring backbones: MF dot-product scoring and LightGCN propagation with
layer combination."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .data import InteractionGraph


@dataclass(frozen=True)
class LightGCNConfig:
    """Layer count K and combination coefficients alpha_0..alpha_K.

    Coefficients default to all ones; ``mean_combination`` gives the
    1/(K+1) alternative.
    """

    num_layers: int = 3
    layer_coefficients: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.num_layers < 0:
            raise ValueError("num_layers must be >= 0")
        if self.layer_coefficients is not None:
            if len(self.layer_coefficients) != self.num_layers + 1:
                raise ValueError(
                    f"need {self.num_layers + 1} coefficients, got {len(self.layer_coefficients)}"
                )
            if not all(np.isfinite(c) for c in self.layer_coefficients):
                raise ValueError("coefficients must be finite")

    @classmethod
    def mean_combination(cls, num_layers: int = 3) -> "LightGCNConfig":
        coeff = (1.0 / (num_layers + 1),) * (num_layers + 1)
        return cls(num_layers=num_layers, layer_coefficients=coeff)

    @property
    def coefficients(self) -> np.ndarray:
        if self.layer_coefficients is None:
            return np.ones(self.num_layers + 1)
        return np.asarray(self.layer_coefficients, dtype=np.float64)


@dataclass(frozen=True)
class PropagationOperator:
    """Degree-normalized adjacency D^{-1/2} A D^{-1/2} as a sparse matrix."""

    matrix: sp.csr_matrix
    inv_sqrt_degrees: np.ndarray


def build_propagation(graph: InteractionGraph) -> PropagationOperator:
    """Normalize the adjacency; zero-degree nodes get scaling 0, so their
    rows and columns stay all-zero."""
    degrees = graph.degrees.astype(np.float64)
    scale = np.zeros_like(degrees)
    nonzero = degrees > 0
    scale[nonzero] = 1.0 / np.sqrt(degrees[nonzero])
    normalized = graph.adjacency.multiply(scale[:, None]).multiply(scale[None, :])
    return PropagationOperator(matrix=normalized.tocsr(), inv_sqrt_degrees=scale)


def propagate(
    operator: PropagationOperator,
    table: np.ndarray,
    num_layers: int,
    coefficients: np.ndarray | None = None,
) -> np.ndarray:
    """Layer combination sum_k alpha_k X^(k) with X^(k) = normalized-A @ X^(k-1)."""
    if coefficients is None:
        coefficients = np.ones(num_layers + 1)
    coefficients = np.asarray(coefficients, dtype=np.float64)
    if len(coefficients) != num_layers + 1:
        raise ValueError(f"need {num_layers + 1} coefficients, got {len(coefficients)}")
    out = coefficients[0] * table
    current = table
    for k in range(1, num_layers + 1):
        current = operator.matrix @ current
        out = out + coefficients[k] * current
    return out


def score_mf(table: np.ndarray, num_users: int, users: np.ndarray, items: np.ndarray) -> np.ndarray:
    """Pairwise dot-product scores: out[a, b] = x_{users[a]} . x_{num_users + items[b]}."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    num_items = table.shape[0] - num_users
    if users.size and (users.min() < 0 or users.max() >= num_users):
        raise IndexError("user index out of range")
    if items.size and (items.min() < 0 or items.max() >= num_items):
        raise IndexError("item index out of range")
    return table[users] @ table[num_users + items].T


def score_lightgcn(
    output_table: np.ndarray, num_users: int, users: np.ndarray, items: np.ndarray
) -> np.ndarray:
    """Dot-product scores over propagated output vectors."""
    return score_mf(output_table, num_users, users, items)


class MFModel:
    """MF backbone: the masked table itself is the scoring table."""

    name = "mf"

    def output_table(self, base: np.ndarray) -> np.ndarray:
        return base

    def backward(self, grad_output: np.ndarray) -> np.ndarray:
        return grad_output


class LightGCNModel:
    """LightGCN backbone: propagation plus layer combination over the masked
    table. The normalized adjacency is symmetric, so the backward pass reuses
    the forward propagation."""

    name = "lightgcn"

    def __init__(self, operator: PropagationOperator, config: LightGCNConfig | None = None):
        self.operator = operator
        self.config = config or LightGCNConfig()

    def output_table(self, base: np.ndarray) -> np.ndarray:
        return propagate(self.operator, base, self.config.num_layers, self.config.coefficients)

    def backward(self, grad_output: np.ndarray) -> np.ndarray:
        return propagate(self.operator, grad_output, self.config.num_layers, self.config.coefficients)


def build_model(
    name: str,
    graph: InteractionGraph | None = None,
    lightgcn_config: LightGCNConfig | None = None,
) -> MFModel | LightGCNModel:
    if name == "mf":
        return MFModel()
    if name == "lightgcn":
        if graph is None:
            raise ValueError("lightgcn needs an interaction graph")
        return LightGCNModel(build_propagation(graph), lightgcn_config)
    raise ValueError(f"unknown model: {name!r}")
