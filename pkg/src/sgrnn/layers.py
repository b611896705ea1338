"""Graph convolution layers: GCN, GraphSAGE (mean), and GIN.

All layers are pure functions of (adjacency, features, weights) and are
differentiable through the tape. None of them carry bias terms; activation
defaults to ReLU for hidden layers and identity for output heads.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    matmul,
    mul,
    relu,
    sparse_dense_matmul,
    tanh,
)
from .sparse import CsrMatrix

__all__ = [
    "normalize_adjacency",
    "mean_neighbor_operator",
    "gcn_forward",
    "sage_forward",
    "gin_forward",
    "resolve_activation",
]

_ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": relu,
    "tanh": tanh,
    "linear": lambda t: t,
}


def resolve_activation(activation) -> Callable[[Tensor], Tensor]:
    if callable(activation):
        return activation
    try:
        return _ACTIVATIONS[activation]
    except KeyError:
        raise ValueError(f"unknown activation {activation!r}") from None


def normalize_adjacency(a: CsrMatrix) -> CsrMatrix:
    """Symmetric degree normalization with self-loops added.

    Returns the operator whose (i, j) entry is 1 / sqrt(d_i * d_j) on the
    support of A + I, with d the degree in A + I.
    """
    if a.rows != a.cols:
        raise ValueError(f"adjacency must be square, got {a.shape}")
    if not a.is_symmetric():
        raise ValueError("adjacency must be symmetric")
    if a.nnz and np.any(a.row_ids == a.col_indices):
        raise ValueError("adjacency must have an empty diagonal")
    n = a.rows
    deg = a.row_sums() + 1.0
    inv_sqrt = 1.0 / np.sqrt(deg)
    ri = np.concatenate([a.row_ids, np.arange(n, dtype=np.int64)])
    ci = np.concatenate([a.col_indices, np.arange(n, dtype=np.int64)])
    vals = inv_sqrt[ri] * inv_sqrt[ci] * np.concatenate([a.entry_values, np.ones(n)])
    return CsrMatrix.from_coo(n, n, ri, ci, vals)


def mean_neighbor_operator(a: CsrMatrix) -> CsrMatrix:
    """Row-normalized adjacency; rows of isolated nodes stay empty (zero mean)."""
    deg = a.row_sums()
    scale = np.where(deg > 0, 1.0 / np.maximum(deg, 1.0), 0.0)
    return a.with_values(a.entry_values * scale[a.row_ids])


def _check_width(h: Tensor, weight: Tensor, name: str) -> None:
    if h.shape[1] != weight.shape[0]:
        raise ShapeError(
            f"{name}: feature width {h.shape[1]} does not match weight rows "
            f"{weight.shape[0]}"
        )


def gcn_forward(
    adj_norm: CsrMatrix, h: Tensor, weight: Tensor, activation="relu"
) -> Tensor:
    """activation(A_hat @ H @ W) with a pre-normalized operator."""
    _check_width(h, weight, "gcn_forward")
    act = resolve_activation(activation)
    return act(sparse_dense_matmul(adj_norm, matmul(h, weight)))


def sage_forward(
    adj: CsrMatrix,
    h: Tensor,
    w_self: Tensor,
    w_neigh: Tensor,
    activation="relu",
) -> Tensor:
    """activation(H @ W_self + mean_neigh(H) @ W_neigh) on the raw adjacency."""
    _check_width(h, w_self, "sage_forward")
    _check_width(h, w_neigh, "sage_forward")
    act = resolve_activation(activation)
    neigh = sparse_dense_matmul(mean_neighbor_operator(adj), h)
    return act(matmul(h, w_self) + matmul(neigh, w_neigh))


def gin_forward(
    adj: CsrMatrix,
    h: Tensor,
    w1: Tensor,
    w2: Tensor,
    eps_gin: Tensor,
    activation="linear",
) -> Tensor:
    """Two-layer perceptron over (1 + eps) * h + sum of neighbor features."""
    _check_width(h, w1, "gin_forward")
    act = resolve_activation(activation)
    agg = mul(h, 1.0 + eps_gin) + sparse_dense_matmul(adj, h)
    return act(matmul(relu(matmul(agg, w1)), w2))
