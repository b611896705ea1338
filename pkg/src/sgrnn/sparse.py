"""Compressed sparse row matrices for graph operators.

Adjacency matrices stay in CSR form throughout; only test oracles and tiny
fixtures densify. Matrices are immutable after construction, so derived
structures (transpose, row ids) are cached on the instance.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

__all__ = ["CsrMatrix"]


class CsrMatrix:
    """Immutable CSR matrix with float64 entries.

    row_offsets has length rows+1, starts at 0, ends at nnz, and is
    non-decreasing; column indices are strictly increasing within a row.
    """

    def __init__(
        self,
        rows: int,
        cols: int,
        row_offsets: np.ndarray,
        col_indices: np.ndarray,
        entry_values: np.ndarray,
        validate: bool = True,
    ):
        self.rows = int(rows)
        self.cols = int(cols)
        self.row_offsets = np.asarray(row_offsets, dtype=np.int64)
        self.col_indices = np.asarray(col_indices, dtype=np.int64)
        self.entry_values = np.asarray(entry_values, dtype=np.float64)
        self._row_ids: np.ndarray | None = None
        self._transpose: "CsrMatrix | None" = None
        if validate:
            self._check_invariants()

    def _check_invariants(self) -> None:
        if self.rows < 0 or self.cols < 0:
            raise ValueError("matrix dimensions must be non-negative")
        if self.row_offsets.shape != (self.rows + 1,):
            raise ValueError("row_offsets must have length rows+1")
        if self.row_offsets[0] != 0:
            raise ValueError("row_offsets must start at 0")
        if self.row_offsets[-1] != len(self.col_indices):
            raise ValueError("last row offset must equal the entry count")
        if np.any(np.diff(self.row_offsets) < 0):
            raise ValueError("row_offsets must be non-decreasing")
        if len(self.col_indices) != len(self.entry_values):
            raise ValueError("col_indices and entry_values length mismatch")
        if len(self.col_indices) and (
            self.col_indices.min() < 0 or self.col_indices.max() >= self.cols
        ):
            raise ValueError("column index out of range")
        for r in range(self.rows):
            lo, hi = self.row_offsets[r], self.row_offsets[r + 1]
            if hi - lo > 1 and np.any(np.diff(self.col_indices[lo:hi]) <= 0):
                raise ValueError(f"row {r}: column indices not strictly increasing")

    # -- constructors ------------------------------------------------------

    @classmethod
    def from_coo(
        cls,
        rows: int,
        cols: int,
        row_ids: Iterable[int],
        col_ids: Iterable[int],
        values: Iterable[float],
    ) -> "CsrMatrix":
        ri = np.asarray(list(row_ids), dtype=np.int64)
        ci = np.asarray(list(col_ids), dtype=np.int64)
        vals = np.asarray(list(values), dtype=np.float64)
        order = np.lexsort((ci, ri))
        ri, ci, vals = ri[order], ci[order], vals[order]
        offsets = np.zeros(rows + 1, dtype=np.int64)
        np.add.at(offsets, ri + 1, 1)
        offsets = np.cumsum(offsets)
        return cls(rows, cols, offsets, ci, vals)

    @classmethod
    def from_edges(
        cls, n_nodes: int, edges: Sequence[tuple[int, int]], symmetric: bool = True
    ) -> "CsrMatrix":
        """Binary adjacency from an undirected edge list (no self-loops)."""
        if len(edges) == 0:
            return cls.zeros(n_nodes, n_nodes)
        e = np.asarray(edges, dtype=np.int64)
        if symmetric:
            ri = np.concatenate([e[:, 0], e[:, 1]])
            ci = np.concatenate([e[:, 1], e[:, 0]])
        else:
            ri, ci = e[:, 0], e[:, 1]
        return cls.from_coo(n_nodes, n_nodes, ri, ci, np.ones(len(ri)))

    @classmethod
    def from_dense(cls, a: np.ndarray) -> "CsrMatrix":
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2:
            raise ValueError("from_dense expects a 2-D array")
        ri, ci = np.nonzero(a)
        return cls.from_coo(a.shape[0], a.shape[1], ri, ci, a[ri, ci])

    @classmethod
    def identity(cls, n: int) -> "CsrMatrix":
        idx = np.arange(n, dtype=np.int64)
        return cls(n, n, np.arange(n + 1, dtype=np.int64), idx, np.ones(n))

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "CsrMatrix":
        return cls(
            rows,
            cols,
            np.zeros(rows + 1, dtype=np.int64),
            np.zeros(0, dtype=np.int64),
            np.zeros(0),
        )

    # -- queries -----------------------------------------------------------

    @property
    def nnz(self) -> int:
        return len(self.entry_values)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def row_ids(self) -> np.ndarray:
        """Row index of every stored entry (COO row vector)."""
        if self._row_ids is None:
            self._row_ids = np.repeat(
                np.arange(self.rows, dtype=np.int64), np.diff(self.row_offsets)
            )
        return self._row_ids

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.rows, self.cols))
        out[self.row_ids, self.col_indices] = self.entry_values
        return out

    def row_sums(self) -> np.ndarray:
        out = np.zeros(self.rows)
        np.add.at(out, self.row_ids, self.entry_values)
        return out

    def is_symmetric(self, tol: float = 0.0) -> bool:
        if self.rows != self.cols:
            return False
        t = self.transpose()
        return (
            np.array_equal(self.row_offsets, t.row_offsets)
            and np.array_equal(self.col_indices, t.col_indices)
            and bool(np.all(np.abs(self.entry_values - t.entry_values) <= tol))
        )

    # -- algebra -----------------------------------------------------------

    def transpose(self) -> "CsrMatrix":
        if self._transpose is None:
            order = np.lexsort((self.row_ids, self.col_indices))
            self._transpose = CsrMatrix.from_coo(
                self.cols,
                self.rows,
                self.col_indices[order],
                self.row_ids[order],
                self.entry_values[order],
            )
        return self._transpose

    def matmul_dense(self, d: np.ndarray, values: np.ndarray | None = None) -> np.ndarray:
        """Product with a dense (cols x k) matrix, optionally overriding entry values."""
        d = np.asarray(d, dtype=np.float64)
        if d.ndim != 2 or d.shape[0] != self.cols:
            raise ValueError(
                f"dimension mismatch: {self.rows}x{self.cols} @ {d.shape}"
            )
        vals = self.entry_values if values is None else np.asarray(values)
        out = np.zeros((self.rows, d.shape[1]))
        if self.nnz:
            prod = vals[:, None] * d[self.col_indices]
            np.add.at(out, self.row_ids, prod)
        return out

    def with_values(self, values: np.ndarray) -> "CsrMatrix":
        """Same sparsity pattern with replaced entry values."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.entry_values.shape:
            raise ValueError("value vector length must match nnz")
        return CsrMatrix(
            self.rows, self.cols, self.row_offsets, self.col_indices, values,
            validate=False,
        )

    def __repr__(self) -> str:
        return f"CsrMatrix({self.rows}x{self.cols}, nnz={self.nnz})"
