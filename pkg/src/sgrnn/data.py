"""Dynamic-graph snapshots: ingestion, splits, targets, and synthetic data.

Graphs are undirected and unweighted. Edge lists are canonical: i < j,
sorted, no duplicates, no self-loops. A node that disappears keeps its id
and simply loses all incident edges; node counts may grow over time with
stable ids.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Snapshot",
    "SnapshotSequence",
    "EdgeSplit",
    "SnapshotSplit",
    "PredictionTargets",
    "TransitionTargets",
    "DatasetMeta",
    "SnapshotFormatError",
    "GraphValidationError",
    "SplitError",
    "load_snapshots",
    "save_snapshots",
    "identity_features",
    "split_edges_detection",
    "build_prediction_targets",
    "synthetic_dynamic_graph",
    "instrument_sequence",
]

Edge = tuple[int, int]


class SnapshotFormatError(ValueError):
    """Snapshot file could not be parsed; message carries the line number."""


class GraphValidationError(ValueError):
    """A snapshot violates the graph invariants; message names the snapshot."""


class SplitError(ValueError):
    """An edge split or negative sample could not be produced."""


def canonical_edges(edges: Iterable[Edge]) -> tuple[Edge, ...]:
    return tuple(sorted((min(i, j), max(i, j)) for i, j in edges))


@dataclass(frozen=True)
class Snapshot:
    """One observation of the graph: node count, edges, optional attributes."""

    n_nodes: int
    edges: tuple[Edge, ...]
    attributes: np.ndarray | None = None

    def __eq__(self, other) -> bool:
        if not isinstance(other, Snapshot):
            return NotImplemented
        if self.n_nodes != other.n_nodes or self.edges != other.edges:
            return False
        if (self.attributes is None) != (other.attributes is None):
            return False
        if self.attributes is None:
            return True
        return np.array_equal(self.attributes, other.attributes)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def edge_set(self) -> set[Edge]:
        return set(self.edges)

    def density(self) -> float:
        pairs = self.n_nodes * (self.n_nodes - 1) / 2
        return self.n_edges / pairs if pairs else 0.0


class SnapshotSequence:
    """Ordered snapshots with shared validation.

    When attributes are present, every snapshot must carry them. The
    attribute width is normally constant; identity features are the one
    sanctioned exception (width tracks the per-snapshot node count).
    """

    def __init__(self, snapshots: Sequence[Snapshot], varying_attribute_dim: bool = False):
        self.snapshots = list(snapshots)
        self.varying_attribute_dim = varying_attribute_dim
        self._validate()

    def _validate(self) -> None:
        if not self.snapshots:
            raise GraphValidationError("sequence must contain at least one snapshot")
        widths = []
        for t, snap in enumerate(self.snapshots):
            if snap.n_nodes < 0:
                raise GraphValidationError(f"snapshot {t}: negative node count")
            seen = set()
            for i, j in snap.edges:
                if i == j:
                    raise GraphValidationError(f"snapshot {t}: self-loop at node {i}")
                if i > j:
                    raise GraphValidationError(
                        f"snapshot {t}: edge ({i},{j}) not in canonical i<j order"
                    )
                if not (0 <= i < snap.n_nodes and 0 <= j < snap.n_nodes):
                    raise GraphValidationError(
                        f"snapshot {t}: edge ({i},{j}) references a node id >= "
                        f"{snap.n_nodes}"
                    )
                if (i, j) in seen:
                    raise GraphValidationError(f"snapshot {t}: duplicate edge ({i},{j})")
                seen.add((i, j))
            if snap.attributes is not None:
                if snap.attributes.shape[0] != snap.n_nodes:
                    raise GraphValidationError(
                        f"snapshot {t}: attribute rows {snap.attributes.shape[0]} "
                        f"!= node count {snap.n_nodes}"
                    )
                widths.append(snap.attributes.shape[1])
            else:
                widths.append(None)
        has = [w is not None for w in widths]
        if any(has) and not all(has):
            raise GraphValidationError(
                "either every snapshot has attributes or none does"
            )
        if all(has) and not self.varying_attribute_dim and len(set(widths)) > 1:
            raise GraphValidationError(
                f"attribute dimension varies across snapshots: {sorted(set(widths))}"
            )

    def __len__(self) -> int:
        return len(self.snapshots)

    def __getitem__(self, t: int) -> Snapshot:
        return self.snapshots[t]

    def __iter__(self):
        return iter(self.snapshots)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SnapshotSequence):
            return NotImplemented
        return self.snapshots == other.snapshots

    @property
    def T(self) -> int:
        return len(self.snapshots)

    @property
    def has_attributes(self) -> bool:
        return self.snapshots[0].attributes is not None

    @property
    def attribute_dim(self) -> int | None:
        """Shared attribute width, or None when absent / varying."""
        if not self.has_attributes or self.varying_attribute_dim:
            return None
        return self.snapshots[0].attributes.shape[1]

    def input_dims(self) -> list[int]:
        """Model input width per snapshot (attribute width, or N_t for identity)."""
        if self.has_attributes:
            return [s.attributes.shape[1] for s in self.snapshots]
        return [s.n_nodes for s in self.snapshots]

    def meta(self, name: str = "unnamed") -> "DatasetMeta":
        return DatasetMeta.from_sequence(name, self)


@dataclass(frozen=True)
class DatasetMeta:
    name: str
    T: int
    node_counts: tuple[int, ...]
    edge_counts: tuple[int, ...]
    density: float

    @classmethod
    def from_sequence(cls, name: str, seq: SnapshotSequence) -> "DatasetMeta":
        return cls(
            name=name,
            T=seq.T,
            node_counts=tuple(s.n_nodes for s in seq),
            edge_counts=tuple(s.n_edges for s in seq),
            density=float(np.mean([s.density() for s in seq])),
        )


# -- file format ---------------------------------------------------------------
#
# Line-oriented UTF-8 text, LF newlines, '#' comments:
#   T <count>
#   snapshot <t> nodes <N_t>
#   attrs <M>            (optional; followed by N_t rows of M decimals)
#   edges <E_t>          (followed by E_t lines "i j")


def load_snapshots(path) -> SnapshotSequence:
    """Parse and validate a snapshot file."""
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    pos = 0

    def next_content():
        nonlocal pos
        while pos < len(lines):
            ln = pos + 1
            stripped = lines[pos].strip()
            pos += 1
            if stripped and not stripped.startswith("#"):
                return ln, stripped
        return None, None

    def expect(keyword: str, n_fields: int):
        ln, content = next_content()
        if content is None:
            raise SnapshotFormatError(
                f"line {len(lines)}: unexpected end of file, expected '{keyword}'"
            )
        fields = content.split()
        if fields[0] != keyword or len(fields) != n_fields:
            raise SnapshotFormatError(
                f"line {ln}: expected '{keyword}' record, got {content!r}"
            )
        return ln, fields

    ln, fields = expect("T", 2)
    try:
        T = int(fields[1])
    except ValueError:
        raise SnapshotFormatError(f"line {ln}: snapshot count must be an integer")
    if T < 1:
        raise SnapshotFormatError(f"line {ln}: snapshot count must be >= 1")

    snapshots = []
    varying = False
    attr_dims = set()
    for t in range(T):
        ln, fields = expect("snapshot", 4)
        if fields[2] != "nodes":
            raise SnapshotFormatError(f"line {ln}: malformed snapshot header")
        try:
            declared_t, n_nodes = int(fields[1]), int(fields[3])
        except ValueError:
            raise SnapshotFormatError(f"line {ln}: snapshot header fields must be integers")
        if declared_t != t:
            raise SnapshotFormatError(
                f"line {ln}: snapshot index {declared_t}, expected {t}"
            )

        ln, content = next_content()
        if content is None:
            raise SnapshotFormatError(f"line {len(lines)}: unexpected end of file")
        attrs = None
        if content.split()[0] == "attrs":
            fields = content.split()
            if len(fields) != 2:
                raise SnapshotFormatError(f"line {ln}: malformed attrs record")
            m = int(fields[1])
            attr_dims.add(m)
            rows = []
            for r in range(n_nodes):
                ln2, row = next_content()
                if row is None:
                    raise SnapshotFormatError(
                        f"line {len(lines)}: expected {n_nodes} attribute rows"
                    )
                vals = row.split()
                if len(vals) != m:
                    raise SnapshotFormatError(
                        f"line {ln2}: expected {m} attribute values, got {len(vals)}"
                    )
                try:
                    rows.append([float(v) for v in vals])
                except ValueError:
                    raise SnapshotFormatError(f"line {ln2}: non-numeric attribute value")
            attrs = np.array(rows, dtype=np.float64).reshape(n_nodes, m)
            ln, content = next_content()
            if content is None:
                raise SnapshotFormatError(f"line {len(lines)}: unexpected end of file")

        fields = content.split()
        if fields[0] != "edges" or len(fields) != 2:
            raise SnapshotFormatError(f"line {ln}: expected 'edges' record, got {content!r}")
        try:
            n_edges = int(fields[1])
        except ValueError:
            raise SnapshotFormatError(f"line {ln}: edge count must be an integer")
        edges = []
        for e in range(n_edges):
            ln2, row = next_content()
            if row is None:
                raise SnapshotFormatError(f"line {len(lines)}: expected {n_edges} edge lines")
            vals = row.split()
            if len(vals) != 2:
                raise SnapshotFormatError(f"line {ln2}: edge line must hold two node ids")
            try:
                i, j = int(vals[0]), int(vals[1])
            except ValueError:
                raise SnapshotFormatError(f"line {ln2}: non-integer node id")
            edges.append((min(i, j), max(i, j)))
        snapshots.append(Snapshot(n_nodes, canonical_edges(edges), attrs))

    ln, content = next_content()
    if content is not None:
        raise SnapshotFormatError(f"line {ln}: trailing content after last snapshot")
    varying = len(attr_dims) > 1
    return SnapshotSequence(snapshots, varying_attribute_dim=varying)


def save_snapshots(seq: SnapshotSequence, path) -> None:
    """Write a sequence in the canonical text format (load/save round-trips)."""
    out = [f"T {seq.T}"]
    for t, snap in enumerate(seq):
        out.append(f"snapshot {t} nodes {snap.n_nodes}")
        if snap.attributes is not None:
            out.append(f"attrs {snap.attributes.shape[1]}")
            for row in snap.attributes:
                out.append(" ".join(repr(float(v)) for v in row))
        out.append(f"edges {snap.n_edges}")
        for i, j in snap.edges:
            out.append(f"{i} {j}")
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


def identity_features(seq: SnapshotSequence) -> SnapshotSequence:
    """Attach an N_t x N_t identity attribute matrix to every snapshot.

    Used when a dataset ships without node attributes; the input width then
    varies with the snapshot node count.
    """
    if seq.has_attributes:
        raise GraphValidationError("sequence already has attributes")
    snaps = [
        Snapshot(s.n_nodes, s.edges, np.eye(s.n_nodes, dtype=np.float64)) for s in seq
    ]
    return SnapshotSequence(snaps, varying_attribute_dim=True)


# -- splits and targets ----------------------------------------------------------


@dataclass(frozen=True)
class SnapshotSplit:
    train_edges: tuple[Edge, ...]
    val_pos: tuple[Edge, ...]
    val_neg: tuple[Edge, ...]
    test_pos: tuple[Edge, ...]
    test_neg: tuple[Edge, ...]


@dataclass(frozen=True)
class EdgeSplit:
    """Per-snapshot edge partitions with matched negative samples."""

    snapshots: tuple[SnapshotSplit, ...]

    def __len__(self) -> int:
        return len(self.snapshots)

    def __getitem__(self, t: int) -> SnapshotSplit:
        return self.snapshots[t]


def _all_non_edges(n: int, edge_set: set[Edge]) -> list[Edge]:
    return [
        (i, j) for i in range(n) for j in range(i + 1, n) if (i, j) not in edge_set
    ]


def sample_non_edges(
    n_nodes: int,
    edge_set: set[Edge],
    count: int,
    rng: np.random.Generator,
) -> list[Edge]:
    """Uniform sample of `count` distinct non-edges (no self-loops)."""
    if count == 0:
        return []
    total_pairs = n_nodes * (n_nodes - 1) // 2
    available = total_pairs - len(edge_set)
    if count > available:
        raise SplitError(
            f"requested {count} negative pairs but only {available} non-edges exist"
        )
    if count > available // 2 or n_nodes <= 40:
        pool = _all_non_edges(n_nodes, edge_set)
        idx = rng.choice(len(pool), size=count, replace=False)
        return [pool[k] for k in idx]
    chosen: set[Edge] = set()
    while len(chosen) < count:
        i = int(rng.integers(n_nodes))
        j = int(rng.integers(n_nodes))
        if i == j:
            continue
        pair = (min(i, j), max(i, j))
        if pair in edge_set or pair in chosen:
            continue
        chosen.add(pair)
    return sorted(chosen)


def split_edges_detection(
    seq: SnapshotSequence,
    val_frac: float = 0.05,
    test_frac: float = 0.10,
    seed: int = 0,
) -> EdgeSplit:
    """Hold out val/test edges per snapshot, with equal-count negatives.

    Counts are floor(frac * E_t), bumped to at least 1 when E_t >= 10.
    Negatives are uniform non-edges, disjoint between val and test.
    """
    if not (0 < val_frac < 1 and 0 < test_frac < 1 and val_frac + test_frac < 1):
        raise SplitError("fractions must lie in (0,1) and sum below 1")
    rng = np.random.default_rng(seed)
    parts = []
    for t, snap in enumerate(seq):
        e = snap.n_edges
        if e < 3:
            raise SplitError(f"snapshot {t} has {e} edges; need at least 3 to split")
        n_val = int(val_frac * e)
        n_test = int(test_frac * e)
        if e >= 10:
            n_val = max(1, n_val)
            n_test = max(1, n_test)
        order = rng.permutation(e)
        edges = snap.edges
        val_pos = tuple(edges[k] for k in order[:n_val])
        test_pos = tuple(edges[k] for k in order[n_val : n_val + n_test])
        train = tuple(sorted(edges[k] for k in order[n_val + n_test :]))
        negs = sample_non_edges(snap.n_nodes, snap.edge_set(), n_val + n_test, rng)
        parts.append(
            SnapshotSplit(
                train_edges=train,
                val_pos=tuple(sorted(val_pos)),
                val_neg=tuple(negs[:n_val]),
                test_pos=tuple(sorted(test_pos)),
                test_neg=tuple(negs[n_val:]),
            )
        )
    return EdgeSplit(tuple(parts))


@dataclass(frozen=True)
class TransitionTargets:
    """Evaluation pairs for the transition G_t -> G_{t+1}."""

    t: int
    positives: tuple[Edge, ...]
    negatives: tuple[Edge, ...]
    skipped: bool = False


@dataclass(frozen=True)
class PredictionTargets:
    new_only: bool
    transitions: tuple[TransitionTargets, ...]

    def __len__(self) -> int:
        return len(self.transitions)

    def __getitem__(self, k: int) -> TransitionTargets:
        return self.transitions[k]


def build_prediction_targets(
    seq: SnapshotSequence, new_only: bool = False, seed: int = 0
) -> PredictionTargets:
    """Positive/negative pairs per transition for (new) link prediction."""
    if seq.T < 2:
        raise GraphValidationError("prediction targets need at least two snapshots")
    rng = np.random.default_rng(seed)
    transitions = []
    for t in range(seq.T - 1):
        nxt = seq[t + 1]
        if new_only:
            prev_edges = seq[t].edge_set()
            pos = tuple(e for e in nxt.edges if e not in prev_edges)
        else:
            pos = nxt.edges
        if len(pos) == 0:
            warnings.warn(
                f"transition {t}->{t+1}: no target edges; skipping in metrics",
                stacklevel=2,
            )
            transitions.append(TransitionTargets(t, (), (), skipped=True))
            continue
        neg = sample_non_edges(nxt.n_nodes, nxt.edge_set(), len(pos), rng)
        transitions.append(TransitionTargets(t, pos, tuple(neg)))
    return PredictionTargets(new_only, tuple(transitions))


# -- synthetic generator -----------------------------------------------------------


def synthetic_dynamic_graph(
    n_nodes: int,
    n_snapshots: int,
    n_blocks: int,
    p_in: float,
    p_out: float,
    drift_prob: float,
    seed: int = 0,
) -> SnapshotSequence:
    """Drifting stochastic block model.

    Nodes start in contiguous blocks; between snapshots each node resamples
    its block with probability drift_prob. Edges are drawn independently per
    snapshot with within/between-block probabilities p_in/p_out.
    """
    for name, p in (("p_in", p_in), ("p_out", p_out), ("drift_prob", drift_prob)):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {p}")
    if n_blocks > n_nodes:
        raise ValueError(f"n_blocks={n_blocks} exceeds n_nodes={n_nodes}")
    if n_blocks < 1 or n_snapshots < 1:
        raise ValueError("need at least one block and one snapshot")
    rng = np.random.default_rng(seed)
    blocks = np.array([i * n_blocks // n_nodes for i in range(n_nodes)])
    rows, cols = np.triu_indices(n_nodes, k=1)
    snapshots = []
    for t in range(n_snapshots):
        if t > 0:
            move = rng.random(n_nodes) < drift_prob
            blocks = np.where(move, rng.integers(n_blocks, size=n_nodes), blocks)
        probs = np.where(blocks[rows] == blocks[cols], p_in, p_out)
        keep = rng.random(len(rows)) < probs
        edges = canonical_edges(zip(rows[keep].tolist(), cols[keep].tolist()))
        snapshots.append(Snapshot(n_nodes, edges))
    return SnapshotSequence(snapshots)


def expected_sbm_density(n_nodes: int, n_blocks: int, p_in: float, p_out: float) -> float:
    """Expected edge density of one SBM snapshot with contiguous equal blocks."""
    blocks = np.array([i * n_blocks // n_nodes for i in range(n_nodes)])
    rows, cols = np.triu_indices(n_nodes, k=1)
    within = int(np.sum(blocks[rows] == blocks[cols]))
    total = len(rows)
    return (p_in * within + p_out * (total - within)) / total


# -- access instrumentation ---------------------------------------------------------


class _SpySnapshot:
    """Snapshot proxy that reports edge reads back to the instrumented sequence."""

    def __init__(self, snap: Snapshot, t: int, counts: dict[int, int]):
        self._snap = snap
        self._t = t
        self._counts = counts

    @property
    def n_nodes(self) -> int:
        return self._snap.n_nodes

    @property
    def edges(self) -> tuple[Edge, ...]:
        self._counts[self._t] = self._counts.get(self._t, 0) + 1
        return self._snap.edges

    @property
    def attributes(self):
        return self._snap.attributes

    @property
    def n_edges(self) -> int:
        self._counts[self._t] = self._counts.get(self._t, 0) + 1
        return self._snap.n_edges

    def edge_set(self):
        self._counts[self._t] = self._counts.get(self._t, 0) + 1
        return self._snap.edge_set()


class InstrumentedSequence:
    """Sequence view that counts adjacency (edge-list) reads per snapshot."""

    def __init__(self, base: SnapshotSequence):
        self._base = base
        self.edge_reads: dict[int, int] = {}
        self.varying_attribute_dim = base.varying_attribute_dim

    def __len__(self):
        return len(self._base)

    def __getitem__(self, t: int):
        return _SpySnapshot(self._base[t], t, self.edge_reads)

    def __iter__(self):
        return (self[t] for t in range(len(self._base)))

    @property
    def T(self) -> int:
        return self._base.T

    @property
    def has_attributes(self) -> bool:
        return self._base.has_attributes

    def input_dims(self) -> list[int]:
        return self._base.input_dims()


def instrument_sequence(seq: SnapshotSequence) -> InstrumentedSequence:
    return InstrumentedSequence(seq)
