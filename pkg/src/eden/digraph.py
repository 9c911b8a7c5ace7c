"""Directed-graph representation, loaders, and the forward-walk survival probe.

A :class:`DiGraph` keeps both adjacency directions in CSR form (offsets +
targets, targets sorted per row) and is immutable after construction, so it
is safe to share across threads. Transforms such as :func:`add_sink_loops`
return new graphs.

File formats
------------
* Edge list: UTF-8 text, one ``src<ws>dst`` pair per line, 0-based ids,
  ``#`` starts a comment (full line or trailing). Duplicate edges are
  removed with a warning count; ids with gaps are compacted to ``[0, n)``
  and the original ids are kept in ``DiGraph.source_ids``.
* Feature / label matrices: CSV (optional non-numeric header row), or a
  little-endian binary matrix: magic ``EDN1``, u64 rows, u64 cols, then
  row-major f64 values. The loader dispatches on the magic bytes.
* Splits: per-node CSV with one of ``train``/``val``/``test``/``none`` per
  row, or a fractional spec applied to labeled nodes with a seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError, ParseError
from .rng import stream

_EDN1_MAGIC = b"EDN1"

WITH_CYCLES = "with-cycles"
CYCLE_FREE = "cycle-free"


@dataclass(frozen=True)
class DiGraph:
    """Immutable digraph with dual CSR adjacency and optional node data."""

    n: int
    m: int
    out_offsets: np.ndarray
    out_targets: np.ndarray
    in_offsets: np.ndarray
    in_targets: np.ndarray
    features: np.ndarray | None = None
    labels: np.ndarray | None = None
    masks: dict[str, np.ndarray] | None = None
    source_ids: np.ndarray | None = None
    duplicates_removed: int = 0

    def out_neighbors(self, v: int) -> np.ndarray:
        return self.out_targets[self.out_offsets[v]:self.out_offsets[v + 1]]

    def in_neighbors(self, v: int) -> np.ndarray:
        return self.in_targets[self.in_offsets[v]:self.in_offsets[v + 1]]

    @property
    def out_degrees(self) -> np.ndarray:
        return np.diff(self.out_offsets)

    @property
    def in_degrees(self) -> np.ndarray:
        return np.diff(self.in_offsets)

    def edges(self) -> np.ndarray:
        """All edges as an (m, 2) array sorted by (src, dst)."""
        src = np.repeat(np.arange(self.n), self.out_degrees)
        return np.column_stack([src, self.out_targets])

    def has_edge(self, u: int, v: int) -> bool:
        row = self.out_neighbors(u)
        i = np.searchsorted(row, v)
        return i < len(row) and row[i] == v

    def num_classes(self) -> int:
        if self.labels is None:
            raise ConfigError("graph has no labels")
        labeled = self.labels[self.labels >= 0]
        if labeled.size == 0:
            raise ConfigError("graph has no labeled nodes")
        return int(labeled.max()) + 1


@dataclass(frozen=True)
class DegreeProfile:
    d_in: np.ndarray
    d_out: np.ndarray


@dataclass
class WalkStats:
    """Survival curve of forward-only random walks."""

    max_len: int
    completion: np.ndarray  # length max_len + 1, completion[0] == 1
    cycle_mode: str = WITH_CYCLES


def degree_profile(g: DiGraph) -> DegreeProfile:
    return DegreeProfile(d_in=g.in_degrees.copy(), d_out=g.out_degrees.copy())


def _csr_from_edges(n: int, edges: np.ndarray) -> tuple[np.ndarray, ...]:
    """Build sorted out- and in-CSR from a deduplicated (m, 2) edge array."""
    if edges.size == 0:
        zeros = np.zeros(n + 1, dtype=np.int64)
        empty = np.zeros(0, dtype=np.int64)
        return zeros, empty, zeros.copy(), empty.copy()
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    e = edges[order]
    out_offsets = np.zeros(n + 1, dtype=np.int64)
    np.add.at(out_offsets, e[:, 0] + 1, 1)
    out_offsets = np.cumsum(out_offsets)
    order_in = np.lexsort((e[:, 0], e[:, 1]))
    e_in = e[order_in]
    in_offsets = np.zeros(n + 1, dtype=np.int64)
    np.add.at(in_offsets, e_in[:, 1] + 1, 1)
    in_offsets = np.cumsum(in_offsets)
    return out_offsets, e[:, 1].copy(), in_offsets, e_in[:, 0].copy()


def _freeze(g: DiGraph) -> DiGraph:
    for arr in (g.out_offsets, g.out_targets, g.in_offsets, g.in_targets):
        arr.setflags(write=False)
    return g


def build_digraph(
    n: int,
    edges,
    features: np.ndarray | None = None,
    labels: np.ndarray | None = None,
    masks: dict[str, np.ndarray] | None = None,
    source_ids: np.ndarray | None = None,
    duplicates_removed: int = 0,
) -> DiGraph:
    """Construct a validated DiGraph from an iterable of (src, dst) pairs."""
    edges = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges,
                       dtype=np.int64).reshape(-1, 2)
    if edges.size and (edges.min() < 0 or edges.max() >= n):
        raise ParseError(f"edge endpoint outside [0, {n})")
    if edges.size:
        edges = np.unique(edges, axis=0)
    oo, ot, io, it = _csr_from_edges(n, edges)
    if features is not None:
        features = np.asarray(features, dtype=np.float64)
        if features.shape[0] != n:
            raise DimensionError(
                f"feature matrix has {features.shape[0]} rows, graph has {n} nodes")
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape[0] != n:
            raise DimensionError(
                f"label vector has {labels.shape[0]} rows, graph has {n} nodes")
    if masks is not None:
        total = np.zeros(n, dtype=np.int64)
        for name in ("train", "val", "test"):
            mask = masks.get(name)
            if mask is None:
                continue
            if mask.shape[0] != n:
                raise DimensionError(f"{name} mask length != n")
            total += mask.astype(np.int64)
        if (total > 1).any():
            raise ConfigError("train/val/test masks overlap")
    return _freeze(DiGraph(
        n=n, m=len(edges),
        out_offsets=oo, out_targets=ot, in_offsets=io, in_targets=it,
        features=features, labels=labels, masks=masks,
        source_ids=source_ids, duplicates_removed=duplicates_removed,
    ))


def _parse_edge_file(path: Path) -> tuple[list[tuple[int, int]], int]:
    pairs: list[tuple[int, int]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ParseError(f"{path}:{lineno}: expected 'src dst', got {raw.strip()!r}")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: non-integer node id") from exc
            if u < 0 or v < 0:
                raise ParseError(f"{path}:{lineno}: negative node id")
            pairs.append((u, v))
    return pairs, len(pairs)


def read_matrix(path) -> np.ndarray:
    """Read a dense matrix from CSV or the EDN1 binary format."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic == _EDN1_MAGIC:
            rows, cols = struct.unpack("<QQ", fh.read(16))
            data = np.frombuffer(fh.read(rows * cols * 8), dtype="<f8")
            if data.size != rows * cols:
                raise ParseError(f"{path}: truncated EDN1 matrix")
            return data.reshape(rows, cols).astype(np.float64)
    rows_out: list[list[float]] = []
    ncols = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            cells = [c.strip() for c in line.split(",")]
            try:
                row = [float(c) for c in cells]
            except ValueError:
                if lineno == 1:  # header row
                    continue
                raise ParseError(f"{path}:{lineno}: non-numeric value")
            if ncols is None:
                ncols = len(row)
            elif len(row) != ncols:
                raise ParseError(f"{path}:{lineno}: expected {ncols} columns, got {len(row)}")
            rows_out.append(row)
    if not rows_out:
        raise ParseError(f"{path}: empty matrix")
    return np.asarray(rows_out, dtype=np.float64)


def write_matrix(path, matrix: np.ndarray) -> None:
    """Write a dense matrix in the EDN1 binary format."""
    matrix = np.asarray(matrix, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(_EDN1_MAGIC)
        fh.write(struct.pack("<QQ", matrix.shape[0], matrix.shape[1]))
        fh.write(matrix.astype("<f8").tobytes(order="C"))


def _read_labels(path, n: int) -> np.ndarray:
    raw = read_matrix(path)
    labels = np.full(n, -1, dtype=np.int64)
    if raw.shape[1] == 2:  # explicit (node, label) pairs
        ids = raw[:, 0].astype(np.int64)
        if ids.min() < 0 or ids.max() >= n:
            raise ParseError(f"{path}: node id outside [0, {n})")
        labels[ids] = raw[:, 1].astype(np.int64)
    elif raw.shape[1] == 1:
        if raw.shape[0] > n:
            raise DimensionError(f"{path}: {raw.shape[0]} label rows for {n} nodes")
        labels[: raw.shape[0]] = raw[:, 0].astype(np.int64)
    else:
        raise ParseError(f"{path}: labels must have 1 or 2 columns")
    file_values = raw[:, -1].astype(np.int64)
    if (file_values < 0).any():
        raise ParseError(f"{path}: negative class index")
    return labels


def _split_from_file(path, n: int) -> dict[str, np.ndarray]:
    names = {"train", "val", "test", "none"}
    masks = {k: np.zeros(n, dtype=bool) for k in ("train", "val", "test")}
    with open(path, "r", encoding="utf-8") as fh:
        row = 0
        for lineno, raw in enumerate(fh, start=1):
            word = raw.strip().lower()
            if not word or word.startswith("#"):
                continue
            if word not in names:
                raise ParseError(f"{path}:{lineno}: unknown split tag {word!r}")
            if row >= n:
                raise DimensionError(f"{path}: more split rows than nodes")
            if word != "none":
                masks[word][row] = True
            row += 1
    if row != n:
        raise DimensionError(f"{path}: {row} split rows for {n} nodes")
    return masks


def fractional_split(labels: np.ndarray, fractions: tuple[float, float, float],
                     seed: int) -> dict[str, np.ndarray]:
    """Assign labeled nodes to train/val/test by shuffled fractions."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {fractions}")
    n = labels.shape[0]
    labeled = np.flatnonzero(labels >= 0)
    order = labeled[stream(seed, "split").permutation(len(labeled))]
    n_train = int(round(fractions[0] * len(order)))
    n_val = int(round(fractions[1] * len(order)))
    masks = {k: np.zeros(n, dtype=bool) for k in ("train", "val", "test")}
    masks["train"][order[:n_train]] = True
    masks["val"][order[n_train:n_train + n_val]] = True
    masks["test"][order[n_train + n_val:]] = True
    return masks


def load_digraph(
    edge_file,
    feature_file=None,
    label_file=None,
    split=None,
) -> DiGraph:
    """Load and validate a digraph from disk.

    ``split`` is either a path to a per-node split CSV or a tuple
    ``(train_frac, val_frac, test_frac, seed)``.
    """
    pairs, raw_count = _parse_edge_file(Path(edge_file))
    if pairs:
        arr = np.asarray(pairs, dtype=np.int64)
        ids = np.unique(arr)
        compact = ids.size != ids[-1] + 1 if ids.size else False
        if compact:
            arr = np.searchsorted(ids, arr)
        n = int(ids.size)
        source_ids = ids if compact else None
        deduped = np.unique(arr, axis=0)
        duplicates = raw_count - len(deduped)
    else:
        n, deduped, source_ids, duplicates = 0, np.zeros((0, 2), np.int64), None, 0

    features = read_matrix(feature_file) if feature_file else None
    if features is not None and n == 0:
        n = features.shape[0]
    labels = _read_labels(label_file, n) if label_file else None

    masks = None
    if split is not None:
        if isinstance(split, (str, Path)):
            masks = _split_from_file(split, n)
        else:
            train, val, test, seed = split
            if labels is None:
                raise ConfigError("fractional split requires labels")
            masks = fractional_split(labels, (train, val, test), int(seed))

    return build_digraph(n, deduped, features=features, labels=labels,
                         masks=masks, source_ids=source_ids,
                         duplicates_removed=duplicates)


def add_sink_loops(g: DiGraph) -> DiGraph:
    """Give every zero-out-degree node a self-loop; other edges unchanged."""
    sinks = np.flatnonzero(g.out_degrees == 0)
    if sinks.size == 0:
        return g
    loops = np.column_stack([sinks, sinks])
    edges = np.vstack([g.edges(), loops]) if g.m else loops
    return build_digraph(g.n, edges, features=g.features, labels=g.labels,
                         masks=g.masks, source_ids=g.source_ids,
                         duplicates_removed=g.duplicates_removed)


def walk_interruption(
    g: DiGraph,
    max_len: int,
    trials_per_node: int = 16,
    cycle_mode: str = WITH_CYCLES,
    seed: int = 0,
) -> WalkStats:
    """Measure the fraction of forward-only walks that survive each length.

    One batch of ``trials_per_node`` walks starts at every node; each step
    follows a uniformly drawn out-edge. A walk survives length ``L`` if it
    makes ``L`` steps without interruption: reaching a node with no
    out-edges, or, in cycle-free mode, stepping onto a node already on the
    current path. Both modes draw identical trajectories for the same
    seed, so the cycle-free curve is pointwise at or below the with-cycles
    curve by construction.
    """
    if max_len < 1:
        raise ConfigError("max_len must be >= 1")
    if cycle_mode not in (WITH_CYCLES, CYCLE_FREE):
        raise ConfigError(f"unknown cycle_mode {cycle_mode!r}")
    survived = np.zeros(max_len + 1, dtype=np.int64)
    total = g.n * trials_per_node
    survived[0] = total
    if g.m == 0 or total == 0:
        completion = np.zeros(max_len + 1)
        completion[0] = 1.0
        return WalkStats(max_len=max_len, completion=completion, cycle_mode=cycle_mode)

    cycle_free = cycle_mode == CYCLE_FREE
    for start in range(g.n):
        rng = stream(seed, "walk", start)
        for _ in range(trials_per_node):
            node = start
            visited = {start} if cycle_free else None
            for step in range(1, max_len + 1):
                nbrs = g.out_neighbors(node)
                if len(nbrs) == 0:
                    break
                node = int(nbrs[rng.integers(len(nbrs))])
                if cycle_free:
                    if node in visited:
                        break
                    visited.add(node)
                survived[step] += 1
    return WalkStats(max_len=max_len, completion=survived / total, cycle_mode=cycle_mode)
