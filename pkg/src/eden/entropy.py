"""Directed structural entropy in one, two, and h dimensions.

All measurements carry separate in- and out-direction terms: the in-variant
uses in-degree volumes and counts boundary edges entering a block, the
out-variant uses out-degree volumes and edges leaving. Natural logarithm
throughout, with the 0*log(0) = 0 convention.

The incremental ``delta_combine`` / ``delta_detach`` helpers evaluate the
entropy change of a tree edit from cached per-node volumes and crossing
counts, touching only the affected nodes. They are the workhorses of the
greedy builder and are cross-checked against full recomputation in tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .digraph import DiGraph
from .errors import ContractError, PartitionError, StructureError

__all__ = [
    "Partition",
    "EntropyReport",
    "one_dim_entropy",
    "two_dim_entropy",
    "tree_entropy",
    "delta_combine",
    "delta_detach",
]


@dataclass(frozen=True)
class Partition:
    """Block assignment over graph nodes; blocks must be non-empty."""

    assignment: np.ndarray
    n_blocks: int

    @staticmethod
    def from_assignment(assignment) -> "Partition":
        assignment = np.asarray(assignment, dtype=np.int64)
        if assignment.size == 0:
            raise PartitionError("empty partition")
        n_blocks = int(assignment.max()) + 1
        counts = np.bincount(assignment, minlength=n_blocks)
        if assignment.min() < 0 or (counts == 0).any():
            raise PartitionError("block ids must be dense with non-empty blocks")
        return Partition(assignment=assignment, n_blocks=n_blocks)

    @staticmethod
    def from_blocks(blocks, n: int) -> "Partition":
        assignment = np.full(n, -1, dtype=np.int64)
        for b, members in enumerate(blocks):
            for v in members:
                if assignment[v] != -1:
                    raise PartitionError(f"node {v} assigned twice")
            assignment[list(members)] = b
        if (assignment < 0).any():
            raise PartitionError("partition does not cover all nodes")
        return Partition.from_assignment(assignment)


@dataclass(frozen=True)
class EntropyReport:
    value: float
    in_part: float
    out_part: float
    per_block: list | None = None


def _plogp(p: np.ndarray) -> np.ndarray:
    out = np.zeros_like(p)
    nz = p > 0
    out[nz] = p[nz] * np.log(p[nz])
    return out


def one_dim_entropy(g: DiGraph) -> EntropyReport:
    """Shannon entropy of the degree-stationary distribution, both directions."""
    if g.m == 0:
        raise ContractError("one_dim_entropy requires at least one edge")
    d_in = g.in_degrees.astype(np.float64)
    d_out = g.out_degrees.astype(np.float64)
    h_in = -float(_plogp(d_in / g.m).sum())
    h_out = -float(_plogp(d_out / g.m).sum())
    return EntropyReport(value=h_in + h_out, in_part=h_in, out_part=h_out)


def _crossing_counts(g: DiGraph, assignment: np.ndarray, n_blocks: int):
    """Per-block counts of strictly crossing edges (self-loops never cross)."""
    g_in = np.zeros(n_blocks, dtype=np.int64)
    g_out = np.zeros(n_blocks, dtype=np.int64)
    edges = g.edges()
    if len(edges):
        src_b = assignment[edges[:, 0]]
        dst_b = assignment[edges[:, 1]]
        crossing = src_b != dst_b
        np.add.at(g_in, dst_b[crossing], 1)
        np.add.at(g_out, src_b[crossing], 1)
    return g_in, g_out


def _directional_two_dim(degrees, assignment, n_blocks, g_cross, m) -> float:
    vol = np.zeros(n_blocks, dtype=np.float64)
    np.add.at(vol, assignment, degrees.astype(np.float64))
    value = 0.0
    for j in range(n_blocks):
        d = degrees[assignment == j].astype(np.float64)
        if vol[j] > 0:
            inner = _plogp(d / vol[j]).sum()
            value -= (vol[j] / m) * inner
        if g_cross[j] > 0:
            value -= (g_cross[j] / m) * np.log(vol[j] / m)
    return float(value)


def two_dim_entropy(g: DiGraph, p: Partition) -> EntropyReport:
    """Two-dimensional structural measurement of the given partition."""
    if g.m == 0:
        raise ContractError("two_dim_entropy requires at least one edge")
    if p.assignment.shape[0] != g.n:
        raise PartitionError(
            f"partition covers {p.assignment.shape[0]} nodes, graph has {g.n}")
    g_in, g_out = _crossing_counts(g, p.assignment, p.n_blocks)
    h_in = _directional_two_dim(g.in_degrees, p.assignment, p.n_blocks, g_in, g.m)
    h_out = _directional_two_dim(g.out_degrees, p.assignment, p.n_blocks, g_out, g.m)
    return EntropyReport(value=h_in + h_out, in_part=h_in, out_part=h_out)


def _node_term(g_cross: float, vol: float, vol_parent: float, m: float) -> float:
    if g_cross <= 0:
        return 0.0
    return -(g_cross / m) * np.log(vol / vol_parent)


def tree_entropy(g: DiGraph, t) -> EntropyReport:
    """h-dimensional structural measurement of a partition tree.

    Sums the cached per-node terms over every node except the root, in both
    directions. The tree's caches must be consistent with ``g``.
    """
    if g.m == 0:
        raise ContractError("tree_entropy requires at least one edge")
    if t.n_leaves != g.n:
        raise StructureError(f"tree has {t.n_leaves} leaves, graph has {g.n} nodes")
    m = float(g.m)
    h_in = 0.0
    h_out = 0.0
    for node in t.nodes():
        if node.parent is None:
            continue
        parent = t.node(node.parent)
        h_in += _node_term(node.g_in, node.vol_in, parent.vol_in, m)
        h_out += _node_term(node.g_out, node.vol_out, parent.vol_out, m)
    return EntropyReport(value=h_in + h_out, in_part=float(h_in), out_part=float(h_out))


def combine_delta_from_caches(vol_in_i, vol_out_i, vol_in_j, vol_out_j,
                              cut: float, m: float) -> float:
    """Entropy change of merging two root children with ``cut`` edges between.

    The sibling terms cancel exactly, leaving only the crossing-edge term of
    the new node; ``cut`` counts directed edges in either direction.
    """
    if cut <= 0:
        return 0.0
    return (cut / m) * (np.log((vol_in_i + vol_in_j) / m)
                        + np.log((vol_out_i + vol_out_j) / m))


def delta_combine(g: DiGraph, t, v_i: int, v_j: int) -> float:
    """Incremental tree-entropy change of combine(v_i, v_j)."""
    root = t.root
    a, b = t.node(v_i), t.node(v_j)
    if a.parent != root or b.parent != root or v_i == v_j:
        raise StructureError("combine expects two distinct children of the root")
    cut = t.cut_between(g, v_i, v_j)
    return combine_delta_from_caches(a.vol_in, a.vol_out, b.vol_in, b.vol_out,
                                     cut, float(g.m))


def delta_detach(g: DiGraph, t, v_i: int) -> float:
    """Incremental tree-entropy change of detach(v_i)."""
    node = t.node(v_i)
    if node.parent is None or node.is_leaf():
        raise StructureError("detach expects a non-root internal node")
    parent = t.node(node.parent)
    m = float(g.m)
    delta = 0.0
    for direction in ("in", "out"):
        vol_i = getattr(node, f"vol_{direction}")
        vol_p = getattr(parent, f"vol_{direction}")
        g_i = getattr(node, f"g_{direction}")
        g_children = sum(getattr(t.node(c), f"g_{direction}") for c in node.children)
        if vol_i > 0 and vol_p > 0:
            delta += ((g_i - g_children) / m) * np.log(vol_i / vol_p)
    return float(delta)
