"""Height-limited partition trees and their greedy construction.

The tree lives in an arena keyed by integer ids: leaf ids coincide with
graph-node ids, the root is ``n``, and nodes minted later get increasing
ids. All tie-breaking is "smallest id(s)", which together with seeded
sampling makes construction bit-reproducible.

Construction runs in three phases: (I) repeatedly combine the root-children
pair with the largest entropy reduction until the root has two children,
(II) detach the cheapest internal node on a maximum-depth path until the
height bound is met, (III) insert single-child filler nodes until every
leaf sits at uniform depth ``h``.

Phase I supports an exhaustive pair scan (the oracle mode used in tests)
and a Monte Carlo mode that scores a uniformly sampled subset of candidate
pairs, for near-linear scaling on large sparse graphs.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .digraph import DiGraph
from .entropy import EntropyReport, combine_delta_from_caches, delta_detach, tree_entropy
from .errors import ConfigError, StructureError
from .rng import stream

ROOT = "root"
INTERNAL = "internal"
FILLER = "filler"
LEAF = "leaf"


@dataclass
class TreeNode:
    id: int
    parent: int | None
    children: list[int] = field(default_factory=list)
    kind: str = INTERNAL
    graph_node: int | None = None
    vol_in: float = 0.0
    vol_out: float = 0.0
    g_in: float = 0.0
    g_out: float = 0.0
    depth: int = 0

    def is_leaf(self) -> bool:
        return self.kind == LEAF


class PartitionTree:
    """Arena-backed partition tree with cached volumes and crossing counts."""

    def __init__(self, n_leaves: int):
        self.n_leaves = n_leaves
        self.arena: dict[int, TreeNode] = {}
        self.root = n_leaves
        self._next_id = n_leaves + 1

    # -- construction ----------------------------------------------------

    @staticmethod
    def fresh(g: DiGraph) -> "PartitionTree":
        """Root directly over one singleton leaf per graph node."""
        t = PartitionTree(g.n)
        d_in = g.in_degrees
        d_out = g.out_degrees
        loops = np.zeros(g.n, dtype=np.int64)
        for v in range(g.n):
            if g.has_edge(v, v):
                loops[v] = 1
        root = TreeNode(id=t.root, parent=None, kind=ROOT,
                        vol_in=float(g.m), vol_out=float(g.m), depth=0)
        t.arena[t.root] = root
        for v in range(g.n):
            t.arena[v] = TreeNode(
                id=v, parent=t.root, kind=LEAF, graph_node=v,
                vol_in=float(d_in[v]), vol_out=float(d_out[v]),
                g_in=float(d_in[v] - loops[v]), g_out=float(d_out[v] - loops[v]),
                depth=1,
            )
            root.children.append(v)
        return t

    def new_id(self) -> int:
        nid = self._next_id
        self._next_id += 1
        return nid

    # -- access ----------------------------------------------------------

    def node(self, nid: int) -> TreeNode:
        try:
            return self.arena[nid]
        except KeyError:
            raise StructureError(f"unknown tree node {nid}") from None

    def nodes(self):
        return self.arena.values()

    def count_children(self, nid: int) -> int:
        return len(self.node(nid).children)

    def leaf_ids(self):
        return range(self.n_leaves)

    def leaves_under(self, nid: int) -> list[int]:
        """Graph nodes in the block of ``nid`` (sorted)."""
        out: list[int] = []
        stack = [nid]
        while stack:
            node = self.arena[stack.pop()]
            if node.is_leaf():
                out.append(node.graph_node)
            else:
                stack.extend(node.children)
        out.sort()
        return out

    def subtree_height(self, nid: int) -> int:
        self.node(nid)
        best = 0
        stack = [(nid, 0)]
        while stack:
            cur, d = stack.pop()
            node = self.arena[cur]
            if node.is_leaf():
                best = max(best, d)
            else:
                stack.extend((c, d + 1) for c in node.children)
        return best

    @property
    def height(self) -> int:
        return self.subtree_height(self.root)

    def refresh_depths(self) -> None:
        stack = [(self.root, 0)]
        while stack:
            nid, d = stack.pop()
            node = self.arena[nid]
            node.depth = d
            for c in node.children:
                stack.append((c, d + 1))

    def nodes_at_depth(self, depth: int) -> list[int]:
        return sorted(n.id for n in self.arena.values() if n.depth == depth)

    # -- meta-operations ---------------------------------------------------

    def cut_between(self, g: DiGraph, v_i: int, v_j: int) -> float:
        """Directed edges (either direction) between the two blocks."""
        members_i = self.leaves_under(v_i)
        mask_j = np.zeros(g.n, dtype=bool)
        mask_j[self.leaves_under(v_j)] = True
        cut = 0
        for v in members_i:
            cut += int(mask_j[g.out_neighbors(v)].sum())
            cut += int(mask_j[g.in_neighbors(v)].sum())
        return float(cut)

    def combine(self, g: DiGraph, v_i: int, v_j: int, _cut: float | None = None) -> int:
        """Insert a new internal node over two children of the root."""
        root = self.node(self.root)
        a, b = self.node(v_i), self.node(v_j)
        if a.parent != self.root or b.parent != self.root or v_i == v_j:
            raise StructureError("combine expects two distinct children of the root")
        cut = self.cut_between(g, v_i, v_j) if _cut is None else _cut
        nid = self.new_id()
        merged = TreeNode(
            id=nid, parent=self.root, children=[v_i, v_j], kind=INTERNAL,
            vol_in=a.vol_in + b.vol_in, vol_out=a.vol_out + b.vol_out,
            g_in=a.g_in + b.g_in - cut, g_out=a.g_out + b.g_out - cut,
            depth=1,
        )
        self.arena[nid] = merged
        pos = root.children.index(v_i)
        root.children[pos] = nid
        root.children.remove(v_j)
        a.parent = nid
        b.parent = nid
        return nid

    def detach(self, v_i: int) -> None:
        """Splice the children of ``v_i`` into its parent and remove it."""
        node = self.node(v_i)
        if node.parent is None or node.is_leaf():
            raise StructureError("detach expects a non-root internal node")
        parent = self.node(node.parent)
        pos = parent.children.index(v_i)
        parent.children[pos:pos + 1] = node.children
        for c in node.children:
            self.arena[c].parent = parent.id
        del self.arena[v_i]

    def insert_filler(self, v_i: int) -> int:
        """Insert a single-child filler between ``v_i`` and its parent."""
        node = self.node(v_i)
        if node.parent is None:
            raise StructureError("cannot insert a filler above the root")
        parent = self.node(node.parent)
        nid = self.new_id()
        filler = TreeNode(
            id=nid, parent=parent.id, children=[v_i], kind=FILLER,
            vol_in=node.vol_in, vol_out=node.vol_out,
            g_in=node.g_in, g_out=node.g_out, depth=node.depth,
        )
        self.arena[nid] = filler
        parent.children[parent.children.index(v_i)] = nid
        node.parent = nid
        return nid

    def delta_height(self, v_i: int) -> int:
        node = self.node(v_i)
        if node.parent is None:
            raise StructureError("delta_height expects a node with a parent")
        return abs(self.subtree_height(node.parent) - self.subtree_height(v_i))

    # -- maintenance -------------------------------------------------------

    def recompute_caches(self, g: DiGraph) -> None:
        """Rebuild vol/g caches from the graph (used after leaf moves)."""
        self.refresh_depths()
        for node in self.arena.values():
            node.vol_in = 0.0
            node.vol_out = 0.0
            node.g_in = 0.0
            node.g_out = 0.0
        d_in = g.in_degrees
        d_out = g.out_degrees
        order = sorted(self.arena.values(), key=lambda nd: -nd.depth)
        for node in order:
            if node.is_leaf():
                node.vol_in = float(d_in[node.graph_node])
                node.vol_out = float(d_out[node.graph_node])
            if node.parent is not None:
                parent = self.arena[node.parent]
                parent.vol_in += node.vol_in
                parent.vol_out += node.vol_out
        self.refresh_depths()
        edges = g.edges()
        for u, v in edges:
            if u == v:
                continue
            au, av = self.arena[int(u)], self.arena[int(v)]
            while au.depth > av.depth:
                au.g_out += 1
                au = self.arena[au.parent]
            while av.depth > au.depth:
                av.g_in += 1
                av = self.arena[av.parent]
            while au.id != av.id:
                au.g_out += 1
                av.g_in += 1
                au = self.arena[au.parent]
                av = self.arena[av.parent]

    def validate(self, g: DiGraph, uniform_depth: bool = True) -> None:
        """Check partition-tree structure and cache consistency; raise on failure."""
        leaves = [n for n in self.arena.values() if n.is_leaf()]
        if len(leaves) != g.n or len(leaves) != self.n_leaves:
            raise StructureError(f"expected {g.n} leaves, found {len(leaves)}")
        seen = sorted(n.graph_node for n in leaves)
        if seen != list(range(g.n)):
            raise StructureError("leaves are not a bijection onto graph nodes")
        root = self.node(self.root)
        if root.parent is not None or root.kind != ROOT:
            raise StructureError("malformed root")
        for node in self.arena.values():
            if node.is_leaf() and node.children:
                raise StructureError(f"leaf {node.id} has children")
            if not node.is_leaf() and not node.children:
                raise StructureError(f"internal node {node.id} has no children")
            if node.kind == FILLER and len(node.children) != 1:
                raise StructureError(f"filler {node.id} must have exactly one child")
            for c in node.children:
                if self.node(c).parent != node.id:
                    raise StructureError(f"parent/child mismatch at {node.id}->{c}")
        self.refresh_depths()
        depths = {n.depth for n in self.arena.values() if n.is_leaf()}
        if uniform_depth and len(depths) != 1:
            raise StructureError(f"leaf depths not uniform: {sorted(depths)}")
        if uniform_depth:
            height = max(depths)
            for level in range(1, height + 1):
                covered: list[int] = []
                for nid in self.nodes_at_depth(level):
                    covered.extend(self.leaves_under(nid))
                covered.sort()
                if covered != list(range(g.n)):
                    raise StructureError(f"level {level} does not partition the node set")
        snapshot = {
            nid: (nd.vol_in, nd.vol_out, nd.g_in, nd.g_out)
            for nid, nd in self.arena.items()
        }
        self.recompute_caches(g)
        for nid, (vi, vo, gi, go) in snapshot.items():
            nd = self.arena[nid]
            if not (math.isclose(vi, nd.vol_in, abs_tol=1e-9)
                    and math.isclose(vo, nd.vol_out, abs_tol=1e-9)
                    and math.isclose(gi, nd.g_in, abs_tol=1e-9)
                    and math.isclose(go, nd.g_out, abs_tol=1e-9)):
                raise StructureError(f"stale caches at node {nid}")

    def clone(self) -> "PartitionTree":
        t = PartitionTree(self.n_leaves)
        t.root = self.root
        t._next_id = self._next_id
        for nid, node in self.arena.items():
            t.arena[nid] = TreeNode(
                id=node.id, parent=node.parent, children=list(node.children),
                kind=node.kind, graph_node=node.graph_node,
                vol_in=node.vol_in, vol_out=node.vol_out,
                g_in=node.g_in, g_out=node.g_out, depth=node.depth,
            )
        return t

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        self.refresh_depths()
        return {
            "n_leaves": self.n_leaves,
            "root": self.root,
            "height": self.height,
            "nodes": [
                {
                    "id": nd.id,
                    "parent": nd.parent,
                    "children": list(nd.children),
                    "kind": nd.kind,
                    "graph_node": nd.graph_node,
                    "vol_in": nd.vol_in,
                    "vol_out": nd.vol_out,
                    "g_in": nd.g_in,
                    "g_out": nd.g_out,
                    "depth": nd.depth,
                }
                for nd in sorted(self.arena.values(), key=lambda nd: nd.id)
            ],
        }

    @staticmethod
    def from_dict(payload: dict) -> "PartitionTree":
        t = PartitionTree(payload["n_leaves"])
        t.root = payload["root"]
        max_id = t.root
        for spec in payload["nodes"]:
            t.arena[spec["id"]] = TreeNode(
                id=spec["id"], parent=spec["parent"], children=list(spec["children"]),
                kind=spec["kind"], graph_node=spec["graph_node"],
                vol_in=spec["vol_in"], vol_out=spec["vol_out"],
                g_in=spec["g_in"], g_out=spec["g_out"], depth=spec["depth"],
            )
            max_id = max(max_id, spec["id"])
        t._next_id = max_id + 1
        return t

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_dot(self) -> str:
        lines = ["digraph hkt {"]
        for nd in sorted(self.arena.values(), key=lambda nd: nd.id):
            label = f"leaf {nd.graph_node}" if nd.is_leaf() else f"{nd.kind} {nd.id}"
            lines.append(f'  n{nd.id} [label="{label}"];')
            for c in nd.children:
                lines.append(f"  n{nd.id} -> n{c};")
        lines.append("}")
        return "\n".join(lines)


# --------------------------------------------------------------------------
# Pair selection
# --------------------------------------------------------------------------


def default_mc_samples(k: int) -> int:
    """Default Monte Carlo candidate count for k root children."""
    return max(64, math.isqrt(k * (k - 1) // 2) + 1)


def _decode_pair(code: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Map linear codes in [0, k*(k-1)/2) onto (i, j) index pairs with i < j."""
    # Row r covers codes [r*(2k-r-1)/2, ...) of length k - 1 - r.
    b = 2 * k - 1
    i = np.floor((b - np.sqrt(b * b - 8.0 * code)) / 2).astype(np.int64)
    # Guard against float rounding at row boundaries.
    for _ in range(2):
        first = i * (2 * k - i - 1) // 2
        i = np.where(code < first, i - 1, i)
        first = i * (2 * k - i - 1) // 2
        i = np.where(code >= first + (k - 1 - i), i + 1, i)
    first = i * (2 * k - i - 1) // 2
    j = (code - first) + i + 1
    return i, j


def _sample_distinct_pairs(k: int, s: int, rng) -> tuple[np.ndarray, np.ndarray]:
    total = k * (k - 1) // 2
    if s >= total:
        i, j = np.triu_indices(k, 1)
        return i.astype(np.int64), j.astype(np.int64)
    chosen: list[int] = []
    seen: set[int] = set()
    while len(chosen) < s:
        draw = rng.integers(0, total, size=2 * (s - len(chosen)))
        for code in draw:
            c = int(code)
            if c not in seen:
                seen.add(c)
                chosen.append(c)
                if len(chosen) == s:
                    break
    return _decode_pair(np.asarray(chosen, dtype=np.int64), k)


def _best_pair(ids_a, ids_b, cuts, vol_in, vol_out, m) -> tuple[int, int, float]:
    """Best (lowest-delta) candidate with smallest-(id, id) tie-breaking."""
    lo = np.minimum(ids_a, ids_b)
    hi = np.maximum(ids_a, ids_b)
    delta = np.zeros(len(cuts))
    pos = cuts > 0
    if pos.any():
        vin = vol_in[lo[pos]] + vol_in[hi[pos]]
        vout = vol_out[lo[pos]] + vol_out[hi[pos]]
        delta[pos] = (cuts[pos] / m) * (np.log(vin / m) + np.log(vout / m))
    best = np.lexsort((hi, lo, delta))[0]
    return int(lo[best]), int(hi[best]), float(delta[best])


class _Supernodes:
    """Root-children bookkeeping for Phase I: volumes plus cross-edge counts."""

    def __init__(self, g: DiGraph, t: PartitionTree):
        cap = 2 * g.n + 2
        self.vol_in = np.zeros(cap)
        self.vol_out = np.zeros(cap)
        self.adj: dict[int, dict[int, float]] = {}
        self.children: list[int] = []
        for cid in t.node(t.root).children:
            nd = t.node(cid)
            self.vol_in[cid] = nd.vol_in
            self.vol_out[cid] = nd.vol_out
            self.adj[cid] = {}
            self.children.append(cid)
        for u, v in g.edges():
            iu, iv = int(u), int(v)
            if iu == iv:
                continue
            self.adj[iu][iv] = self.adj[iu].get(iv, 0.0) + 1.0
            self.adj[iv][iu] = self.adj[iv].get(iu, 0.0) + 1.0

    def _grow(self, nid: int) -> None:
        if nid >= len(self.vol_in):
            extra = max(len(self.vol_in), nid + 1) - len(self.vol_in)
            self.vol_in = np.concatenate([self.vol_in, np.zeros(extra)])
            self.vol_out = np.concatenate([self.vol_out, np.zeros(extra)])

    def cut(self, a: int, b: int) -> float:
        return self.adj[a].get(b, 0.0)

    def cuts(self, ids_a: np.ndarray, ids_b: np.ndarray) -> np.ndarray:
        adj = self.adj
        return np.fromiter(
            (adj[int(a)].get(int(b), 0.0) for a, b in zip(ids_a, ids_b)),
            dtype=np.float64, count=len(ids_a))

    def merge(self, a: int, b: int, nid: int) -> None:
        self._grow(nid)
        self.vol_in[nid] = self.vol_in[a] + self.vol_in[b]
        self.vol_out[nid] = self.vol_out[a] + self.vol_out[b]
        merged: dict[int, float] = {}
        for old in (a, b):
            for nbr, w in self.adj.pop(old).items():
                if nbr in (a, b):
                    continue
                merged[nbr] = merged.get(nbr, 0.0) + w
                del self.adj[nbr][old]
        for nbr, w in merged.items():
            self.adj[nbr][nid] = w
        self.adj[nid] = merged
        self.children.remove(a)
        self.children.remove(b)
        self.children.append(nid)


def pick_two(g: DiGraph, t: PartitionTree, strategy: str = "exhaustive",
             samples: int | None = None, seed: int = 0,
             _super: _Supernodes | None = None,
             _step: int = 0) -> tuple[int, int]:
    """Choose the root-children pair whose merge reduces tree entropy most.

    ``exhaustive`` scans every pair; ``mc`` scores a uniform sample of
    distinct pairs (deterministic given ``seed``). Ties break toward the
    smallest (id_i, id_j).
    """
    children = _super.children if _super is not None else list(t.node(t.root).children)
    k = len(children)
    if k < 2:
        raise StructureError("pick_two needs at least two root children")
    ids = np.asarray(children, dtype=np.int64)
    if strategy == "exhaustive":
        idx_a, idx_b = np.triu_indices(k, 1)
    elif strategy == "mc":
        s = samples if samples is not None else default_mc_samples(k)
        rng = stream(seed, "pick_two", _step)
        idx_a, idx_b = _sample_distinct_pairs(k, s, rng)
    else:
        raise ConfigError(f"unknown strategy {strategy!r}")
    ids_a, ids_b = ids[idx_a], ids[idx_b]
    if _super is not None:
        cuts = _super.cuts(ids_a, ids_b)
        vol_in, vol_out = _super.vol_in, _super.vol_out
    else:
        cuts = np.fromiter(
            (t.cut_between(g, int(a), int(b)) for a, b in zip(ids_a, ids_b)),
            dtype=np.float64, count=len(ids_a))
        cap = max(int(ids.max()) + 1, 1)
        vol_in = np.zeros(cap)
        vol_out = np.zeros(cap)
        for cid in children:
            nd = t.node(cid)
            vol_in[cid] = nd.vol_in
            vol_out[cid] = nd.vol_out
    a, b, _ = _best_pair(ids_a, ids_b, cuts, vol_in, vol_out, float(g.m))
    return a, b


def choose_node(g: DiGraph, t: PartitionTree) -> int:
    """Cheapest detachable node on a maximum-depth root-to-leaf path."""
    t.refresh_depths()
    leaf_depths = [(t.node(l).depth, l) for l in t.leaf_ids()]
    height = max(d for d, _ in leaf_depths)
    candidates: set[int] = set()
    for depth, leaf in leaf_depths:
        if depth != height:
            continue
        nid = t.node(leaf).parent
        while nid is not None and nid != t.root:
            candidates.add(nid)
            nid = t.node(nid).parent
    if not candidates:
        raise StructureError("no detachable node on a maximum-depth path")
    best = min(candidates, key=lambda nid: (delta_detach(g, t, nid), nid))
    return best


# --------------------------------------------------------------------------
# Three-phase construction
# --------------------------------------------------------------------------


def _phase1(g: DiGraph, t: PartitionTree, strategy: str, samples, seed: int) -> None:
    sup = _Supernodes(g, t)
    step = 0
    while len(sup.children) > 2:
        a, b = pick_two(g, t, strategy=strategy, samples=samples, seed=seed,
                        _super=sup, _step=step)
        cut = sup.cut(a, b)
        nid = t.combine(g, a, b, _cut=cut)
        sup.merge(a, b, nid)
        step += 1


def _subtree_ids(t: PartitionTree, nid: int) -> list[int]:
    out = []
    stack = [nid]
    while stack:
        cur = stack.pop()
        out.append(cur)
        stack.extend(t.node(cur).children)
    return out


def _phase2(g: DiGraph, t: PartitionTree, h: int) -> None:
    """Detach cheapest max-depth-path nodes until the height bound holds.

    Depths and per-subtree maximum leaf depths are maintained incrementally;
    within one height-reduction round the candidate set only shrinks, so a
    lazy heap with at-pop revalidation matches the exhaustive argmin.
    """
    t.refresh_depths()
    mld: dict[int, int] = {}
    for node in sorted(t.arena.values(), key=lambda nd: -nd.depth):
        if node.is_leaf():
            mld[node.id] = node.depth
        if node.parent is not None:
            p = node.parent
            mld[p] = max(mld.get(p, 0), mld[node.id])

    while mld[t.root] > h:
        target = mld[t.root]
        heap = []
        for node in t.arena.values():
            if node.parent is None or node.is_leaf():
                continue
            if mld[node.id] == target:
                heap.append((delta_detach(g, t, node.id), node.id))
        heapq.heapify(heap)
        while mld[t.root] == target:
            delta, nid = heapq.heappop(heap)
            node = t.arena.get(nid)
            if node is None or node.parent is None or mld.get(nid) != target:
                continue
            fresh = delta_detach(g, t, nid)
            if fresh > delta + 1e-12:
                heapq.heappush(heap, (fresh, nid))
                continue
            parent_id = node.parent
            for sub in _subtree_ids(t, nid):
                if sub != nid:
                    t.arena[sub].depth -= 1
                    mld[sub] -= 1
            t.detach(nid)
            del mld[nid]
            cur = parent_id
            while cur is not None:
                nd = t.arena[cur]
                new_mld = max(mld[c] for c in nd.children)
                if new_mld == mld[cur]:
                    break
                mld[cur] = new_mld
                cur = nd.parent


def _phase3(t: PartitionTree, h: int) -> None:
    """Stabilize to uniform leaf depth exactly ``h``.

    Shallow leaves first get filler chains to the current height; if the
    whole tree is still shallower than ``h`` the remaining levels are
    padded at the top (fillers between the root and its children), which
    keeps the bottom-level partition blocks intact.
    """
    t.refresh_depths()
    height = max(t.node(l).depth for l in t.leaf_ids())
    for leaf in t.leaf_ids():
        for _ in range(height - t.node(leaf).depth):
            t.insert_filler(leaf)
    for _ in range(h - height):
        for child in list(t.node(t.root).children):
            t.insert_filler(child)
    t.refresh_depths()


def build_hkt(g: DiGraph, h: int, strategy: str = "exhaustive",
              seed: int = 0, samples: int | None = None,
              ) -> tuple[PartitionTree, EntropyReport]:
    """Construct the height-``h`` partition tree minimizing directed entropy."""
    if h < 2:
        raise ConfigError(f"tree height must be >= 2, got {h}")
    if g.m == 0:
        raise ConfigError("build_hkt requires at least one edge (add sink loops first)")
    t = PartitionTree.fresh(g)
    _phase1(g, t, strategy, samples, seed)
    _phase2(g, t, h)
    _phase3(t, h)
    t.validate(g)
    return t, tree_entropy(g, t)
