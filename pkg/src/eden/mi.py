"""Partition-based mutual-information estimation and tree correction.

A critic scores (node, generalized-neighborhood) pairs: shared linear
encoders for the two sides feed role-specific MLP heads (intra pairs a node
with its own partition's aggregate, inter pairs a node with the aggregate
of the current-plus-source union). The training objective is the GAN-style
lower bound: mean log-sigmoid over matched pairs plus mean
log(1 - sigmoid) over all ordered mismatched pairs inside the sample set.

After training, sampled inter nodes whose affinity for the current
partition beats the affinity for their own partition by a margin are
re-parented, with volume and crossing caches rebuilt afterwards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .digraph import DiGraph
from .errors import ConfigError, ContractError, DivergenceError, StructureError
from .hkt import PartitionTree
from .propagate import PropagationConfig, aggregation_weights, propagate_global
from .rng import derive, stream

INTRA = "intra"
INTER = "inter"


@dataclass(frozen=True)
class OmegaEntry:
    member: int
    role: str
    source: int | None = None  # sibling partition id for inter entries


@dataclass
class SampleSet:
    partition: int
    entries: list[OmegaEntry]
    kappa: float
    shortfall: int = 0

    def members(self) -> list[int]:
        return [e.member for e in self.entries]

    def intra_count(self) -> int:
        return sum(1 for e in self.entries if e.role == INTRA)


def level_partitions(tree: PartitionTree, depth: int) -> list[tuple[int, list[int]]]:
    """(node id, member child ids) for every node at the given depth."""
    tree.refresh_depths()
    out = []
    for nid in tree.nodes_at_depth(depth):
        node = tree.node(nid)
        if node.is_leaf():
            continue
        out.append((nid, list(node.children)))
    return out


def sample_omega(tree: PartitionTree, p: int, kappa: float, seed: int) -> SampleSet:
    """All members of partition ``p`` plus round-robin sibling samples.

    Sibling partitions sit at the same tree depth; sampling visits them in
    id order, drawing uniformly without replacement inside each, until the
    set reaches ceil(kappa * |X_p|) entries or the siblings are exhausted.
    """
    if not 1.0 <= kappa <= 2.0:
        raise ConfigError(f"kappa must be in [1, 2], got {kappa}")
    node = tree.node(p)
    if node.is_leaf():
        raise StructureError(f"node {p} is a leaf, not a partition")
    tree.refresh_depths()
    own = sorted(node.children)
    entries = [OmegaEntry(member=m, role=INTRA) for m in own]
    target = math.ceil(kappa * len(own))
    siblings = [(nid, sorted(tree.node(nid).children))
                for nid in tree.nodes_at_depth(node.depth)
                if nid != p and not tree.node(nid).is_leaf()]
    rng = stream(seed, "omega", p)
    pools = [(nid, list(members)) for nid, members in siblings]
    taken = [0] * len(pools)
    remaining = sum(len(pool) for _, pool in pools)
    while len(entries) < target and remaining > 0:
        for slot, (nid, pool) in enumerate(pools):
            if len(entries) >= target:
                break
            t = taken[slot]
            if t >= len(pool):
                continue
            # partial Fisher-Yates: one uniform draw without replacement
            j = t + int(rng.integers(len(pool) - t))
            pool[t], pool[j] = pool[j], pool[t]
            entries.append(OmegaEntry(member=pool[t], role=INTER, source=nid))
            taken[slot] = t + 1
            remaining -= 1
    return SampleSet(partition=p, entries=entries, kappa=kappa,
                     shortfall=max(0, target - len(entries)))


class MiCritic:
    """Shared node/neighborhood encoders with intra and inter scoring heads."""

    def __init__(self, node_dim: int, nbhd_dim: int, hidden: int, rng):
        self.w1 = nn.Mlp([node_dim, hidden], rng, ["identity"], name="critic.w1")
        self.w2 = nn.Mlp([nbhd_dim, hidden], rng, ["identity"], name="critic.w2")
        self.q_intra = nn.Mlp([2 * hidden, hidden, 1], rng, name="critic.q_intra")
        self.q_inter = nn.Mlp([2 * hidden, hidden, 1], rng, name="critic.q_inter")

    def head(self, role: str) -> nn.Mlp:
        return self.q_intra if role == INTRA else self.q_inter

    def score_rows(self, node_rows: nn.Tensor, nbhd_rows: nn.Tensor, role: str) -> nn.Tensor:
        """Critic outputs (one column) for row-aligned node/neighborhood pairs."""
        if node_rows.shape[0] != nbhd_rows.shape[0]:
            raise ContractError("node/neighborhood row counts differ")
        enc = nn.concat_cols([self.w1(node_rows), self.w2(nbhd_rows)])
        return self.head(role)(enc)

    def parameters(self) -> list[tuple[str, nn.Tensor]]:
        out = []
        for net in (self.w1, self.w2, self.q_intra, self.q_inter):
            out.extend(net.parameters())
        return out


def critic_score(critic: MiCritic, node_emb, nbhd_emb, role: str) -> float:
    """Scalar critic output for one (node, neighborhood) embedding pair."""
    node_rows = node_emb if isinstance(node_emb, nn.Tensor) else nn.constant(node_emb)
    nbhd_rows = nbhd_emb if isinstance(nbhd_emb, nn.Tensor) else nn.constant(nbhd_emb)
    return critic.score_rows(node_rows, nbhd_rows, role).item()


@dataclass
class OmegaBatch:
    """Row-aligned embeddings for one sample set.

    ``pos_nbhd`` holds each entry's generalized neighborhood (own partition
    aggregate for intra entries, current-union aggregate for inter ones);
    ``own_nbhd`` holds the source partition's aggregate for inter entries
    and repeats the intra aggregate elsewhere.
    """

    omega: SampleSet
    node_reps: nn.Tensor
    pos_nbhd: nn.Tensor
    own_nbhd: nn.Tensor

    def roles(self) -> list[str]:
        return [e.role for e in self.omega.entries]

    def size(self) -> int:
        return len(self.omega.entries)


def _pair_scores(critic: MiCritic, batch: OmegaBatch,
                 node_idx: np.ndarray, nbhd_idx: np.ndarray) -> nn.Tensor:
    """Scores for (node_idx[i], neighborhood-of nbhd_idx[i]) pairs.

    The head follows the neighborhood owner's role, since that determines
    which kind of generalized neighborhood is being matched.
    """
    roles = batch.roles()
    cols = []
    order = []
    for role in (INTRA, INTER):
        sel = np.asarray([i for i, j in enumerate(nbhd_idx) if roles[j] == role],
                         dtype=np.int64)
        if sel.size == 0:
            continue
        nodes = nn.rows(batch.node_reps, node_idx[sel])
        nbhds = nn.rows(batch.pos_nbhd, nbhd_idx[sel])
        cols.append(critic.score_rows(nodes, nbhds, role))
        order.append(sel)
    scores = nn.concat_rows(cols) if len(cols) > 1 else cols[0]
    perm = np.concatenate(order)
    inverse = np.empty_like(perm)
    inverse[perm] = np.arange(len(perm))
    return nn.rows(scores, inverse)


def log_sigmoid_mean(scores: nn.Tensor, negate: bool = False) -> nn.Tensor:
    x = nn.scale(scores, -1.0) if negate else scores
    # log sigmoid(x) = x - softplus(x); softplus via the stable sigmoid path
    return nn.mean_all(nn.log(nn.clip_min(nn.sigmoid(x), 1e-300)))


def gan_mi_objective(critic: MiCritic, batch: OmegaBatch) -> nn.Tensor:
    """GAN-style MI lower bound over the sample set.

    Mean log-sigmoid of matched pair scores plus the mean, over all ordered
    pairs with distinct members, of log(1 - sigmoid) of mismatched scores.
    The constant-zero critic yields exactly -2*ln(2).
    """
    k = batch.size()
    if k < 2:
        raise ContractError("gan_mi_objective needs at least two entries")
    idx = np.arange(k, dtype=np.int64)
    pos = _pair_scores(critic, batch, idx, idx)
    grid_v, grid_n = np.meshgrid(idx, idx, indexing="ij")
    off = grid_v.reshape(-1) != grid_n.reshape(-1)
    neg = _pair_scores(critic, batch, grid_v.reshape(-1)[off], grid_n.reshape(-1)[off])
    term_pos = log_sigmoid_mean(pos)
    term_neg = log_sigmoid_mean(neg, negate=True)
    return nn.add(term_pos, term_neg)


# --------------------------------------------------------------------------
# Leaf-level embedding context
# --------------------------------------------------------------------------


class LeafContext:
    """Caches every training-invariant piece of the leaf level.

    Global propagated features (input to the trainable linear map), the
    leaf partitions, and the per-partition aggregation rows that send leaf
    distribution rows to propagated-neighborhood means.
    """

    def __init__(self, g: DiGraph, tree: PartitionTree, X: np.ndarray,
                 cfg: PropagationConfig, kappa: float = 1.5):
        self.g = g
        self.tree = tree
        self.cfg = cfg
        self.kappa = kappa
        self.prop_features = propagate_global(g, X, cfg)
        tree.refresh_depths()
        self.leaf_depth = tree.node(0).depth
        self.partitions = level_partitions(tree, self.leaf_depth - 1)
        self._intra_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self._union_cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}

    def refresh_partitions(self) -> None:
        self.tree.refresh_depths()
        self.partitions = level_partitions(self.tree, self.leaf_depth - 1)
        self._intra_cache.clear()
        self._union_cache.clear()

    def leaf_logits(self, m_linear: nn.Mlp) -> nn.Tensor:
        return m_linear(nn.constant(self.prop_features))

    def leaf_dists(self, m_linear: nn.Mlp) -> nn.Tensor:
        return nn.softmax(self.leaf_logits(m_linear))

    def _intra(self, pid: int) -> tuple[np.ndarray, np.ndarray]:
        if pid not in self._intra_cache:
            members = np.asarray(sorted(self.tree.node(pid).children), dtype=np.int64)
            w = aggregation_weights(self.g, members, self.cfg)
            self._intra_cache[pid] = (members, w)
        return self._intra_cache[pid]

    def _union(self, p: int, q: int) -> tuple[np.ndarray, np.ndarray]:
        key = (p, q)
        if key not in self._union_cache:
            members = sorted(set(self.tree.node(p).children)
                             | set(self.tree.node(q).children))
            members = np.asarray(members, dtype=np.int64)
            w = aggregation_weights(self.g, members, self.cfg)
            self._union_cache[key] = (members, w)
        return self._union_cache[key]

    def intra_nbhd(self, pid: int, dists: nn.Tensor) -> nn.Tensor:
        members, w = self._intra(pid)
        return nn.matmul(nn.constant(w), nn.rows(dists, members))

    def union_nbhd(self, p: int, q: int, dists: nn.Tensor) -> nn.Tensor:
        members, w = self._union(p, q)
        return nn.matmul(nn.constant(w), nn.rows(dists, members))

    def batch(self, omega: SampleSet, dists: nn.Tensor) -> OmegaBatch:
        members = np.asarray(omega.members(), dtype=np.int64)
        node_reps = nn.rows(dists, members)
        intra_row = self.intra_nbhd(omega.partition, dists)
        pos_rows, own_rows = [], []
        for e in omega.entries:
            if e.role == INTRA:
                pos_rows.append(intra_row)
                own_rows.append(intra_row)
            else:
                pos_rows.append(self.union_nbhd(omega.partition, e.source, dists))
                own_rows.append(self.intra_nbhd(e.source, dists))
        return OmegaBatch(omega=omega, node_reps=node_reps,
                          pos_nbhd=nn.concat_rows(pos_rows),
                          own_nbhd=nn.concat_rows(own_rows))


# --------------------------------------------------------------------------
# Critic training and tree refinement
# --------------------------------------------------------------------------


@dataclass
class ScoreRecord:
    partition: int
    member: int
    role: str
    source: int | None
    s_intra: float  # S_v1 for intra entries, S_v2,2 for inter entries
    s_current: float  # S_v2,1 for inter entries (0 for intra)


@dataclass
class CriticTraining:
    critic: MiCritic
    trace: list[float] = field(default_factory=list)
    scores: list[ScoreRecord] = field(default_factory=list)


def partition_scores(critic: MiCritic, batch: OmegaBatch) -> list[ScoreRecord]:
    """Sigmoid affinity scores for every entry of one sample set.

    Intra entries get the intra head on (x, X_p); inter entries get the
    inter head on (x, union) plus the intra head on (x, own partition).
    """
    records = []
    roles = batch.roles()
    idx = np.arange(batch.size(), dtype=np.int64)
    intra_sel = idx[[r == INTRA for r in roles]]
    inter_sel = idx[[r == INTER for r in roles]]
    s_pos = np.zeros(batch.size())
    if intra_sel.size:
        s = critic.score_rows(nn.rows(batch.node_reps, intra_sel),
                              nn.rows(batch.pos_nbhd, intra_sel), INTRA)
        s_pos[intra_sel] = _sigmoid_np(s.data.reshape(-1))
    if inter_sel.size:
        s = critic.score_rows(nn.rows(batch.node_reps, inter_sel),
                              nn.rows(batch.pos_nbhd, inter_sel), INTER)
        s_pos[inter_sel] = _sigmoid_np(s.data.reshape(-1))
        own = critic.score_rows(nn.rows(batch.node_reps, inter_sel),
                                nn.rows(batch.own_nbhd, inter_sel), INTRA)
        s_own = _sigmoid_np(own.data.reshape(-1))
    for row, entry in enumerate(batch.omega.entries):
        if entry.role == INTRA:
            records.append(ScoreRecord(batch.omega.partition, entry.member,
                                       INTRA, None, s_pos[row], 0.0))
        else:
            pos_in_inter = int(np.searchsorted(inter_sel, row))
            records.append(ScoreRecord(batch.omega.partition, entry.member,
                                       INTER, entry.source,
                                       float(s_own[pos_in_inter]), s_pos[row]))
    return records


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)),
                    np.exp(np.clip(x, -500, 0)) / (1.0 + np.exp(np.clip(x, -500, 0))))


def train_critic(ctx: LeafContext, critic: MiCritic, m_linear: nn.Mlp,
                 epochs: int, lr: float, seed: int) -> CriticTraining:
    """Adam ascent on the summed per-partition GAN MI objectives.

    Returns the trained critic, the per-epoch mean objective trace, and
    final per-node scores from a fixed-seed sampling pass.
    """
    params = [p for _, p in critic.parameters()] + [p for _, p in m_linear.parameters()]
    opt = nn.Adam(params, lr=lr)
    result = CriticTraining(critic=critic)
    for epoch in range(epochs):
        dists = ctx.leaf_dists(m_linear)
        objectives = []
        for pid, members in ctx.partitions:
            omega = sample_omega(ctx.tree, pid, ctx.kappa,
                                 seed=derive(seed, "train", epoch))
            if len(omega.entries) < 2:
                continue
            batch = ctx.batch(omega, dists)
            objectives.append(gan_mi_objective(critic, batch))
        if not objectives:
            break
        stacked = nn.concat_rows(objectives) if len(objectives) > 1 else objectives[0]
        mean_obj = nn.mean_all(stacked)
        loss = nn.scale(mean_obj, -1.0)
        if not np.isfinite(loss.data[0, 0]):
            raise DivergenceError(f"non-finite MI objective at epoch {epoch}")
        opt.zero_grad()
        nn.backward(loss)
        opt.step()
        result.trace.append(mean_obj.item())
    dists = ctx.leaf_dists(m_linear)
    for pid, members in ctx.partitions:
        omega = sample_omega(ctx.tree, pid, ctx.kappa, seed=derive(seed, "scores"))
        if not omega.entries:
            continue
        batch = ctx.batch(omega, dists)
        result.scores.extend(partition_scores(critic, batch))
    return result


@dataclass
class TreeMove:
    node: int
    source: int
    target: int
    s_current: float
    s_own: float
    applied: bool
    reason: str


def refine_tree(g: DiGraph, tree: PartitionTree, scores: list[ScoreRecord],
                delta: float, ctx: LeafContext | None = None,
                ) -> tuple[PartitionTree, list[TreeMove]]:
    """Re-parent sampled inter leaves whose current-partition affinity wins.

    A node u sampled from X_q into partition p moves under p when
    S_{2,1}(u) > S_{2,2}(u) + delta, unless the move would empty X_q. The
    tree's caches are rebuilt afterwards.
    """
    if delta < 0:
        raise ConfigError("delta must be >= 0")
    log: list[TreeMove] = []
    moved = False
    for rec in scores:
        if rec.role != INTER:
            continue
        if not rec.s_current > rec.s_intra + delta:
            log.append(TreeMove(rec.member, rec.source, rec.partition,
                                rec.s_current, rec.s_intra, False, "margin"))
            continue
        node = tree.node(rec.member)
        if node.parent != rec.source:
            log.append(TreeMove(rec.member, rec.source, rec.partition,
                                rec.s_current, rec.s_intra, False, "stale"))
            continue
        source = tree.node(rec.source)
        if len(source.children) <= 1:
            log.append(TreeMove(rec.member, rec.source, rec.partition,
                                rec.s_current, rec.s_intra, False, "would-empty"))
            continue
        source.children.remove(rec.member)
        tree.node(rec.partition).children.append(rec.member)
        node.parent = rec.partition
        moved = True
        log.append(TreeMove(rec.member, rec.source, rec.partition,
                            rec.s_current, rec.s_intra, True, "moved"))
    if moved:
        tree.recompute_caches(g)
        if ctx is not None:
            ctx.refresh_partitions()
    return tree, log
