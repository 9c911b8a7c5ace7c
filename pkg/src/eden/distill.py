"""Node-adaptive knowledge generation and personalized transfer.

Per partition: the critic turns every sampled entry into an affinity score
(intra entries score against their own partition, inter entries take the
better of their current-partition and own-partition affinities), the scores
are softmax-normalized into convex weights, and the weighted combination of
the entries' class-probability rows becomes the parent representation.

Transfer penalizes each child's deviation from the parent representation
scaled by the parent's uncertainty: U_p is a squashed map of the parent
entropy, and the loss is the mean Frobenius norm of X_p / U_p minus the
child head's output, averaged over partitions and levels.

Bottom-up traversal supplies every tree node with a representation: leaves
carry propagated class distributions, fillers inherit their single child,
internal nodes get generated parents.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .digraph import DiGraph
from .errors import ContractError
from .hkt import FILLER, PartitionTree
from .mi import (INTER, INTRA, LeafContext, MiCritic, OmegaBatch, SampleSet,
                 sample_omega)
from .rng import derive


@dataclass
class AffinityScores:
    """Per-entry raw scores and the softmax-normalized generation weights."""

    omega: SampleSet
    s_v1: nn.Tensor | None  # intra entries, column
    s_v21: nn.Tensor | None  # inter entries, column
    s_v22: nn.Tensor | None  # inter entries, column
    weights: nn.Tensor  # 1 x |omega| row, sums to 1


@dataclass
class PartitionKnowledge:
    partition: int
    parent_rep: nn.Tensor  # 1 x c probability row
    uncertainty: nn.Tensor  # 1 x 1
    child_ids: list[int]


def affinity_scores(critic: MiCritic, batch: OmegaBatch,
                    diverse_knowledge: bool = True) -> AffinityScores:
    """Eq-style affinity scores with softmax normalization over the sample set.

    ``diverse_knowledge=False`` drops the max with the own-partition score,
    so inter entries are weighted by their current-partition affinity only.
    """
    roles = batch.roles()
    idx = np.arange(batch.size(), dtype=np.int64)
    intra_sel = idx[[r == INTRA for r in roles]]
    inter_sel = idx[[r == INTER for r in roles]]
    pieces: list[tuple[np.ndarray, nn.Tensor]] = []
    s_v1 = s_v21 = s_v22 = None
    if intra_sel.size:
        s_v1 = nn.sigmoid(critic.score_rows(
            nn.rows(batch.node_reps, intra_sel),
            nn.rows(batch.pos_nbhd, intra_sel), INTRA))
        pieces.append((intra_sel, s_v1))
    if inter_sel.size:
        s_v21 = nn.sigmoid(critic.score_rows(
            nn.rows(batch.node_reps, inter_sel),
            nn.rows(batch.pos_nbhd, inter_sel), INTER))
        s_v22 = nn.sigmoid(critic.score_rows(
            nn.rows(batch.node_reps, inter_sel),
            nn.rows(batch.own_nbhd, inter_sel), INTRA))
        s_v2 = nn.maximum(s_v21, s_v22) if diverse_knowledge else s_v21
        pieces.append((inter_sel, s_v2))
    order = np.concatenate([sel for sel, _ in pieces])
    stacked = nn.concat_rows([t for _, t in pieces]) if len(pieces) > 1 else pieces[0][1]
    inverse = np.empty_like(order)
    inverse[order] = np.arange(len(order))
    raw = nn.rows(stacked, inverse)  # |omega| x 1 in entry order
    weights = nn.softmax(nn.transpose(raw))
    return AffinityScores(omega=batch.omega, s_v1=s_v1, s_v21=s_v21,
                          s_v22=s_v22, weights=weights)


def generate_parent(omega: SampleSet, weights: nn.Tensor,
                    child_rows: nn.Tensor) -> nn.Tensor:
    """Convex combination of the entries' probability rows."""
    if weights.shape != (1, child_rows.shape[0]):
        raise ContractError(
            f"weights {weights.shape} do not match {child_rows.shape[0]} children")
    sums = child_rows.data.sum(axis=1)
    if not np.allclose(sums, 1.0, atol=1e-6):
        raise ContractError("child rows must be probability distributions")
    return nn.matmul(weights, child_rows)


def kd_loss(parent_rep: nn.Tensor, q_parent: nn.Mlp | None,
            q_child: nn.Mlp | None, child_rows: nn.Tensor) -> tuple[nn.Tensor, nn.Tensor]:
    """Personalized transfer loss and the uncertainty scalar.

    ``q_parent``/``q_child`` set to None selects the identity-transfer
    ablation: U_p = 1 and the child head is the identity.
    """
    if q_parent is not None:
        ent = nn.entropy_scalar(parent_rep)
        uncertainty = nn.clip_min(nn.sigmoid(q_parent(ent)), 1e-6)
        target = nn.divide_by_scalar(parent_rep, uncertainty)
    else:
        uncertainty = nn.constant([[1.0]])
        target = parent_rep
    preds = q_child(child_rows) if q_child is not None else child_rows
    if preds.shape[1] != target.shape[1]:
        raise ContractError("child head output width differs from parent width")
    k = preds.shape[0]
    tiled = nn.matmul(nn.constant(np.ones((k, 1))), target)
    diff = nn.sub(preds, tiled)
    norms = nn.sqrt(nn.sum_rows(nn.mul(diff, diff)))
    return nn.mean_all(norms), uncertainty


class UpperLevelData:
    """Neighborhood construction for partitions whose members are tree nodes."""

    def __init__(self, tree: PartitionTree, reps: dict[int, nn.Tensor]):
        self.tree = tree
        self.reps = reps

    def member_rows(self, members: list[int]) -> nn.Tensor:
        return nn.concat_rows([self.reps[m] for m in members])

    def _mean_rows(self, members: list[int]) -> nn.Tensor:
        rows = self.member_rows(members)
        w = np.full((1, rows.shape[0]), 1.0 / rows.shape[0])
        return nn.matmul(nn.constant(w), rows)

    def batch(self, omega: SampleSet) -> OmegaBatch:
        node_reps = self.member_rows(omega.members())
        intra_members = sorted(self.tree.node(omega.partition).children)
        intra_row = self._mean_rows(intra_members)
        union_cache: dict[int, nn.Tensor] = {}
        own_cache: dict[int, nn.Tensor] = {}
        pos_rows, own_rows = [], []
        for e in omega.entries:
            if e.role == INTRA:
                pos_rows.append(intra_row)
                own_rows.append(intra_row)
            else:
                if e.source not in union_cache:
                    union = sorted(set(intra_members)
                                   | set(self.tree.node(e.source).children))
                    union_cache[e.source] = self._mean_rows(union)
                    own_cache[e.source] = self._mean_rows(
                        sorted(self.tree.node(e.source).children))
                pos_rows.append(union_cache[e.source])
                own_rows.append(own_cache[e.source])
        return OmegaBatch(omega=omega, node_reps=node_reps,
                          pos_nbhd=nn.concat_rows(pos_rows),
                          own_nbhd=nn.concat_rows(own_rows))


@dataclass
class DistillResult:
    total_loss: nn.Tensor  # 1x1; zero tensor when no partition produced a term
    reps: dict[int, nn.Tensor]  # tree node id -> 1 x c row (internal nodes)
    knowledge: list[PartitionKnowledge] = field(default_factory=list)


def distill_tree(g: DiGraph, tree: PartitionTree, critic: MiCritic,
                 q_parent: nn.Mlp | None, q_child: nn.Mlp | None,
                 ctx: LeafContext, dists: nn.Tensor, kappa: float, seed: int,
                 diverse_knowledge: bool = True,
                 personalized_transfer: bool = True) -> DistillResult:
    """Bottom-up generation of parent representations and the total KD loss.

    ``dists`` carries the leaf probability rows; filler nodes inherit their
    child's representation and contribute no loss term.
    """
    tree.refresh_depths()
    leaf_depth = ctx.leaf_depth
    reps: dict[int, nn.Tensor] = {}
    losses: list[nn.Tensor] = []
    knowledge: list[PartitionKnowledge] = []
    qp = q_parent if personalized_transfer else None
    qc = q_child if personalized_transfer else None
    upper = UpperLevelData(tree, reps)
    for depth in range(leaf_depth - 1, -1, -1):
        for pid in tree.nodes_at_depth(depth):
            node = tree.node(pid)
            if node.is_leaf():
                continue
            if node.kind == FILLER:
                child = node.children[0]
                if depth + 1 == leaf_depth:
                    reps[pid] = nn.rows(dists, [child])
                else:
                    reps[pid] = reps[child]
                continue
            omega = sample_omega(tree, pid, kappa, seed=derive(seed, "omega", depth))
            if depth + 1 == leaf_depth:
                batch = ctx.batch(omega, dists)
            else:
                batch = upper.batch(omega)
            # Probability rows of the sampled entries (leaf dists are already
            # distributions; upper-level reps are generated parents).
            child_rows = batch.node_reps
            aff = affinity_scores(critic, batch, diverse_knowledge=diverse_knowledge)
            parent = generate_parent(omega, aff.weights, child_rows)
            loss, uncertainty = kd_loss(parent, qp, qc, child_rows)
            reps[pid] = parent
            losses.append(loss)
            knowledge.append(PartitionKnowledge(
                partition=pid, parent_rep=parent, uncertainty=uncertainty,
                child_ids=list(node.children)))
    if losses:
        total = nn.mean_all(nn.concat_rows(losses) if len(losses) > 1 else losses[0])
    else:
        total = nn.constant([[0.0]])
    return DistillResult(total_loss=total, reps=reps, knowledge=knowledge)
