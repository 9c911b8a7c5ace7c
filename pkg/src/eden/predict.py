"""Tree random walks, prediction heads, task splits, metrics, and training.

Walks move over the finished tree with inverse-weight transition rules
(1/p_rw to the parent, 1/s_rw to each sibling, 1/c_rw to each child),
normalized over the admissible moves at each step; the previous node is
excluded unless it is the only move. The concatenated representations of
the k+1 visited nodes feed an MLP head; link heads consume both endpoints'
encodings.

The trainer optimizes cross-entropy plus alpha times the distillation loss
end-to-end: gradients reach the propagation linear map, the MI critic (via
the generation weights), the transfer maps, and the walk head.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .digraph import DiGraph, build_digraph
from .distill import DistillResult, distill_tree
from .errors import (ConfigError, ContractError, CountError, DivergenceError,
                     MetricError)
from .hkt import PartitionTree
from .mi import LeafContext, MiCritic, refine_tree, train_critic
from .propagate import PropagationConfig, propagate_global
from .rng import derive, stream

NODE_C = "node-c"
EXISTENCE = "existence"
DIRECTION = "direction"
LINK_C = "link-c"
LINK_TASKS = (EXISTENCE, DIRECTION, LINK_C)


@dataclass(frozen=True)
class WalkConfig:
    p_rw: float = 1.0
    s_rw: float = 1.0
    c_rw: float = 1.0
    k: int = 5

    def __post_init__(self):
        if min(self.p_rw, self.s_rw, self.c_rw) <= 0:
            raise ConfigError("walk weights must be positive")
        if self.k < 1:
            raise ConfigError("walk length must be >= 1")


@dataclass
class WalkPath:
    leaf: int
    visits: list[int]  # k visited node ids, start excluded


def walk_moves(tree: PartitionTree, current: int, prev: int | None,
               cfg: WalkConfig) -> tuple[list[int], np.ndarray]:
    """Admissible next nodes and their normalized probabilities."""
    node = tree.node(current)
    cands: list[int] = []
    weights: list[float] = []
    if node.parent is not None:
        cands.append(node.parent)
        weights.append(1.0 / cfg.p_rw)
        for sib in tree.node(node.parent).children:
            if sib != current:
                cands.append(sib)
                weights.append(1.0 / cfg.s_rw)
    for child in node.children:
        cands.append(child)
        weights.append(1.0 / cfg.c_rw)
    if prev is not None and len(cands) > 1:
        keep = [i for i, c in enumerate(cands) if c != prev]
        cands = [cands[i] for i in keep]
        weights = [weights[i] for i in keep]
    probs = np.asarray(weights)
    return cands, probs / probs.sum()


def sample_walk(tree: PartitionTree, leaf: int, cfg: WalkConfig, seed: int) -> WalkPath:
    """k-step second-order walk from a leaf; never stalls."""
    rng = stream(seed, "treewalk", leaf)
    visits: list[int] = []
    prev: int | None = None
    current = leaf
    for _ in range(cfg.k):
        cands, probs = walk_moves(tree, current, prev, cfg)
        pick = int(np.searchsorted(np.cumsum(probs), rng.random(), side="right"))
        nxt = cands[min(pick, len(cands) - 1)]
        visits.append(nxt)
        prev, current = current, nxt
    return WalkPath(leaf=leaf, visits=visits)


class RepTable:
    """Single matrix of node representations with an id -> row map."""

    def __init__(self, dists: nn.Tensor, reps: dict[int, nn.Tensor], n_leaves: int):
        self.row_of: dict[int, int] = {v: v for v in range(n_leaves)}
        parts = [dists]
        for offset, nid in enumerate(sorted(reps)):
            self.row_of[nid] = n_leaves + offset
            parts.append(reps[nid])
        self.matrix = nn.concat_rows(parts)

    def walk_input(self, walks: list[WalkPath]) -> nn.Tensor:
        """(batch, (k+1)*d) concatenation of start + visited representations."""
        cols = [np.asarray([self.row_of[w.leaf] for w in walks], dtype=np.int64)]
        k = len(walks[0].visits)
        for step in range(k):
            cols.append(np.asarray([self.row_of[w.visits[step]] for w in walks],
                                   dtype=np.int64))
        return nn.concat_cols([nn.rows(self.matrix, c) for c in cols])

    def leaf_input(self, leaves: np.ndarray) -> nn.Tensor:
        return nn.rows(self.matrix, np.asarray(leaves, dtype=np.int64))


def encode_walk(path: WalkPath, table: RepTable, q_rw: nn.Mlp) -> nn.Tensor:
    """Embedding of one walk: concatenated k+1 representations through the head."""
    return q_rw(table.walk_input([path]))


def predict_node(table: RepTable, walks: list[WalkPath], q_rw: nn.Mlp) -> nn.Tensor:
    return nn.softmax(q_rw(table.walk_input(walks)))


def predict_link(table: RepTable, walks_u: list[WalkPath], walks_v: list[WalkPath],
                 q_rw: nn.Mlp) -> nn.Tensor:
    enc = nn.concat_cols([table.walk_input(walks_u), table.walk_input(walks_v)])
    return nn.softmax(q_rw(enc))


# --------------------------------------------------------------------------
# Task splits
# --------------------------------------------------------------------------


@dataclass
class TaskSplit:
    task: str
    pairs: np.ndarray  # (#examples, 2)
    labels: np.ndarray
    assign: np.ndarray  # 0 train, 1 val, 2 test
    removed_edges: np.ndarray  # true edges held out of the propagation graph

    def indices(self, part: str) -> np.ndarray:
        code = {"train": 0, "val": 1, "test": 2}[part]
        return np.flatnonzero(self.assign == code)

    def n_classes(self) -> int:
        return 3 if self.task == LINK_C else 2


def _edge_keys(edges: np.ndarray, n: int) -> np.ndarray:
    return edges[:, 0].astype(np.int64) * n + edges[:, 1].astype(np.int64)


def _sample_non_edges(g: DiGraph, count: int, rng, forbid_reverse: bool) -> np.ndarray:
    keys = set(_edge_keys(g.edges(), g.n).tolist())
    out: list[tuple[int, int]] = []
    seen: set[int] = set()
    attempts = 0
    while len(out) < count:
        attempts += 1
        if attempts > 200 * max(count, 1):
            raise CountError(f"could not sample {count} non-edges")
        u = int(rng.integers(g.n))
        v = int(rng.integers(g.n))
        if u == v:
            continue
        key = u * g.n + v
        if key in keys or key in seen:
            continue
        if forbid_reverse and (v * g.n + u) in keys:
            continue
        seen.add(key)
        out.append((u, v))
    return np.asarray(out, dtype=np.int64).reshape(-1, 2)


def make_link_split(g: DiGraph, task: str, ratios=(0.8, 0.15, 0.05),
                    seed: int = 0, max_pairs: int | None = None) -> TaskSplit:
    """Balanced link-task examples with train/val/test assignment.

    Edges assigned to val/test are recorded for removal from the
    propagation graph so evaluation pairs never leak into training inputs.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {ratios}")
    if task not in LINK_TASKS:
        raise ConfigError(f"unknown link task {task!r}")
    rng = stream(seed, "link-split", task)
    edges = g.edges()
    edges = edges[edges[:, 0] != edges[:, 1]]
    if len(edges) == 0:
        raise CountError("graph has no non-loop edges")
    keys = set(_edge_keys(edges, g.n).tolist())

    if task == EXISTENCE:
        pos = edges
        if max_pairs is not None and len(pos) > max_pairs // 2:
            pos = pos[rng.choice(len(pos), size=max_pairs // 2, replace=False)]
        neg = _sample_non_edges(g, len(pos), rng, forbid_reverse=False)
        pairs = np.vstack([pos, neg])
        labels = np.concatenate([np.ones(len(pos), np.int64),
                                 np.zeros(len(neg), np.int64)])
        edge_of = np.vstack([pos, np.full_like(neg, -1)])
    else:
        reverse = edges[:, [1, 0]]
        single = edges[~np.isin(_edge_keys(reverse, g.n),
                                np.fromiter(keys, dtype=np.int64))]
        if len(single) == 0:
            raise CountError("no single-orientation pairs in this graph")
        single = single[rng.permutation(len(single))]
        if task == DIRECTION:
            if max_pairs is not None and len(single) > max_pairs:
                single = single[:max_pairs]
            flip = rng.random(len(single)) < 0.5
            pairs = np.where(flip[:, None], single[:, [1, 0]], single)
            labels = (~flip).astype(np.int64)  # 1 when first->second is the edge
            edge_of = single
        else:  # LINK_C
            per_class = len(single) // 2
            if max_pairs is not None:
                per_class = min(per_class, max_pairs // 3)
            if per_class == 0:
                raise CountError("too few single-orientation pairs for link-c")
            fwd = single[:per_class]
            rev = single[per_class:2 * per_class][:, [1, 0]]
            none = _sample_non_edges(g, per_class, rng, forbid_reverse=True)
            pairs = np.vstack([fwd, rev, none])
            labels = np.concatenate([
                np.zeros(per_class, np.int64),
                np.ones(per_class, np.int64),
                np.full(per_class, 2, np.int64),
            ])
            edge_of = np.vstack([fwd, rev[:, [1, 0]], np.full_like(none, -1)])

    order = rng.permutation(len(pairs))
    pairs, labels, edge_of = pairs[order], labels[order], edge_of[order]
    n_train = int(round(ratios[0] * len(pairs)))
    n_val = int(round(ratios[1] * len(pairs)))
    assign = np.full(len(pairs), 2, dtype=np.int64)
    assign[:n_train] = 0
    assign[n_train:n_train + n_val] = 1
    held = edge_of[(assign > 0) & (edge_of[:, 0] >= 0)]
    return TaskSplit(task=task, pairs=pairs, labels=labels, assign=assign,
                     removed_edges=held)


def propagation_graph(g: DiGraph, split: TaskSplit) -> DiGraph:
    """Copy of ``g`` without the split's held-out edges."""
    if len(split.removed_edges) == 0:
        return g
    keys = _edge_keys(g.edges(), g.n)
    drop = set(_edge_keys(split.removed_edges, g.n).tolist())
    keep = ~np.isin(keys, np.fromiter(drop, dtype=np.int64))
    return build_digraph(g.n, g.edges()[keep], features=g.features,
                         labels=g.labels, masks=g.masks)


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------


def accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    return float((probs.argmax(axis=1) == labels).mean())


def auc_score(labels: np.ndarray, scores: np.ndarray) -> float:
    """Rank-based AUC with midrank tie handling."""
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC undefined for single-class ground truth")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def ap_score(labels: np.ndarray, scores: np.ndarray) -> float:
    """Average precision as the recall-weighted precision sum."""
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        raise MetricError("AP undefined without positives")
    order = np.argsort(-scores, kind="mergesort")
    sorted_labels = labels[order]
    sorted_scores = scores[order]
    ap = 0.0
    prev_recall = 0.0
    hits = 0
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        hits += int(sorted_labels[i:j + 1].sum())
        precision = hits / (j + 1)
        recall = hits / n_pos
        ap += (recall - prev_recall) * precision
        prev_recall = recall
        i = j + 1
    return float(ap)


def evaluate(probs: np.ndarray, labels: np.ndarray, task: str) -> dict[str, float]:
    """ACC for classification tasks; ACC, AUC, AP for the binary link tasks."""
    metrics = {"acc": accuracy(probs, labels)}
    if task in (EXISTENCE, DIRECTION):
        scores = probs[:, 1]
        metrics["auc"] = auc_score(labels, scores)
        metrics["ap"] = ap_score(labels, scores)
    return metrics


def primary_metric(task: str) -> str:
    return "auc" if task in (EXISTENCE, DIRECTION) else "acc"


# --------------------------------------------------------------------------
# Model bundle and training
# --------------------------------------------------------------------------


@dataclass
class Ablations:
    diverse_knowledge: bool = True
    personalized_transfer: bool = True
    tree_walk: bool = True
    kd_loss: bool = True


class EdenModel:
    """All trainable pieces wired for one task."""

    def __init__(self, prop_width: int, repr_dim: int, out_classes: int,
                 hidden: int, walk: WalkConfig, task: str, seed: int,
                 tree_walk: bool = True):
        rng = stream(seed, "init")
        self.task = task
        self.walk = walk
        self.tree_walk = tree_walk
        self.repr_dim = repr_dim
        self.m_linear = nn.Mlp([prop_width, repr_dim], rng, ["identity"], name="m")
        self.critic = MiCritic(repr_dim, repr_dim, hidden, rng)
        self.q_parent = nn.Mlp([1, hidden, 1], rng, name="q_parent")
        self.q_child = nn.Mlp([repr_dim, hidden, repr_dim], rng, name="q_child")
        per_node = (walk.k + 1) * repr_dim if tree_walk else repr_dim
        width = 2 * per_node if task in LINK_TASKS else per_node
        self.q_rw = nn.Mlp([width, hidden, out_classes], rng, name="q_rw")

    def named_params(self) -> dict[str, nn.Tensor]:
        out: dict[str, nn.Tensor] = {}
        for name, p in (self.m_linear.parameters() + self.critic.parameters()
                        + self.q_parent.parameters() + self.q_child.parameters()
                        + self.q_rw.parameters()):
            out[name] = p
        return out

    def parameters(self) -> list[nn.Tensor]:
        return list(self.named_params().values())


def total_loss(ce: nn.Tensor, kd: nn.Tensor, alpha: float) -> nn.Tensor:
    """Cross-entropy plus alpha-weighted distillation loss."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    return nn.add(ce, nn.scale(kd, alpha))


def _resolve_walks(tree: PartitionTree, nodes: np.ndarray, cfg: WalkConfig,
                   seed: int) -> dict[int, WalkPath]:
    return {int(v): sample_walk(tree, int(v), cfg, seed) for v in nodes}


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    metrics: dict[str, float] = field(default_factory=dict)
    best_epoch: int = -1
    params: dict[str, np.ndarray] = field(default_factory=dict)
    move_log: list = field(default_factory=list)
    runtime_s: float = 0.0


def _head_input(model: EdenModel, table: RepTable, task: str,
                pairs_or_nodes, walks: dict[int, WalkPath]) -> nn.Tensor:
    if task in LINK_TASKS:
        pairs = pairs_or_nodes
        if model.tree_walk:
            wu = [walks[int(u)] for u in pairs[:, 0]]
            wv = [walks[int(v)] for v in pairs[:, 1]]
            return nn.concat_cols([table.walk_input(wu), table.walk_input(wv)])
        return nn.concat_cols([table.leaf_input(pairs[:, 0]),
                               table.leaf_input(pairs[:, 1])])
    nodes = pairs_or_nodes
    if model.tree_walk:
        return table.walk_input([walks[int(v)] for v in nodes])
    return table.leaf_input(nodes)


def train(g: DiGraph, tree: PartitionTree, model: EdenModel, ctx: LeafContext,
          cfg, task_split: TaskSplit | None = None) -> TrainResult:
    """End-to-end training with early stopping on the validation metric."""
    start = time.time()
    task = model.task
    if task in LINK_TASKS:
        if task_split is None:
            raise ConfigError("link tasks require a task split")
        examples = {p: task_split.indices(p) for p in ("train", "val", "test")}
        all_labels = task_split.labels
        pairs = task_split.pairs
        walk_nodes = np.unique(pairs)
    else:
        if g.labels is None or g.masks is None:
            raise ConfigError("node classification requires labels and masks")
        examples = {p: np.flatnonzero(g.masks[p]) for p in ("train", "val", "test")}
        all_labels = g.labels
        pairs = None
        walk_nodes = np.arange(g.n)

    params = model.parameters()
    opt = nn.Adam(params, lr=cfg.lr)
    eval_walks = _resolve_walks(tree, walk_nodes, model.walk,
                                derive(cfg.seed, "walk-eval"))
    best_metric = -np.inf
    best_params: dict[str, np.ndarray] = {}
    best_epoch = -1
    result = TrainResult()
    metric_name = primary_metric(task)

    def forward_eval(indices: np.ndarray, table: RepTable) -> np.ndarray:
        sel = pairs[indices] if pairs is not None else indices
        logits = model.q_rw(_head_input(model, table, task, sel, eval_walks))
        return nn.softmax(logits).data

    for epoch in range(cfg.max_epochs):
        dists = ctx.leaf_dists(model.m_linear)
        dres = distill_tree(
            g, tree, model.critic, model.q_parent, model.q_child, ctx, dists,
            kappa=cfg.kappa, seed=derive(cfg.seed, "distill", epoch),
            diverse_knowledge=cfg.ablations.diverse_knowledge,
            personalized_transfer=cfg.ablations.personalized_transfer)
        table = RepTable(dists, dres.reps, g.n)
        train_walks = _resolve_walks(tree, walk_nodes, model.walk,
                                     derive(cfg.seed, "walk", epoch))
        sel = pairs[examples["train"]] if pairs is not None else examples["train"]
        logits = model.q_rw(_head_input(model, table, task, sel, train_walks))
        ce = nn.cross_entropy(logits, all_labels[examples["train"]])
        alpha = cfg.alpha if cfg.ablations.kd_loss else 0.0
        loss = total_loss(ce, dres.total_loss, alpha)
        if not np.isfinite(loss.data[0, 0]):
            raise DivergenceError(f"non-finite loss at epoch {epoch}")
        opt.zero_grad()
        nn.backward(loss)
        opt.step()

        val_probs = forward_eval(examples["val"], table)
        val_metrics = evaluate(val_probs, all_labels[examples["val"]], task)
        record = {"epoch": epoch, "loss": loss.item(), "ce": ce.item(),
                  "kd": dres.total_loss.item()}
        record.update({f"val_{k}": v for k, v in val_metrics.items()})
        result.history.append(record)
        if val_metrics[metric_name] > best_metric:
            best_metric = val_metrics[metric_name]
            best_epoch = epoch
            best_params = {k: v.data.copy() for k, v in model.named_params().items()}
        if epoch - best_epoch >= cfg.patience:
            break

    if best_params:
        nn.restore_checkpoint(model.named_params(), best_params)
    # Final deterministic evaluation pass with the best parameters.
    dists = ctx.leaf_dists(model.m_linear)
    dres = distill_tree(
        g, tree, model.critic, model.q_parent, model.q_child, ctx, dists,
        kappa=cfg.kappa, seed=derive(cfg.seed, "distill-eval"),
        diverse_knowledge=cfg.ablations.diverse_knowledge,
        personalized_transfer=cfg.ablations.personalized_transfer)
    table = RepTable(dists, dres.reps, g.n)
    final: dict[str, float] = {}
    for part in ("train", "val", "test"):
        if examples[part].size == 0:
            continue
        probs = forward_eval(examples[part], table)
        for k, v in evaluate(probs, all_labels[examples[part]], task).items():
            final[f"{part}_{k}"] = v
    result.metrics = final
    result.best_epoch = best_epoch
    result.params = {k: v.data.copy() for k, v in model.named_params().items()}
    result.runtime_s = time.time() - start
    return result


def refine(g: DiGraph, tree: PartitionTree, model: EdenModel, ctx: LeafContext,
           cfg) -> list:
    """Critic training plus margin-based re-affiliation, possibly alternated."""
    moves = []
    for round_idx in range(cfg.refine_alternations):
        training = train_critic(ctx, model.critic, model.m_linear,
                                epochs=cfg.refine_epochs, lr=cfg.lr,
                                seed=derive(cfg.seed, "refine", round_idx))
        _, log = refine_tree(g, tree, training.scores, cfg.delta, ctx=ctx)
        moves.extend(log)
    return moves
