"""End-to-end orchestration: split, build, refine, train, predict.

Keeps the file-format concerns in the CLI; everything here works on
in-memory graphs so the test-suite and benchmark harness can drive it
directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .digraph import DiGraph, add_sink_loops
from .entropy import EntropyReport
from .errors import ConfigError
from .hkt import PartitionTree, build_hkt
from .mi import LeafContext
from .predict import (EdenModel, LINK_TASKS, NODE_C, TaskSplit, TrainResult,
                      make_link_split, propagation_graph, refine, train)


@dataclass
class PipelineResult:
    tree: PartitionTree
    tree_entropy: EntropyReport
    split: TaskSplit | None
    moves: list
    training: TrainResult
    model: EdenModel
    graph: DiGraph  # sink-looped training graph


def prepare_graph(g: DiGraph, cfg: RunConfig) -> tuple[DiGraph, TaskSplit | None]:
    """Task split plus the sink-looped propagation graph."""
    split = None
    if cfg.task in LINK_TASKS:
        split = make_link_split(g, cfg.task, ratios=cfg.link_ratios,
                                seed=cfg.seed, max_pairs=cfg.link_max_pairs)
        g = propagation_graph(g, split)
    return add_sink_loops(g), split


def build_model(g: DiGraph, cfg: RunConfig, ctx: LeafContext,
                split: TaskSplit | None) -> EdenModel:
    if cfg.task == NODE_C:
        repr_dim = g.num_classes()
        out_classes = repr_dim
    else:
        repr_dim = g.num_classes() if g.labels is not None else cfg.repr_dim
        out_classes = split.n_classes()
    return EdenModel(
        prop_width=ctx.prop_features.shape[1], repr_dim=repr_dim,
        out_classes=out_classes, hidden=cfg.hidden, walk=cfg.walk(),
        task=cfg.task, seed=cfg.seed, tree_walk=cfg.ablations.tree_walk)


def run_full(g: DiGraph, cfg: RunConfig) -> PipelineResult:
    """Split -> sink loops -> coarse tree -> MI refinement -> training."""
    if g.features is None:
        raise ConfigError("the pipeline requires node features")
    g_train, split = prepare_graph(g, cfg)
    tree, report = build_hkt(g_train, cfg.height, strategy=cfg.strategy,
                             seed=cfg.seed, samples=cfg.mc_samples)
    ctx = LeafContext(g_train, tree, g_train.features, cfg.propagation(),
                      kappa=cfg.kappa)
    model = build_model(g_train, cfg, ctx, split)
    moves = refine(g_train, tree, model, ctx, cfg)
    tree.validate(g_train)
    training = train(g_train, tree, model, ctx, cfg, task_split=split)
    return PipelineResult(tree=tree, tree_entropy=report, split=split,
                          moves=moves, training=training, model=model,
                          graph=g_train)
