"""Command-line surface.

Subcommands: ``entropy``, ``build-hkt``, ``refine-hkt``, ``train``,
``predict``, ``walk-analysis``. Every command resolves a RunConfig (file
plus flag overrides), writes JSON artifacts stamped with the config hash,
and a ``<output>.manifest.json`` carrying the hash, seed, and version.

Exit codes: 0 success, 1 runtime error, 2 usage/config error. Failures
print a machine-readable error JSON to stdout. Re-running onto an existing
artifact whose config hash differs aborts unless ``--force`` is given.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, nn
from .config import RunConfig, load_config
from .digraph import (CYCLE_FREE, WITH_CYCLES, add_sink_loops, load_digraph,
                      walk_interruption)
from .distill import distill_tree
from .entropy import one_dim_entropy, tree_entropy
from .errors import ConfigError, EdenError
from .hkt import PartitionTree, build_hkt
from .mi import LeafContext
from .pipeline import build_model, prepare_graph, run_full
from .predict import LINK_TASKS, RepTable, _head_input, _resolve_walks, refine
from .rng import derive


def _emit(path: str | None, payload: dict, cfg: RunConfig | None,
          force: bool = False) -> None:
    payload = dict(payload)
    if cfg is not None:
        payload["config_hash"] = cfg.config_hash()
    text = json.dumps(payload, sort_keys=True, indent=1)
    if path is None:
        print(text)
        return
    out = Path(path)
    if out.exists() and cfg is not None and not force:
        try:
            old = json.loads(out.read_text())
        except (OSError, json.JSONDecodeError):
            old = {}
        if old.get("config_hash") not in (None, cfg.config_hash()):
            raise ConfigError(
                f"{path} was produced by a different config "
                f"({old.get('config_hash')}); use --force to overwrite")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text + "\n")
    if cfg is not None:
        manifest = {"config_hash": cfg.config_hash(), "seed": cfg.seed,
                    "version": __version__, "config": cfg.to_dict()}
        Path(str(out) + ".manifest.json").write_text(
            json.dumps(manifest, sort_keys=True, indent=1) + "\n")


def _load_graph(cfg: RunConfig):
    if not cfg.edges:
        raise ConfigError("no edge file configured ([paths] edges)")
    split = None
    if cfg.split_file:
        split = cfg.split_file
    elif cfg.labels and cfg.task == "node-c":
        split = (*cfg.split_fractions, cfg.seed)
    return load_digraph(cfg.edges, feature_file=cfg.features,
                        label_file=cfg.labels, split=split)


def _load_tree(path: str) -> PartitionTree:
    return PartitionTree.from_dict(json.loads(Path(path).read_text()))


# -- commands ----------------------------------------------------------------


def cmd_entropy(cfg: RunConfig, args) -> int:
    g = add_sink_loops(_load_graph(cfg))
    h1 = one_dim_entropy(g)
    if args.tree:
        tree = _load_tree(args.tree)
    else:
        tree, _ = build_hkt(g, cfg.height, strategy=cfg.strategy,
                            seed=cfg.seed, samples=cfg.mc_samples)
    rep = tree_entropy(g, tree)
    _emit(args.output, {
        "h1": h1.value,
        "tree": {"value": rep.value, "in": rep.in_part, "out": rep.out_part},
    }, cfg, args.force)
    return 0


def cmd_build_hkt(cfg: RunConfig, args) -> int:
    g = add_sink_loops(_load_graph(cfg))
    tree, rep = build_hkt(g, cfg.height, strategy=cfg.strategy,
                          seed=cfg.seed, samples=cfg.mc_samples)
    payload = tree.to_dict()
    payload["entropy"] = {"value": rep.value, "in": rep.in_part, "out": rep.out_part}
    _emit(args.output, payload, cfg, args.force)
    if args.dot:
        Path(args.dot).write_text(tree.to_dot() + "\n")
    return 0


def cmd_refine_hkt(cfg: RunConfig, args) -> int:
    g0 = _load_graph(cfg)
    g, split = prepare_graph(g0, cfg)
    if args.tree:
        tree = _load_tree(args.tree)
    else:
        tree, _ = build_hkt(g, cfg.height, strategy=cfg.strategy,
                            seed=cfg.seed, samples=cfg.mc_samples)
    ctx = LeafContext(g, tree, g.features, cfg.propagation(), kappa=cfg.kappa)
    model = build_model(g, cfg, ctx, split)
    moves = refine(g, tree, model, ctx, cfg)
    tree.validate(g)
    payload = tree.to_dict()
    payload["moves"] = [vars(m) for m in moves]
    _emit(args.output, payload, cfg, args.force)
    if args.moves:
        with open(args.moves, "w", encoding="utf-8") as fh:
            for m in moves:
                fh.write(json.dumps(vars(m), sort_keys=True) + "\n")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    g = _load_graph(cfg)
    result = run_full(g, cfg)
    metrics = {"task": cfg.task, "seed": cfg.seed,
               "best_epoch": result.training.best_epoch,
               "metrics": result.training.metrics,
               "moves_applied": sum(1 for m in result.moves if m.applied),
               "tree_entropy": result.tree_entropy.value}
    _emit(args.output, metrics, cfg, args.force)
    if args.history:
        with open(args.history, "w", encoding="utf-8") as fh:
            for rec in result.training.history:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    if args.checkpoint:
        nn.save_checkpoint(args.checkpoint,
                           {k: nn.Tensor(v) for k, v in result.training.params.items()})
    if args.tree_out:
        Path(args.tree_out).write_text(result.tree.to_json() + "\n")
    return 0


def cmd_predict(cfg: RunConfig, args) -> int:
    g0 = _load_graph(cfg)
    g, split = prepare_graph(g0, cfg)
    tree = _load_tree(args.tree)
    tree.validate(g)
    ctx = LeafContext(g, tree, g.features, cfg.propagation(), kappa=cfg.kappa)
    model = build_model(g, cfg, ctx, split)
    blobs = nn.load_checkpoint(args.checkpoint)
    nn.restore_checkpoint(model.named_params(), blobs)
    dists = ctx.leaf_dists(model.m_linear)
    dres = distill_tree(g, tree, model.critic, model.q_parent, model.q_child,
                        ctx, dists, kappa=cfg.kappa,
                        seed=derive(cfg.seed, "distill-eval"),
                        diverse_knowledge=cfg.ablations.diverse_knowledge,
                        personalized_transfer=cfg.ablations.personalized_transfer)
    table = RepTable(dists, dres.reps, g.n)
    if cfg.task in LINK_TASKS:
        pairs = split.pairs[split.indices("test")]
        walks = _resolve_walks(tree, np.unique(pairs), model.walk,
                               derive(cfg.seed, "walk-eval"))
        probs = nn.softmax(model.q_rw(
            _head_input(model, table, cfg.task, pairs, walks))).data
        payload = {"task": cfg.task,
                   "pairs": pairs.tolist(),
                   "probabilities": probs.tolist()}
    else:
        nodes = np.arange(g.n)
        walks = _resolve_walks(tree, nodes, model.walk, derive(cfg.seed, "walk-eval"))
        probs = nn.softmax(model.q_rw(
            _head_input(model, table, cfg.task, nodes, walks))).data
        payload = {"task": cfg.task,
                   "classes": probs.argmax(axis=1).tolist(),
                   "probabilities": probs.tolist()}
    _emit(args.output, payload, cfg, args.force)
    return 0


def cmd_walk_analysis(cfg: RunConfig, args) -> int:
    g = _load_graph(cfg)
    stats = {}
    for mode in (WITH_CYCLES, CYCLE_FREE):
        res = walk_interruption(g, max_len=args.max_len,
                                trials_per_node=args.trials, cycle_mode=mode,
                                seed=cfg.seed)
        stats[mode] = res.completion.tolist()
    _emit(args.output, {"max_len": args.max_len, "trials": args.trials,
                        "completion": stats}, cfg, args.force)
    return 0


# -- argument plumbing ---------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI-style run configuration file")
    p.add_argument("--edges", dest="o_edges")
    p.add_argument("--features", dest="o_features")
    p.add_argument("--labels", dest="o_labels")
    p.add_argument("--height", type=int, dest="o_height")
    p.add_argument("--strategy", choices=["exhaustive", "mc"], dest="o_strategy")
    p.add_argument("--mc-samples", type=int, dest="o_mc_samples")
    p.add_argument("--kappa", type=float, dest="o_kappa")
    p.add_argument("--delta", type=float, dest="o_delta")
    p.add_argument("--epochs", type=int, dest="o_refine_epochs",
                   help="refinement epochs")
    p.add_argument("--alpha", type=float, dest="o_alpha")
    p.add_argument("--task", dest="o_task",
                   choices=["node-c", "existence", "direction", "link-c"])
    p.add_argument("--p-rw", type=float, dest="o_p_rw")
    p.add_argument("--s-rw", type=float, dest="o_s_rw")
    p.add_argument("--c-rw", type=float, dest="o_c_rw")
    p.add_argument("--seed", type=int, dest="o_seed")
    p.add_argument("--threads", type=int, dest="o_threads")
    p.add_argument("--force", action="store_true")
    p.add_argument("--output", "-o", help="artifact path (stdout when omitted)")


_OVERRIDE_KEYS = ["edges", "features", "labels", "height", "strategy",
                  "mc_samples", "kappa", "delta", "refine_epochs", "alpha",
                  "task", "p_rw", "s_rw", "c_rw", "seed", "threads"]


def _resolve(args) -> RunConfig:
    overrides = {key: getattr(args, f"o_{key}", None) for key in _OVERRIDE_KEYS}
    return load_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eden",
        description="Entropy-guided hierarchical knowledge trees for digraphs")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("entropy", help="one-dimensional and tree entropy report")
    _add_common(p)
    p.add_argument("--tree", help="tree JSON artifact (built fresh when omitted)")
    p.set_defaults(func=cmd_entropy)

    p = sub.add_parser("build-hkt", help="three-phase greedy tree construction")
    _add_common(p)
    p.add_argument("--dot", help="also export Graphviz DOT")
    p.set_defaults(func=cmd_build_hkt)

    p = sub.add_parser("refine-hkt", help="MI critic training and re-affiliation")
    _add_common(p)
    p.add_argument("--tree", help="tree JSON artifact (built fresh when omitted)")
    p.add_argument("--moves", help="move log output (JSON lines)")
    p.set_defaults(func=cmd_refine_hkt)

    p = sub.add_parser("train", help="full pipeline: build, refine, train")
    _add_common(p)
    p.add_argument("--history", help="per-epoch metrics output (JSON lines)")
    p.add_argument("--checkpoint", help="parameter checkpoint output")
    p.add_argument("--tree-out", help="refined tree JSON output")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predictions from a checkpoint")
    _add_common(p)
    p.add_argument("--tree", required=True, help="tree JSON artifact")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("walk-analysis", help="forward-walk survival curves")
    _add_common(p)
    p.add_argument("--max-len", type=int, default=10)
    p.add_argument("--trials", type=int, default=16)
    p.set_defaults(func=cmd_walk_analysis)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve(args)
        return args.func(cfg, args)
    except ConfigError as exc:
        print(json.dumps({"error": "config", "message": str(exc)}))
        return 2
    except EdenError as exc:
        print(json.dumps({"error": "runtime", "message": str(exc)}))
        return 1
    except FileNotFoundError as exc:
        print(json.dumps({"error": "config", "message": str(exc)}))
        return 2


if __name__ == "__main__":
    sys.exit(main())
