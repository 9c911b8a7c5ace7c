"""Entropy-guided hierarchical knowledge trees (HKT) for directed graphs.

The toolkit builds a height-limited partition tree over a digraph by greedy
minimization of directed structural entropy, refines the tree with a
GAN-style mutual-information critic over node profiles, and uses the tree
for data-level knowledge distillation when training node-classification
and link-prediction heads.
"""

__version__ = "0.1.0"

from .digraph import DiGraph, load_digraph, add_sink_loops, walk_interruption
from .entropy import one_dim_entropy, two_dim_entropy, tree_entropy
from .hkt import PartitionTree, build_hkt

__all__ = [
    "DiGraph",
    "load_digraph",
    "add_sink_loops",
    "walk_interruption",
    "one_dim_entropy",
    "two_dim_entropy",
    "tree_entropy",
    "PartitionTree",
    "build_hkt",
    "__version__",
]
