"""Synthetic digraph generators and the raw-feature baseline.

Used by the test-suite and the bundled benchmark: uniform random digraphs
(optionally sink-free) and a two-level directed stochastic block model
whose communities nest inside super-communities, with Gaussian class
features.
"""

from __future__ import annotations

import numpy as np

from . import nn
from .digraph import DiGraph, build_digraph, fractional_split
from .rng import stream


def random_digraph(n: int, m: int, seed: int = 0, no_sinks: bool = False,
                   features: int | None = None) -> DiGraph:
    """Uniform random simple digraph with m distinct non-loop edges."""
    rng = stream(seed, "random-digraph")
    edges: set[tuple[int, int]] = set()
    if no_sinks:
        for u in range(n):
            v = int(rng.integers(n - 1))
            v = v + 1 if v >= u else v
            edges.add((u, v))
    guard = 0
    while len(edges) < m:
        guard += 1
        if guard > 100 * m + 1000:
            break
        u = int(rng.integers(n))
        v = int(rng.integers(n))
        if u != v:
            edges.add((u, v))
    feats = None
    if features is not None:
        feats = rng.normal(size=(n, features))
    return build_digraph(n, sorted(edges), features=feats)


def hierarchical_sbm(n: int = 200, communities: int = 4, supers: int = 2,
                     f: int = 16, seed: int = 0,
                     p_in: float = 0.10, p_super: float = 0.03,
                     p_out: float = 0.005, noise: float = 2.2,
                     train_frac: float = 0.10) -> DiGraph:
    """Two-level directed SBM with Gaussian class features.

    Directed edges appear independently with probability ``p_in`` inside a
    community, ``p_super`` across communities of the same super-community,
    and ``p_out`` elsewhere. Labels are the community ids; the train mask
    covers ``train_frac`` of the nodes, the rest split evenly into val and
    test.
    """
    rng = stream(seed, "sbm")
    labels = np.arange(n) % communities
    labels = np.sort(labels)
    super_of = labels % supers
    edges = []
    for u in range(n):
        for v in range(n):
            if u == v:
                continue
            if labels[u] == labels[v]:
                p = p_in
            elif super_of[u] == super_of[v]:
                p = p_super
            else:
                p = p_out
            if rng.random() < p:
                edges.append((u, v))
    means = rng.normal(size=(communities, f)) * 1.0
    feats = means[labels] + rng.normal(size=(n, f)) * noise
    rest = (1.0 - train_frac) / 2.0
    masks = fractional_split(labels, (train_frac, rest, 1.0 - train_frac - rest),
                             seed=int(stream(seed, "sbm-split").integers(2**31)))
    return build_digraph(n, edges, features=feats, labels=labels, masks=masks)


def linear_baseline(g: DiGraph, seed: int = 0, epochs: int = 300,
                    lr: float = 0.05) -> dict[str, float]:
    """Softmax regression on raw features; returns train/val/test accuracy."""
    c = g.num_classes()
    rng = stream(seed, "baseline")
    w = nn.parameter(nn.glorot(rng, g.features.shape[1], c))
    b = nn.parameter(np.zeros((1, c)))
    opt = nn.Adam([w, b], lr=lr)
    train_idx = np.flatnonzero(g.masks["train"])
    x_train = nn.constant(g.features[train_idx])
    y_train = g.labels[train_idx]
    for _ in range(epochs):
        logits = nn.add(nn.matmul(x_train, w), b)
        loss = nn.cross_entropy(logits, y_train)
        opt.zero_grad()
        nn.backward(loss)
        opt.step()
    probs = nn.softmax(nn.add(nn.matmul(nn.constant(g.features), w), b)).data
    out = {}
    for part in ("train", "val", "test"):
        idx = np.flatnonzero(g.masks[part])
        out[f"{part}_acc"] = float((probs[idx].argmax(axis=1) == g.labels[idx]).mean())
    return out
