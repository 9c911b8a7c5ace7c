"""Weight-free feature propagation.

Two flavours:

* Within-partition propagation in the personalized-PageRank style: teleport
  weight ``tau`` back to the input features plus symmetric
  ``1/sqrt(d_i d_j)`` mixing over the partition's induced (symmetrized)
  subgraph, iterated ``steps`` times. Because the recursion is linear in
  the input rows, each partition also exposes a precomputed aggregation
  row that maps member inputs straight to the mean propagated vector; the
  trainable path uses that cached form.

* Global digraph propagation instantiating the lightweight learning
  function: ``hops`` rounds of degree-normalized mixing over either the
  plain symmetrized adjacency or the phase-modulated Hermitian adjacency
  ``exp(i * 2*pi*q * (A - A^T))``, whose real and imaginary parts are
  concatenated before the trainable linear map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .digraph import DiGraph
from .errors import ConfigError, PartitionError
from . import nn

SYMMETRIC = "symmetric"
MAGNETIC = "magnetic"


@dataclass(frozen=True)
class PropagationConfig:
    tau: float = 0.5
    steps: int = 5
    mode: str = SYMMETRIC
    q: float = 0.25
    hops: int = 2

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"tau must be in [0, 1], got {self.tau}")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if not 0.0 <= self.q <= 0.5:
            raise ConfigError(f"q must be in [0, 0.5], got {self.q}")
        if self.hops < 0:
            raise ConfigError("hops must be >= 0")
        if self.mode not in (SYMMETRIC, MAGNETIC):
            raise ConfigError(f"unknown propagation mode {self.mode!r}")


def _induced_sym_adjacency(g: DiGraph, members: np.ndarray):
    """Unweighted symmetrized adjacency of the induced subgraph, no loops."""
    pos = {int(v): i for i, v in enumerate(members)}
    k = len(members)
    rows, cols = [], []
    for v in members:
        i = pos[int(v)]
        for u in g.out_neighbors(int(v)):
            j = pos.get(int(u))
            if j is not None and j != i:
                rows.append(i)
                cols.append(j)
    if rows:
        data = np.ones(len(rows))
        adj = sp.coo_matrix((data, (rows, cols)), shape=(k, k)).tocsr()
        adj = adj.maximum(adj.T)
        adj.data[:] = 1.0
    else:
        adj = sp.csr_matrix((k, k))
    return adj


def partition_kernel(g: DiGraph, members, cfg: PropagationConfig) -> np.ndarray:
    """Dense k x k operator mapping member inputs to propagated outputs."""
    members = np.asarray(sorted(int(v) for v in members), dtype=np.int64)
    if members.size == 0:
        raise PartitionError("empty partition")
    k = members.size
    adj = _induced_sym_adjacency(g, members)
    deg = np.asarray(adj.sum(axis=1)).reshape(-1)
    isolated = deg == 0
    inv_sqrt = np.zeros(k)
    inv_sqrt[~isolated] = 1.0 / np.sqrt(deg[~isolated])
    mix = sp.diags(inv_sqrt) @ adj @ sp.diags(inv_sqrt)
    op = np.eye(k)
    eye = np.eye(k)
    for _ in range(cfg.steps):
        op = cfg.tau * eye + (1.0 - cfg.tau) * (mix @ op)
    op[isolated] = eye[isolated]
    return op


def partition_propagate(g: DiGraph, members, X0: np.ndarray,
                        cfg: PropagationConfig) -> np.ndarray:
    """Propagate feature rows within one partition; rows follow sorted members."""
    members = np.asarray(sorted(int(v) for v in members), dtype=np.int64)
    if members.size == 0:
        raise PartitionError("empty partition")
    X0 = np.atleast_2d(np.asarray(X0, dtype=np.float64))
    if X0.shape[0] != members.size:
        raise PartitionError(
            f"{X0.shape[0]} feature rows for {members.size} members")
    return partition_kernel(g, members, cfg) @ X0


def aggregate_neighborhood(propagated: np.ndarray) -> np.ndarray:
    """Weight-free aggregation: arithmetic mean over member rows."""
    propagated = np.atleast_2d(np.asarray(propagated, dtype=np.float64))
    if propagated.shape[0] == 0:
        raise PartitionError("cannot aggregate an empty set of rows")
    return propagated.mean(axis=0)


def aggregation_weights(g: DiGraph, members, cfg: PropagationConfig) -> np.ndarray:
    """Row vector w with w @ X0 == mean of the propagated member features."""
    op = partition_kernel(g, members, cfg)
    return op.mean(axis=0, keepdims=True)


def magnetic_adjacency(g: DiGraph, q: float) -> sp.csr_matrix:
    """Hermitian phase-modulated adjacency with self-loops (complex CSR)."""
    edges = g.edges()
    n = g.n
    if len(edges):
        a = sp.coo_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])),
                          shape=(n, n)).tocsr()
    else:
        a = sp.csr_matrix((n, n))
    sym = (a + a.T) * 0.5 + sp.eye(n, format="csr")
    theta = (a - a.T) * (2.0 * np.pi * q)
    # exp(i*theta) elementwise on the support of sym
    sym = sym.tocoo()
    phases = np.exp(1j * np.asarray(theta.tocsr()[sym.row, sym.col]).reshape(-1))
    return sp.coo_matrix((sym.data * phases, (sym.row, sym.col)),
                         shape=(n, n)).tocsr()


def _normalized(h: sp.spmatrix) -> sp.csr_matrix:
    deg = np.abs(h).sum(axis=1)
    deg = np.asarray(deg).reshape(-1)
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    d = sp.diags(inv_sqrt)
    return (d @ h @ d).tocsr()


def propagate_global(g: DiGraph, X: np.ndarray, cfg: PropagationConfig) -> np.ndarray:
    """Precompute hop-wise global propagation; pure function of (g, X, cfg)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] != g.n:
        raise ConfigError(f"{X.shape[0]} feature rows for {g.n} nodes")
    if cfg.hops == 0:
        return X.copy()
    if cfg.mode == SYMMETRIC:
        h = magnetic_adjacency(g, 0.0).real
        op = _normalized(h)
        out = X
        for _ in range(cfg.hops):
            out = op @ out
        return np.asarray(out)
    h = magnetic_adjacency(g, cfg.q)
    # Degrees come from the symmetrized adjacency; |h| recovers it exactly.
    op = _normalized(h)
    out = X.astype(np.complex128)
    for _ in range(cfg.hops):
        out = op @ out
    return np.concatenate([out.real, out.imag], axis=1)


def digraph_encode(g: DiGraph, X: np.ndarray, cfg: PropagationConfig,
                   linear: nn.Mlp) -> nn.Tensor:
    """Leaf logits: frozen propagation followed by the trainable linear map."""
    feats = propagate_global(g, X, cfg)
    if feats.shape[1] != linear.in_dim:
        raise ConfigError(
            f"propagated width {feats.shape[1]} != linear input {linear.in_dim}")
    return linear(nn.constant(feats))
