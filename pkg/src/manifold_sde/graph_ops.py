"""Proximity graph, discrete generator and carré-du-champ field.

Conventions
-----------
``bandwidth`` is a Euclidean distance (edges join points at distance at most
``bandwidth``) and every operator carries the scale ``c / bandwidth**2``.
The generator is the Markov one, ``G = (c / h^2) (P - I)`` with ``P`` the
row-normalized adjacency; the random-walk graph Laplacian is ``-G``.

Applied to the coordinate functions, ``G`` gives the per-node drift
``(c/h^2) sum_j P_ij (x_j - x_i)`` and the carré-du-champ
``G(uw) - u Gw - w Gu`` gives the per-node local covariance
``(c/h^2) sum_j P_ij (x_j - x_i)(x_j - x_i)^T``.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components, minimum_spanning_tree

from .errors import ConnectivityError, NumericalError, ParameterError, ParseError
from .neighbors import SpatialIndex, build_index

log = logging.getLogger(__name__)

HARD_CUTOFF = "hard_cutoff"
GAUSSIAN = "gaussian"
GAUSSIAN_FLOOR = 1e-12
_IDW_EPS = 1e-12


@dataclass(frozen=True)
class GraphConfig:
    bandwidth: float
    intrinsic_dim: int
    kernel: str = HARD_CUTOFF
    scaling_c: Optional[float] = None  # None -> intrinsic_dim + 2
    knn_extension: int = 1

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ParameterError(f"bandwidth must be > 0, got {self.bandwidth}")
        if int(self.intrinsic_dim) < 1:
            raise ParameterError(f"intrinsic_dim must be >= 1, got {self.intrinsic_dim}")
        if self.kernel not in (HARD_CUTOFF, GAUSSIAN):
            raise ParameterError(f"unknown kernel {self.kernel!r}")
        if self.scaling_c is not None and not self.scaling_c > 0:
            raise ParameterError(f"scaling_c must be > 0, got {self.scaling_c}")
        if int(self.knn_extension) < 1:
            raise ParameterError("knn_extension must be >= 1")

    @property
    def c(self) -> float:
        return float(self.intrinsic_dim + 2) if self.scaling_c is None else float(self.scaling_c)

    @property
    def scale(self) -> float:
        return self.c / self.bandwidth ** 2


@dataclass
class ProximityGraph:
    """Symmetric weighted graph; ``W`` is CSR with an empty diagonal."""

    W: sparse.csr_matrix
    degrees: np.ndarray
    config: GraphConfig
    points: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.W.shape[0]

    @property
    def n_edges(self) -> int:
        return self.W.nnz // 2

    @property
    def P(self) -> sparse.csr_matrix:
        return sparse.diags(1.0 / self.degrees) @ self.W

    def neighbors(self, i: int) -> list[tuple[int, float]]:
        lo, hi = self.W.indptr[i], self.W.indptr[i + 1]
        return list(zip(self.W.indices[lo:hi].tolist(), self.W.data[lo:hi].tolist()))


@dataclass
class OperatorField:
    """Per-node drift (``N x n``), CDC matrices and their PSD square roots (``N x n x n``)."""

    drift: np.ndarray
    cdc: np.ndarray
    cdc_sqrt: np.ndarray
    degenerate_nodes: int = 0

    @property
    def n_nodes(self) -> int:
        return self.drift.shape[0]

    @property
    def ambient_dim(self) -> int:
        return self.drift.shape[1]


def _pairs_within(tree_index: SpatialIndex, r: float) -> tuple[np.ndarray, np.ndarray]:
    """All pairs i < j with exact distance <= r, and those distances."""
    X = tree_index.points
    pairs = tree_index._tree.query_pairs(r * (1 + 1e-9) + 1e-12, output_type="ndarray")
    if len(pairs) == 0:
        return np.empty((0, 2), dtype=int), np.empty(0)
    d = np.linalg.norm(X[pairs[:, 0]] - X[pairs[:, 1]], axis=1)
    keep = d <= r
    return pairs[keep], d[keep]


def build_graph(cloud, config: GraphConfig, index: Optional[SpatialIndex] = None) -> ProximityGraph:
    """Build the proximity graph of ``cloud`` under ``config``.

    Raises
    ------
    ConnectivityError
        If some node has no neighbour.  The error names the first such node
        and its nearest-neighbour distance, the smallest bandwidth at which it
        would get an edge.
    """
    X = np.asarray(getattr(cloud, "points", cloud), dtype=float)
    N = len(X)
    index = index or build_index(X)
    h = config.bandwidth
    if config.kernel == HARD_CUTOFF:
        pairs, d = _pairs_within(index, h)
        w = np.ones(len(pairs))
    else:
        cutoff = h * math.sqrt(-math.log(GAUSSIAN_FLOOR))
        pairs, d = _pairs_within(index, cutoff)
        w = np.exp(-(d / h) ** 2)
        keep = w >= GAUSSIAN_FLOOR
        pairs, w = pairs[keep], w[keep]
    rows = np.concatenate([pairs[:, 0], pairs[:, 1]])
    cols = np.concatenate([pairs[:, 1], pairs[:, 0]])
    W = sparse.csr_matrix((np.concatenate([w, w]), (rows, cols)), shape=(N, N))
    W.sort_indices()
    degrees = np.asarray(W.sum(axis=1)).ravel()
    isolated = np.nonzero(degrees <= 0)[0]
    if len(isolated):
        i = int(isolated[0])
        if N == 1:
            raise ConnectivityError(i, math.inf)
        _, nd = index.knn_batch(X[i:i + 1], 2)
        raise ConnectivityError(i, float(nd[0, 1]))
    return ProximityGraph(W=W, degrees=degrees, config=config, points=X)


def _n_components(N, pairs):
    A = sparse.csr_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(N, N))
    return connected_components(A, directed=False)[0]


def connectivity_radius(cloud, index: Optional[SpatialIndex] = None, k: int = 10) -> float:
    """Smallest r at which the hard-cutoff graph with radius r is connected.

    Binary search over sorted k-NN distances (pairs are fetched once, at the
    largest candidate) locates a connected radius; the exact threshold is the
    longest edge of a minimum spanning tree of that graph.
    """
    X = np.asarray(getattr(cloud, "points", cloud), dtype=float)
    N = len(X)
    if N < 2:
        raise ParameterError("need at least two points")
    index = index or build_index(X)
    _, kd = index.knn_batch(X, min(k, N - 1) + 1)
    cand = np.unique(kd[:, 1:])
    cand = cand[cand > 0]

    r_hi = cand[-1] if len(cand) else 1.0
    while True:
        pairs, d = _pairs_within(index, r_hi)
        if _n_components(N, pairs) == 1:
            break
        r_hi *= 2.0
    order = np.argsort(d, kind="stable")
    pairs, d = pairs[order], d[order]
    cand = np.append(cand[cand < r_hi], r_hi)
    lo, hi = 0, len(cand) - 1
    while lo < hi:
        mid = (lo + hi) // 2
        m = int(np.searchsorted(d, cand[mid], side="right"))
        if _n_components(N, pairs[:m]) == 1:
            hi = mid
        else:
            lo = mid + 1
    m = int(np.searchsorted(d, cand[hi], side="right"))
    pairs, d = pairs[:m], d[:m]
    # zero-length edges would vanish from sparse storage; a tiny offset keeps them.
    A = sparse.csr_matrix((d + 1e-300, (pairs[:, 0], pairs[:, 1])), shape=(N, N))
    mst = minimum_spanning_tree(A)
    return float(mst.data.max()) if mst.nnz else 0.0


def default_bandwidth(cloud, index: Optional[SpatialIndex] = None) -> float:
    """1.5 times the connectivity radius of the hard-cutoff graph."""
    return 1.5 * connectivity_radius(cloud, index)


def generator_apply(g: ProximityGraph, u) -> np.ndarray:
    """``(G u)_i = (c/h^2) sum_j (W_ij/m_i)(u_j - u_i)``; works column-wise on 2-D ``u``."""
    u = np.asarray(u, dtype=float)
    Wu = g.W @ u
    if u.ndim == 1:
        return g.config.scale * (Wu / g.degrees - u)
    return g.config.scale * (Wu / g.degrees[:, None] - u)


def rwgl_apply(g: ProximityGraph, u) -> np.ndarray:
    """Random-walk graph Laplacian, the negative of :func:`generator_apply`."""
    return -generator_apply(g, u)


def cdc_apply(g: ProximityGraph, u, w) -> np.ndarray:
    """Carré-du-champ of two node functions: ``G(uw) - u Gw - w Gu``."""
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    return generator_apply(g, u * w) - u * generator_apply(g, w) - w * generator_apply(g, u)


def local_covariance(g: ProximityGraph, u, w) -> np.ndarray:
    """Closed form of :func:`cdc_apply`: ``(c/h^2) sum_j P_ij (u_j-u_i)(w_j-w_i)``."""
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    W = g.W.tocoo()
    r, c = W.row, W.col
    acc = np.bincount(r, weights=W.data * (u[c] - u[r]) * (w[c] - w[r]), minlength=g.n_nodes)
    return g.config.scale * acc / g.degrees


def psd_sqrt(S: np.ndarray, nodes_offset: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Clip a stack of symmetric matrices to PSD and return ``(clipped, sqrt)``."""
    S = 0.5 * (S + np.swapaxes(S, -1, -2))
    try:
        lam, V = np.linalg.eigh(S)
    except np.linalg.LinAlgError:
        for i in range(len(S)):
            try:
                np.linalg.eigh(S[i])
            except np.linalg.LinAlgError:
                raise NumericalError(f"eigendecomposition failed at node {i + nodes_offset}") from None
        raise
    if not np.all(np.isfinite(lam)):
        bad = int(np.nonzero(~np.all(np.isfinite(lam), axis=-1))[0][0])
        raise NumericalError(f"eigendecomposition failed at node {bad + nodes_offset}")
    lam = np.clip(lam, 0.0, None)
    clipped = np.einsum("...ik,...k,...jk->...ij", V, lam, V)
    root = np.einsum("...ik,...k,...jk->...ij", V, np.sqrt(lam), V)
    return clipped, root


def build_operator_field(g: ProximityGraph) -> OperatorField:
    X = g.points
    N, n = X.shape
    W = g.W.tocoo()
    r, c = W.row, W.col
    p = W.data / g.degrees[r]
    D = X[c] - X[r]
    drift = np.empty((N, n))
    for k in range(n):
        drift[:, k] = np.bincount(r, weights=p * D[:, k], minlength=N)
    cdc = np.empty((N, n, n))
    for k in range(n):
        for l in range(k, n):
            col = np.bincount(r, weights=p * D[:, k] * D[:, l], minlength=N)
            cdc[:, k, l] = col
            cdc[:, l, k] = col
    drift *= g.config.scale
    cdc *= g.config.scale
    cdc, root = psd_sqrt(cdc)
    n_nb = np.diff(g.W.indptr)
    degenerate = int(np.sum(n_nb < g.config.intrinsic_dim))
    if degenerate:
        log.warning("%d nodes have fewer than %d neighbours", degenerate, g.config.intrinsic_dim)
    return OperatorField(drift=drift, cdc=cdc, cdc_sqrt=root, degenerate_nodes=degenerate)


def dirichlet_form(g: ProximityGraph, u, v) -> float:
    """Degree-normalized Dirichlet form ``(c/2h^2) sum_ij W_ij du dv / sum_i m_i``."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    W = g.W.tocoo()
    r, c = W.row, W.col
    total = float(np.sum(W.data * (u[r] - u[c]) * (v[r] - v[c])))
    return 0.5 * g.config.scale * total / float(g.degrees.sum())


def extend_batch(field: OperatorField, index: SpatialIndex, X, k: int = 1):
    """Evaluate ``(drift, cdc_sqrt, cdc)`` at ambient points ``X`` (``M x n``).

    ``k == 1`` copies the nearest node's values.  For ``k > 1`` the k nearest
    nodes are averaged with weights proportional to ``1 / (dist + 1e-12)`` and
    the averaged CDC is re-clipped to PSD before taking its root.
    Also returns the nearest-node indices and distances.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    idx, dist = index.knn_batch(X, k)
    if k == 1:
        i = idx[:, 0]
        return field.drift[i], field.cdc_sqrt[i], field.cdc[i], i, dist[:, 0]
    w = 1.0 / (dist + _IDW_EPS)
    w /= w.sum(axis=1, keepdims=True)
    drift = np.einsum("mk,mkj->mj", w, field.drift[idx])
    cdc = np.einsum("mk,mkij->mij", w, field.cdc[idx])
    cdc, root = psd_sqrt(cdc)
    return drift, root, cdc, idx[:, 0], dist[:, 0]


def extend_to_ambient(field: OperatorField, index: SpatialIndex, x, k: int = 1):
    """Single-point version of :func:`extend_batch`: ``(drift, cdc_sqrt, cdc)``."""
    if k < 1:
        raise ParameterError("k must be >= 1")
    drift, root, cdc, _, _ = extend_batch(field, index, np.asarray(x, dtype=float)[None, :], k)
    return drift[0], root[0], cdc[0]


def save_field(path, field: OperatorField) -> None:
    n = field.ambient_dim
    header = ["node"] + [f"v{i + 1}" for i in range(n)]
    header += [f"g{i + 1}{j + 1}" if n < 10 else f"g{i + 1}_{j + 1}" for i in range(n) for j in range(n)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(field.n_nodes):
            w.writerow([i] + [format(v, ".17g") for v in field.drift[i]]
                       + [format(v, ".17g") for v in field.cdc[i].ravel()])


def load_field(path) -> OperatorField:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty field file", 1) from None
        n = sum(1 for h in header if h.startswith("v"))
        if header[0] != "node" or n == 0 or len(header) != 1 + n + n * n:
            raise ParseError(f"unexpected field header {header[:4]}...", 1)
        rows = []
        for lineno, cells in enumerate(reader, start=2):
            if not cells:
                continue
            if len(cells) != len(header):
                raise ParseError(f"expected {len(header)} cells, got {len(cells)}", lineno)
            try:
                rows.append([float(c) for c in cells[1:]])
            except ValueError:
                raise ParseError("non-numeric cell", lineno) from None
    data = np.array(rows)
    drift = data[:, :n]
    cdc = data[:, n:].reshape(-1, n, n)
    _, root = psd_sqrt(cdc)
    return OperatorField(drift=drift, cdc=cdc, cdc_sqrt=root)
