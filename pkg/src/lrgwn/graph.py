"""Graph container, normalized Laplacian and sparse kernels."""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import shortest_path

log = logging.getLogger(__name__)

LAMBDA_MAX = 2.0


class GraphError(ValueError):
    """Invalid graph input (parse failure, isolated node, self-loop)."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


@dataclass(frozen=True)
class Graph:
    n: int
    edges: np.ndarray  # (m, 2) int64, u < v, sorted, unique
    adjacency: sp.csr_matrix = field(repr=False)
    features: np.ndarray | None = field(default=None, repr=False)

    @property
    def m(self):
        return int(self.edges.shape[0])

    @property
    def degrees(self):
        return np.diff(self.adjacency.indptr).astype(np.int64)

    def content_hash(self):
        """SHA-256 over node count and the canonical edge list."""
        h = hashlib.sha256()
        h.update(np.int64(self.n).tobytes())
        h.update(np.ascontiguousarray(self.edges, dtype=np.int64).tobytes())
        return h.hexdigest()

    def with_features(self, features):
        return from_edges(self.n, self.edges, features=features)


def from_edges(n, edges, features=None, strict=False):
    """Build a validated :class:`Graph` from an iterable of ``(u, v)`` pairs.

    Duplicate and reversed pairs collapse to one undirected edge. Self-loops
    are dropped with a warning, or raise when ``strict`` is set.
    """
    n = int(n)
    e = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges, dtype=np.int64)
    e = e.reshape(-1, 2)
    if e.size and (e.min() < 0 or e.max() >= n):
        raise GraphError(f"edge index out of range [0, {n})")
    loops = e[:, 0] == e[:, 1]
    if loops.any():
        if strict:
            raise GraphError(f"self-loop at node {int(e[loops][0, 0])}")
        warnings.warn(f"dropping {int(loops.sum())} self-loop(s)", stacklevel=2)
        e = e[~loops]
    e = np.sort(e, axis=1)
    e = np.unique(e, axis=0) if e.size else e.reshape(0, 2)
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    adj = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
    adj.sort_indices()
    deg = np.diff(adj.indptr)
    if n and (deg == 0).any():
        raise GraphError(f"isolated node {int(np.flatnonzero(deg == 0)[0])}")
    if features is not None:
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != n:
            raise GraphError(f"features must have shape (n={n}, d), got {features.shape}")
        if not np.isfinite(features).all():
            raise GraphError("features contain non-finite values")
    return Graph(n=n, edges=e, adjacency=adj, features=features)


def _parse_edge_list(text, strict):
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise GraphError(f"expected 'u v', got {raw!r}", line=lineno)
        try:
            u, v = int(parts[0]), int(parts[1])
        except ValueError:
            raise GraphError(f"non-integer node id in {raw!r}", line=lineno) from None
        if u < 0 or v < 0:
            raise GraphError(f"negative node id in {raw!r}", line=lineno)
        if u == v and strict:
            raise GraphError(f"self-loop at node {u}", line=lineno)
        pairs.append((u, v))
    return pairs


def _compact(pairs):
    ids = sorted({x for p in pairs for x in p})
    remap = {old: new for new, old in enumerate(ids)}
    return len(ids), [(remap[u], remap[v]) for u, v in pairs]


def load_features_csv(path, header=False):
    return np.loadtxt(path, delimiter=",", skiprows=1 if header else 0, ndmin=2, dtype=np.float64)


def load_graph(path, format="edge-list", strict=False, features_csv=None, csv_header=False):
    """Read a graph from an edge-list or JSON file.

    Edge-list node ids are compacted to ``[0, n)`` in sorted order. JSON files
    carry an explicit ``n``, so there ids are used as given.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    features = None
    if format == "edge-list":
        pairs = _parse_edge_list(text, strict)
        n, pairs = _compact(pairs)
    elif format == "json":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise GraphError(f"invalid JSON: {exc.msg}", line=exc.lineno) from None
        if not isinstance(doc, dict) or "n" not in doc or "edges" not in doc:
            raise GraphError("JSON graph needs keys 'n' and 'edges'")
        n = int(doc["n"])
        try:
            pairs = [(int(u), int(v)) for u, v in doc["edges"]]
        except (TypeError, ValueError):
            raise GraphError("edges must be a list of [u, v] integer pairs") from None
        if strict:
            for u, v in pairs:
                if u == v:
                    raise GraphError(f"self-loop at node {u}")
        features = doc.get("features")
    else:
        raise GraphError(f"unknown graph format {format!r}")
    if features_csv is not None:
        features = load_features_csv(features_csv, header=csv_header)
    return from_edges(n, pairs, features=features, strict=strict)


@dataclass(frozen=True)
class NormalizedLaplacian:
    n: int
    matrix: sp.csr_matrix = field(repr=False)
    lambda_max_bound: float = LAMBDA_MAX

    def toarray(self):
        return self.matrix.toarray()

    @property
    def nnz(self):
        return int(self.matrix.nnz)


def build_normalized_laplacian(g):
    """``I - D^{-1/2} A D^{-1/2}`` with an explicit unit diagonal."""
    deg = g.degrees.astype(np.float64)
    a = g.adjacency.tocoo()
    # -1/sqrt(d_u d_v) computed from the product so (u,v) and (v,u) are bit-identical
    off = -1.0 / np.sqrt(deg[a.row] * deg[a.col])
    rows = np.concatenate([a.row, np.arange(g.n)])
    cols = np.concatenate([a.col, np.arange(g.n)])
    vals = np.concatenate([off, np.ones(g.n)])
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(g.n, g.n))
    mat.sort_indices()
    return NormalizedLaplacian(n=g.n, matrix=mat)


def laplacian_matmat(lap, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != lap.n:
        raise ValueError(f"signal has {x.shape[0]} rows, Laplacian is {lap.n}x{lap.n}")
    return lap.matrix @ x


def kernel_vector(g):
    """Unit-norm ``D^{1/2} 1``, which ``L`` annihilates on every graph."""
    v = np.sqrt(g.degrees.astype(np.float64))
    return v / np.linalg.norm(v)


def hop_distances(g, seed):
    if not 0 <= seed < g.n:
        raise ValueError(f"seed {seed} outside [0, {g.n})")
    return shortest_path(g.adjacency, method="D", unweighted=True, indices=seed)


# small graph constructors used by tests, demos and toy tasks

def path_graph(n, features=None):
    return from_edges(n, [(i, i + 1) for i in range(n - 1)], features=features)


def ring_graph(n, features=None):
    return from_edges(n, [(i, (i + 1) % n) for i in range(n)], features=features)


def star_graph(n, features=None):
    """Star on ``n`` nodes, centre 0."""
    return from_edges(n, [(0, i) for i in range(1, n)], features=features)


def random_connected_graph(n, rng, extra_edge_prob=0.15):
    """Random spanning tree plus Bernoulli extra edges; connected, no isolated nodes."""
    perm = rng.permutation(n)
    edges = [(int(perm[i]), int(perm[rng.integers(0, i)])) for i in range(1, n)]
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(iu.size) < extra_edge_prob
    edges += list(zip(iu[keep].tolist(), ju[keep].tolist()))
    return from_edges(n, edges)


def random_tree(n, rng):
    return random_connected_graph(n, rng, extra_edge_prob=0.0)


def random_regular_graph(n, degree, rng, max_tries=50):
    """Random simple ``degree``-regular graph by the pairing model with retries."""
    if (n * degree) % 2:
        raise ValueError("n * degree must be even")
    for _ in range(max_tries):
        stubs = rng.permutation(np.repeat(np.arange(n), degree))
        e = np.sort(stubs.reshape(-1, 2), axis=1)
        bad = (e[:, 0] == e[:, 1])
        e = e[~bad]
        e = np.unique(e, axis=0)
        try:
            g = from_edges(n, e)
        except GraphError:
            continue
        if abs(g.m - n * degree // 2) <= max(1, n * degree // 200):
            return g
    raise RuntimeError("failed to sample a near-regular graph")
