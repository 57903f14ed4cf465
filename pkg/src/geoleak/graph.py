"""Social graph, mutual-follow friendships and Chebyshev spectral filtering."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph

from .errors import InvalidInputError


def derive_friendships(follow_edges, n_users: int | None = None) -> set[tuple[int, int]]:
    """Return the unordered pairs ``(min, max)`` of users who follow each other.

    Self-loops are dropped. With ``n_users`` given, ids must lie in
    ``[0, n_users)``.
    """
    follows = set()
    for u, v in follow_edges:
        u, v = int(u), int(v)
        if u < 0 or v < 0 or (n_users is not None and (u >= n_users or v >= n_users)):
            raise InvalidInputError(f"user id out of range in follow edge ({u}, {v})")
        if u != v:
            follows.add((u, v))
    return {(min(u, v), max(u, v)) for u, v in follows if (v, u) in follows}


@dataclass(frozen=True)
class SocialGraph:
    n_users: int
    follow_edges: frozenset
    friend_edges: frozenset = field(init=False)
    adjacency: sp.csr_matrix = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.n_users < 0:
            raise InvalidInputError("n_users must be non-negative")
        friends = frozenset(derive_friendships(self.follow_edges, self.n_users))
        object.__setattr__(self, "friend_edges", friends)
        object.__setattr__(self, "adjacency", _adjacency(self.n_users, friends))

    @classmethod
    def from_follows(cls, n_users: int, follow_edges) -> "SocialGraph":
        return cls(n_users, frozenset((int(u), int(v)) for u, v in follow_edges))

    @classmethod
    def from_friendships(cls, n_users: int, pairs) -> "SocialGraph":
        """Build from undirected pairs, emitting both follow directions."""
        follows = set()
        for u, v in pairs:
            follows.add((int(u), int(v)))
            follows.add((int(v), int(u)))
        return cls(n_users, frozenset(follows))

    @property
    def degrees(self) -> np.ndarray:
        return np.asarray(self.adjacency.sum(axis=1)).ravel().astype(np.int64)

    def neighbors(self, u: int) -> np.ndarray:
        a = self.adjacency
        return a.indices[a.indptr[u]:a.indptr[u + 1]]


def _adjacency(n: int, friends) -> sp.csr_matrix:
    if not friends:
        return sp.csr_matrix((n, n), dtype=np.float64)
    pairs = np.array(sorted(friends), dtype=np.int64)
    rows = np.concatenate([pairs[:, 0], pairs[:, 1]])
    cols = np.concatenate([pairs[:, 1], pairs[:, 0]])
    a = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    a.sort_indices()
    return a


@dataclass(frozen=True)
class SpectralOperator:
    """Normalized Laplacian and its rescaling onto [-1, 1] for Chebyshev filters.

    Both matrices are kept sparse; ``.toarray()`` gives the dense form.
    """

    laplacian: sp.csr_matrix
    lambda_max: float
    scaled_laplacian: sp.csr_matrix

    @property
    def n(self) -> int:
        return self.laplacian.shape[0]


def _power_iteration(mat: sp.csr_matrix, tol: float = 1e-12, max_iter: int = 10_000) -> float:
    n = mat.shape[0]
    if n == 0 or mat.nnz == 0:
        return 0.0
    x = np.random.default_rng(0).standard_normal(n)
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(max_iter):
        y = mat @ x
        new = float(x @ y)
        norm = np.linalg.norm(y)
        if norm == 0.0:
            return 0.0
        x = y / norm
        if abs(new - lam) <= tol * max(abs(new), 1e-300):
            return new
        lam = new
    return lam


def normalized_laplacian(graph: SocialGraph) -> SpectralOperator:
    """``L = I - D^-1/2 A D^-1/2``; isolated users get an identity row."""
    n = graph.n_users
    deg = np.asarray(graph.adjacency.sum(axis=1)).ravel()
    inv_sqrt = np.zeros(n)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    d = sp.diags(inv_sqrt)
    lap = (sp.identity(n, format="csr") - d @ graph.adjacency @ d).tocsr()
    lap.sort_indices()
    # extreme eigenvalue of a PSD matrix; 2.0 is the theoretical ceiling
    lam = min(_power_iteration(lap), 2.0)
    if lam <= 0.0:
        lam = 1.0 if n else 2.0
    scaled = (2.0 / lam) * lap - sp.identity(n, format="csr")
    scaled = scaled.tocsr()
    scaled.sort_indices()
    return SpectralOperator(lap, lam, scaled)


def chebyshev_apply(op: SpectralOperator, x: np.ndarray, k: int) -> np.ndarray:
    """Stack ``[T_0(L~) x, ..., T_{k-1}(L~) x]`` along a new leading axis.

    ``x`` may carry any trailing dimensions; the first must be the user axis.
    """
    if k < 1:
        raise InvalidInputError("Chebyshev order must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.shape[0] != op.n:
        raise InvalidInputError(f"expected {op.n} rows, got shape {x.shape}")
    flat = x.reshape(op.n, -1)
    out = np.empty((k,) + flat.shape)
    out[0] = flat
    if k > 1:
        lt = op.scaled_laplacian
        out[1] = lt @ flat
        for i in range(2, k):
            out[i] = 2.0 * (lt @ out[i - 1]) - out[i - 2]
    return out.reshape((k,) + x.shape)


def chebyshev_adjoint(op: SpectralOperator, grads: np.ndarray) -> np.ndarray:
    """``sum_k T_k(L~) grads[k]``: the transpose of :func:`chebyshev_apply`.

    L~ is symmetric, so this is reverse accumulation through the recurrence.
    """
    k = grads.shape[0]
    g = grads.reshape(k, op.n, -1).copy()
    lt = op.scaled_laplacian
    for i in range(k - 1, 1, -1):
        g[i - 1] += 2.0 * (lt @ g[i])
        g[i - 2] -= g[i]
    if k > 1:
        g[0] += lt @ g[1]
    return g[0].reshape(grads.shape[1:])


def graph_statistics(graph: SocialGraph) -> dict:
    n = graph.n_users
    if n < 1:
        raise InvalidInputError("graph has no users")
    m = len(graph.friend_edges)
    a = graph.adjacency
    deg = graph.degrees.astype(np.float64)
    triangles = np.asarray((a @ a).multiply(a).sum(axis=1)).ravel() / 2.0
    possible = deg * (deg - 1) / 2.0
    local = np.divide(triangles, possible, out=np.zeros(n), where=possible > 0)
    density = m / (n * (n - 1) / 2.0) if n > 1 else 0.0
    return {
        "n_users": n,
        "n_friendships": m,
        "average_degree": 2.0 * m / n,
        "density": density,
        "clustering_coefficient": float(local.mean()),
        "diameter": diameter(graph),
    }


def diameter(graph: SocialGraph, chunk: int = 512) -> int:
    """Longest shortest path inside the largest connected component."""
    n = graph.n_users
    if n == 0:
        return 0
    _, labels = csgraph.connected_components(graph.adjacency, directed=False)
    counts = np.bincount(labels)
    nodes = np.flatnonzero(labels == np.argmax(counts))
    sub = graph.adjacency[nodes][:, nodes]
    best = 0
    for start in range(0, len(nodes), chunk):
        idx = np.arange(start, min(start + chunk, len(nodes)))
        dist = csgraph.shortest_path(sub, unweighted=True, directed=False, indices=idx)
        best = max(best, int(dist.max()))
    return best


# -- edge-list I/O -----------------------------------------------------------

def read_edge_list(path, n_users: int | None = None) -> SocialGraph:
    """Read ``follower<TAB>followee`` lines; ``#`` lines are comments."""
    edges = []
    declared = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if line.startswith("# users="):
                declared = int(line.split("=", 1)[1])
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t") if "\t" in line else line.split()
            try:
                u, v = int(parts[0]), int(parts[1])
            except (IndexError, ValueError):
                raise InvalidInputError(f"{path}:{lineno}: malformed edge line {line!r}") from None
            if u < 0 or v < 0:
                raise InvalidInputError(f"{path}:{lineno}: negative user id")
            edges.append((u, v))
    top = max((max(u, v) for u, v in edges), default=-1) + 1
    if n_users is None:
        n_users = declared if declared is not None else top
    if top > n_users:
        raise InvalidInputError(f"{path}: user id {top - 1} >= n_users={n_users}")
    return SocialGraph.from_follows(n_users, edges)


def write_edge_list(graph: SocialGraph, path) -> None:
    lines = [f"# users={graph.n_users}\n"]
    lines += [f"{u}\t{v}\n" for u, v in sorted(graph.follow_edges)]
    Path(path).write_text("".join(lines))

