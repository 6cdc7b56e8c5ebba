"""Reference answers computed from the raw edge list, independent of the engine."""
from __future__ import annotations

import networkx as nx
import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, shortest_path


def simple_undirected(n: int, src, dst) -> csr_matrix:
    """0/1 symmetric adjacency without self loops."""
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    keep = src != dst
    rows = np.concatenate([src[keep], dst[keep]])
    cols = np.concatenate([dst[keep], src[keep]])
    a = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    a.data[:] = 1.0
    a.eliminate_zeros()
    return a


def multigraph_counts(n: int, src, dst) -> csr_matrix:
    """Symmetric matrix counting edge slots between each pair (self loops count twice)."""
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    rows = np.concatenate([src, dst])
    cols = np.concatenate([dst, src])
    return csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))


def bfs_depths(adj: csr_matrix, root: int) -> dict[int, int]:
    dist = shortest_path(adj, unweighted=True, directed=False, indices=root)
    hit = np.flatnonzero(np.isfinite(dist))
    return {int(v): int(dist[v]) for v in hit}


def khop(adj: csr_matrix, root: int, k: int) -> set[int]:
    return {v for v, d in bfs_depths(adj, root).items() if d <= k}


def pagerank(adj: csr_matrix, iters: int = 20, damping: float = 0.85) -> np.ndarray:
    n = adj.shape[0]
    deg = np.asarray(adj.sum(axis=1)).ravel()
    dangling = deg == 0
    inv = np.where(dangling, 0.0, 1.0 / np.where(dangling, 1.0, deg))
    r = np.full(n, 1.0 / n)
    for _ in range(iters):
        spread = adj.T @ (r * inv)
        r = (1 - damping) / n + damping * (spread + r[dangling].sum() / n)
    return r


def wcc(adj: csr_matrix) -> np.ndarray:
    """Component id per vertex, named by its smallest member."""
    _, comp = connected_components(adj, directed=False)
    smallest = np.full(comp.max() + 1, adj.shape[0], dtype=np.int64)
    np.minimum.at(smallest, comp, np.arange(adj.shape[0]))
    return smallest[comp]


def cdlp(adj: csr_matrix, iters: int = 10) -> np.ndarray:
    """Synchronous label propagation, most frequent label, ties to the smallest."""
    n = adj.shape[0]
    coo = adj.tocoo()
    rows, cols = coo.row.astype(np.int64), coo.col.astype(np.int64)
    labels = np.arange(n, dtype=np.int64)
    for _ in range(iters):
        pairs = rows * n + labels[cols]
        uniq, counts = np.unique(pairs, return_counts=True)
        u, lab = uniq // n, uniq % n
        order = np.lexsort((lab, -counts, u))
        u, lab = u[order], lab[order]
        first = np.ones(len(u), dtype=bool)
        first[1:] = u[1:] != u[:-1]
        new = labels.copy()
        new[u[first]] = lab[first]
        labels = new
    return labels


def lcc(n: int, src, dst) -> tuple[dict[int, int], dict[int, float]]:
    """Triangle counts and clustering coefficients via networkx."""
    g = nx.Graph()
    g.add_nodes_from(range(n))
    g.add_edges_from((int(a), int(b)) for a, b in zip(src, dst) if a != b)
    return nx.triangles(g), nx.clustering(g)


def gcn(counts: csr_matrix, x: np.ndarray, w: np.ndarray, b: np.ndarray, layers: int) -> np.ndarray:
    h = np.asarray(x, dtype=float)
    for _ in range(layers):
        h = np.maximum((h + counts @ h) @ w.T + b, 0.0)
    return h


def bi_count(src, dst, role, owns, min_age: int = 30, color: str = "red") -> int:
    """Directed edges person -> car that satisfy the query."""
    total = 0
    for u, v in zip(np.asarray(src).tolist(), np.asarray(dst).tolist()):
        ru, rv = role(u), role(v)
        if ru[0] == "person" and ru[1] > min_age and rv[0] == "car" and rv[2] == color \
                and owns(u, v):
            total += 1
    return total
