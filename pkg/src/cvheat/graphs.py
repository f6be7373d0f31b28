"""Multi-scale graphs over an event frame.

Three scales are produced for each frame:

* the global graph: one node per non-empty patch, edges between patch centres
  closer than ``dist_threshold``;
* connected subgraphs: Louvain communities of the global graph, keeping those
  with at least ``node_threshold`` nodes;
* the contour graph: each kept community collapsed to its mean node, connected
  to its ``knn_k`` nearest neighbours.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set

import numpy as np
from scipy.spatial.distance import cdist

from cvheat.events import EventTensor

_GAIN_EPS = 1e-12


@dataclass
class SpatialGraph:
    """Undirected graph with 2-D node positions and node feature vectors.

    Attributes:
        pos: ``(n, 2)`` positions as ``(x, y)`` in pixels.
        feat: ``(n, d)`` node features.
        edges: ``(e, 2)`` index pairs with ``i < j``, sorted and unique.
    """

    pos: np.ndarray
    feat: np.ndarray
    edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __post_init__(self):
        self.pos = np.asarray(self.pos, dtype=np.float64).reshape(-1, 2)
        feat = np.asarray(self.feat, dtype=np.float32)
        self.feat = feat.reshape(len(self.pos), -1) if feat.ndim != 2 else feat
        if len(self.feat) != len(self.pos):
            raise ValueError("pos and feat disagree on the node count")
        self.edges = _canonical_edges(self.edges, len(self.pos))

    @property
    def num_nodes(self) -> int:
        return len(self.pos)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def feat_dim(self) -> int:
        return self.feat.shape[1]

    def neighbors(self) -> List[List[int]]:
        adj: List[List[int]] = [[] for _ in range(self.num_nodes)]
        for i, j in self.edges:
            adj[i].append(int(j))
            adj[j].append(int(i))
        return adj

    def induced(self, nodes: Sequence[int]) -> "SpatialGraph":
        """Node-induced subgraph, nodes renumbered in the given order."""
        nodes = np.asarray(sorted(nodes), dtype=np.int64)
        remap = -np.ones(self.num_nodes, dtype=np.int64)
        remap[nodes] = np.arange(len(nodes))
        e = remap[self.edges] if len(self.edges) else np.zeros((0, 2), dtype=np.int64)
        e = e[(e >= 0).all(axis=1)] if len(e) else e
        return SpatialGraph(self.pos[nodes], self.feat[nodes], e)

    @classmethod
    def empty(cls, feat_dim: int = 0) -> "SpatialGraph":
        return cls(np.zeros((0, 2)), np.zeros((0, feat_dim), dtype=np.float32))


def _canonical_edges(edges, n: int) -> np.ndarray:
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if len(e) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    if e.min() < 0 or e.max() >= n:
        raise ValueError("edge references a node index out of range")
    if np.any(e[:, 0] == e[:, 1]):
        raise ValueError("self-loops are not allowed")
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


def concat_graphs(graphs: Sequence[SpatialGraph], feat_dim: int = 0) -> SpatialGraph:
    """Disjoint union; node indices of later graphs are offset."""
    if not graphs:
        return SpatialGraph.empty(feat_dim)
    offsets = np.cumsum([0] + [g.num_nodes for g in graphs[:-1]])
    return SpatialGraph(
        np.concatenate([g.pos for g in graphs]),
        np.concatenate([g.feat for g in graphs]),
        np.concatenate([g.edges + off for g, off in zip(graphs, offsets)]),
    )


@dataclass
class GraphConfig:
    patch_h: int = 8
    patch_w: int = 8
    dist_threshold: float = 20.0
    node_threshold: int = 5
    knn_k: int = 4


@dataclass
class GraphBundle:
    global_graph: SpatialGraph
    subgraphs: List[SpatialGraph]
    contour: SpatialGraph
    communities: List[Set[int]] = field(default_factory=list)
    kept: List[Set[int]] = field(default_factory=list)

    def subgraph_union(self) -> SpatialGraph:
        return concat_graphs(self.subgraphs, self.global_graph.feat_dim)


# --------------------------------------------------------------------------- global graph


def build_global_graph(frame: EventTensor, patch_h: int, patch_w: int, dist_threshold: float) -> SpatialGraph:
    """One node per patch holding at least one event.

    Node features are the flattened patch contents (``C * patch_h * patch_w``
    values). Nodes ``i, j`` are joined iff ``0 < |pos_i - pos_j| < dist_threshold``.
    """
    data = np.asarray(frame.data if isinstance(frame, EventTensor) else frame)
    c, h, w = data.shape
    if h % patch_h or w % patch_w:
        raise ValueError(f"frame {h}x{w} is not divisible into {patch_h}x{patch_w} patches")
    if dist_threshold <= 0:
        raise ValueError("dist_threshold must be positive")
    gh, gw = h // patch_h, w // patch_w
    patches = data.reshape(c, gh, patch_h, gw, patch_w).transpose(1, 3, 0, 2, 4).reshape(gh * gw, -1)
    active = np.flatnonzero(patches.sum(axis=1) > 0)
    rows, cols = np.divmod(active, gw)
    pos = np.stack([cols * patch_w + patch_w / 2.0, rows * patch_h + patch_h / 2.0], axis=1)
    return SpatialGraph(pos, patches[active], _radius_edges(pos, dist_threshold))


def _radius_edges(pos: np.ndarray, radius: float) -> np.ndarray:
    if len(pos) < 2:
        return np.zeros((0, 2), dtype=np.int64)
    d = cdist(pos, pos)
    i, j = np.triu_indices(len(pos), k=1)
    keep = (d[i, j] > 0) & (d[i, j] < radius)
    return np.stack([i[keep], j[keep]], axis=1)


# --------------------------------------------------------------------------- Louvain


def modularity(num_nodes: int, edges: np.ndarray, partition: Sequence[Set[int]], resolution: float = 1.0) -> float:
    """Newman modularity of an unweighted graph."""
    m = len(edges)
    if m == 0:
        return 0.0
    label = np.empty(num_nodes, dtype=np.int64)
    for ci, nodes in enumerate(partition):
        for v in nodes:
            label[v] = ci
    deg = np.bincount(np.asarray(edges).ravel(), minlength=num_nodes).astype(np.float64)
    same = label[edges[:, 0]] == label[edges[:, 1]]
    internal = np.bincount(label[edges[:, 0]][same], minlength=len(partition)).astype(np.float64)
    tot = np.bincount(label, weights=deg, minlength=len(partition))
    return float(np.sum(internal / m - resolution * (tot / (2.0 * m)) ** 2))


class _WeightedGraph:
    """Adjacency for one Louvain level. ``loops[i]`` holds the weight of i's self-loop."""

    def __init__(self, n: int, adj: List[Dict[int, float]], loops: List[float]):
        self.n = n
        self.adj = adj
        self.loops = loops
        self.degree = [sum(a.values()) + 2.0 * l for a, l in zip(adj, loops)]
        self.m2 = sum(self.degree)

    @classmethod
    def from_edges(cls, n: int, edges: np.ndarray) -> "_WeightedGraph":
        adj: List[Dict[int, float]] = [dict() for _ in range(n)]
        for i, j in edges:
            i, j = int(i), int(j)
            adj[i][j] = adj[i].get(j, 0.0) + 1.0
            adj[j][i] = adj[j].get(i, 0.0) + 1.0
        return cls(n, adj, [0.0] * n)

    def contract(self, comm: List[int]) -> "_WeightedGraph":
        k = max(comm) + 1
        adj: List[Dict[int, float]] = [dict() for _ in range(k)]
        loops = [0.0] * k
        for i in range(self.n):
            ci = comm[i]
            loops[ci] += self.loops[i]
            for j, w in self.adj[i].items():
                cj = comm[j]
                if ci == cj:
                    # each internal edge is visited from both ends
                    loops[ci] += w / 2.0
                else:
                    adj[ci][cj] = adj[ci].get(cj, 0.0) + w
        return _WeightedGraph(k, adj, loops)


def _local_moves(g: _WeightedGraph, comm: List[int], resolution: float) -> bool:
    """Move single nodes to the neighbouring (or an empty) community with the best
    modularity gain until no move improves. Mutates ``comm``; returns whether
    anything moved."""
    n = g.n
    tot = [0.0] * n
    for i in range(n):
        tot[comm[i]] += g.degree[i]
    used = [0] * n
    for c in comm:
        used[c] += 1
    free = sorted(c for c in range(n) if used[c] == 0)
    scale = resolution / g.m2

    moved_any = False
    improved = True
    while improved:
        improved = False
        for i in range(n):
            ci = comm[i]
            ki = g.degree[i]
            links: Dict[int, float] = {}
            for j, w in g.adj[i].items():
                links[comm[j]] = links.get(comm[j], 0.0) + w
            tot[ci] -= ki
            stay = links.get(ci, 0.0) - tot[ci] * ki * scale
            best_c, best_gain = ci, stay
            for c in sorted(links):
                if c == ci:
                    continue
                gain = links[c] - tot[c] * ki * scale
                if gain > best_gain + _GAIN_EPS:
                    best_c, best_gain = c, gain
            if used[ci] > 1 and best_gain < -_GAIN_EPS:
                # isolating the node (gain 0) beats every occupied community
                best_c = free[0]
            tot[best_c] += ki
            if best_c != ci:
                used[ci] -= 1
                if used[ci] == 0:
                    free.append(ci)
                    free.sort()
                if used[best_c] == 0:
                    free.remove(best_c)
                used[best_c] += 1
                comm[i] = best_c
                improved = moved_any = True
    return moved_any


def _renumber(comm: List[int]) -> List[int]:
    seen: Dict[int, int] = {}
    return [seen.setdefault(c, len(seen)) for c in comm]


def _split_disconnected(num_nodes: int, adj: List[List[int]], comm: List[int]) -> List[int]:
    out = [-1] * num_nodes
    nxt = 0
    for s in range(num_nodes):
        if out[s] >= 0:
            continue
        out[s] = nxt
        queue = deque([s])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if out[v] < 0 and comm[v] == comm[s]:
                    out[v] = nxt
                    queue.append(v)
        nxt += 1
    return out


def louvain_partition(g: SpatialGraph, resolution: float = 1.0) -> List[Set[int]]:
    """Deterministic Louvain community detection.

    Nodes are visited in ascending index order and ties in modularity gain go to
    the lowest community index. After the usual move/contract levels the
    partition is polished on the original graph: disconnected communities are
    split into their components and single-node moves are repeated until
    neither step changes anything. Both steps never lower modularity, so the
    result is connected and a local maximum under single-node moves.

    Returns:
        Communities as sets of node indices, ordered by their smallest member.
    """
    n = g.num_nodes
    if n == 0:
        return []
    base = _WeightedGraph.from_edges(n, g.edges)
    if base.m2 == 0:
        return [{i} for i in range(n)]

    membership = list(range(n))
    level = base
    while True:
        comm = list(range(level.n))
        moved = _local_moves(level, comm, resolution)
        comm = _renumber(comm)
        membership = [comm[c] for c in membership]
        if not moved or max(comm) + 1 == level.n:
            break
        level = level.contract(comm)

    adj = g.neighbors()
    while True:
        membership = _renumber(_split_disconnected(n, adj, membership))
        if not _local_moves(base, membership, resolution):
            break

    groups: Dict[int, Set[int]] = {}
    for v, c in enumerate(membership):
        groups.setdefault(c, set()).add(v)
    return [groups[c] for c in sorted(groups, key=lambda c: min(groups[c]))]


# --------------------------------------------------------------------------- filtering / contour graph


def filter_subgraphs(partition: Sequence[Set[int]], node_threshold: int) -> List[Set[int]]:
    """Keep communities with at least ``node_threshold`` nodes."""
    if node_threshold < 1:
        raise ValueError("node_threshold must be >= 1")
    return [set(s) for s in partition if len(s) >= node_threshold]


def knn_edges(pos: np.ndarray, k: int) -> np.ndarray:
    """Union of each node's ``k`` nearest neighbours (ties to the lower index)."""
    n = len(pos)
    if n < 2:
        return np.zeros((0, 2), dtype=np.int64)
    d = cdist(pos, pos)
    np.fill_diagonal(d, np.inf)
    kk = min(k, n - 1)
    nbr = np.argsort(d, axis=1, kind="stable")[:, :kk]
    src = np.repeat(np.arange(n), kk)
    return np.stack([src, nbr.ravel()], axis=1)


def aggregate_contour_graph(g: SpatialGraph, kept: Sequence[Set[int]], knn_k: int) -> SpatialGraph:
    """Collapse each kept community to its mean position/feature and connect by kNN."""
    if knn_k < 1:
        raise ValueError("knn_k must be >= 1")
    if not kept:
        return SpatialGraph.empty(g.feat_dim)
    idx = [np.asarray(sorted(s), dtype=np.int64) for s in kept]
    pos = np.stack([g.pos[i].mean(axis=0) for i in idx])
    feat = np.stack([g.feat[i].mean(axis=0) for i in idx])
    return SpatialGraph(pos, feat, knn_edges(pos, knn_k))


def build_bundle(frame: EventTensor, cfg: Optional[GraphConfig] = None) -> GraphBundle:
    cfg = cfg or GraphConfig()
    gg = build_global_graph(frame, cfg.patch_h, cfg.patch_w, cfg.dist_threshold)
    if gg.num_nodes == 0:
        return GraphBundle(gg, [], SpatialGraph.empty(gg.feat_dim))
    communities = louvain_partition(gg)
    kept = filter_subgraphs(communities, cfg.node_threshold)
    subgraphs = [gg.induced(sorted(s)) for s in kept]
    contour = aggregate_contour_graph(gg, kept, cfg.knn_k)
    return GraphBundle(gg, subgraphs, contour, communities, kept)


# --------------------------------------------------------------------------- text dump


def _dump_graph(name: str, g: SpatialGraph) -> List[str]:
    lines = [f"[{name}] nodes={g.num_nodes} edges={g.num_edges} feat_dim={g.feat_dim}"]
    for i in range(g.num_nodes):
        feats = " ".join(f"{v:.6g}" for v in g.feat[i])
        lines.append(f"node {i} {g.pos[i, 0]:.6g} {g.pos[i, 1]:.6g} {feats}".rstrip())
    lines.extend(f"edge {i} {j}" for i, j in g.edges)
    return lines


def dump_bundle(bundle: GraphBundle) -> str:
    """Plain-text node table and edge list for each graph of the bundle."""
    lines = _dump_graph("global", bundle.global_graph)
    for k, sg in enumerate(bundle.subgraphs):
        lines += _dump_graph(f"subgraph {k}", sg)
    lines += _dump_graph("contour", bundle.contour)
    return "\n".join(lines) + "\n"
