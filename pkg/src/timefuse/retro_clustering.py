"""Retrospective clustering of fused document embeddings.

Three algorithms: seeded k-means (k-means++ init, Lloyd iterations),
time-bucketed group-average agglomerative clustering, and HDBSCAN built from
first principles (core distances, mutual reachability, MST, condensed tree,
excess-of-mass selection).

Noise points from HDBSCAN are expanded into singleton clusters in
``assignment`` so every document is assigned; ``cn`` counts only the
selected (non-singleton) clusters and the raw labels are kept alongside.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime

import numpy as np

from .ioutil import atomic_write

_ZERO_DIST = 1e-12  # lambda cap: merges at distance 0 get lambda 1/_ZERO_DIST


@dataclass
class ClusteringResult:
    assignment: dict[str, int]
    cn: int
    algorithm: str
    params: dict = field(default_factory=dict)
    raw_labels: dict[str, int] | None = None  # hdbscan only; -1 marks noise
    n_noise: int = 0
    objective_history: list[float] | None = None  # kmeans only


class DistanceMatrixView:
    """Pairwise distances over a fixed embedding matrix, computed on first
    access. Cosine distance is 1 - cosine similarity (range [0, 2])."""

    def __init__(self, X: np.ndarray, metric: str = "cosine"):
        if metric not in ("cosine", "euclidean"):
            raise ValueError(f"unknown metric {metric!r}")
        self.X = np.asarray(X, dtype=np.float64)
        self.metric = metric
        self._matrix: np.ndarray | None = None

    def matrix(self) -> np.ndarray:
        if self._matrix is None:
            X = self.X
            if self.metric == "cosine":
                norms = np.linalg.norm(X, axis=1)
                norms[norms == 0.0] = 1.0
                unit = X / norms[:, None]
                d = 1.0 - unit @ unit.T
            else:
                sq = (X * X).sum(axis=1)
                d = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
                np.maximum(d, 0.0, out=d)
                np.sqrt(d, out=d)
            np.fill_diagonal(d, 0.0)
            self._matrix = np.maximum(d, d.T)  # enforce exact symmetry
        return self._matrix


def _default_ids(n: int, ids) -> list[str]:
    if ids is None:
        return [str(i) for i in range(n)]
    ids = list(ids)
    if len(ids) != n:
        raise ValueError("ids length must match number of embeddings")
    return ids


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------

def _kmeanspp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    closest = ((X - centers[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = closest.sum()
        if total <= 0:
            centers[c] = X[rng.integers(n)]
            continue
        probs = closest / total
        centers[c] = X[rng.choice(n, p=probs)]
        closest = np.minimum(closest, ((X - centers[c]) ** 2).sum(axis=1))
    return centers


def kmeans(X: np.ndarray, k: int, seed: int = 0, ids=None,
           metric: str = "cosine", max_iter: int = 300) -> ClusteringResult:
    """Lloyd's algorithm with k-means++ seeding; cosine metric operates on
    L2-normalized points. Empty clusters are reseeded to the farthest point."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    ids = _default_ids(n, ids)
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    if metric == "cosine":
        norms = np.linalg.norm(X, axis=1)
        norms[norms == 0.0] = 1.0
        X = X / norms[:, None]

    rng = np.random.default_rng(seed)
    centers = _kmeanspp_init(X, k, rng)
    labels = np.full(n, -1)
    history: list[float] = []
    for _ in range(max_iter):
        d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = d2.argmin(axis=1)
        history.append(float(d2[np.arange(n), new_labels].sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(k):
            members = labels == c
            if members.any():
                centers[c] = X[members].mean(axis=0)
            else:
                farthest = int(d2[np.arange(n), labels].argmax())
                centers[c] = X[farthest]
    assignment = {ids[i]: int(labels[i]) for i in range(n)}
    return ClusteringResult(assignment=assignment, cn=len(set(labels.tolist())),
                            algorithm="kmeans", params={"k": k, "seed": seed, "metric": metric},
                            objective_history=history)


# ---------------------------------------------------------------------------
# group-average agglomerative clustering with time buckets
# ---------------------------------------------------------------------------

def _agglomerate(base: np.ndarray, clusters: list[list[int]], target: int) -> list[list[int]]:
    """Group-average linkage until ``target`` clusters remain. Lance-Williams
    update keeps cluster distances exact; ties merge the lowest index pair."""
    m = len(clusters)
    if m <= target:
        return clusters
    live = list(range(m))
    members = [list(c) for c in clusters]
    dist = np.full((m, m), np.inf)
    for ai in range(m):
        for bi in range(ai + 1, m):
            dist[ai, bi] = dist[bi, ai] = base[np.ix_(members[ai], members[bi])].mean()
    while len(live) > target:
        best = (np.inf, None)
        for ii, a in enumerate(live):
            for b in live[ii + 1:]:
                if dist[a, b] < best[0]:
                    best = (dist[a, b], (a, b))
        a, b = best[1]
        wa, wb = len(members[a]), len(members[b])
        for c in live:
            if c not in (a, b):
                dist[a, c] = dist[c, a] = (wa * dist[a, c] + wb * dist[b, c]) / (wa + wb)
        members[a] = members[a] + members[b]
        live.remove(b)
    return [members[a] for a in live]


def gac(X: np.ndarray, k: int, timestamps: list[datetime], bucket_days: float = 30.0,
        seed: int = 0, ids=None, metric: str = "cosine") -> ClusteringResult:
    """Augmented group-average clustering: agglomerate inside chronological
    buckets, then repeatedly halve the bucket count and continue until ``k``
    clusters remain. Deterministic."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    ids = _default_ids(n, ids)
    if len(timestamps) != n:
        raise ValueError("timestamps length must match number of embeddings")
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    base = DistanceMatrixView(X, metric).matrix()

    epoch = min(timestamps)
    width_s = bucket_days * 86400.0
    clusters = [[i] for i in range(n)]
    # cluster timestamp = earliest member timestamp
    def bucket_of(cluster: list[int], width: float) -> int:
        t = min(timestamps[i] for i in cluster)
        return int((t - epoch).total_seconds() // width)

    while len(clusters) > k:
        buckets: dict[int, list[list[int]]] = {}
        for cluster in clusters:
            buckets.setdefault(bucket_of(cluster, width_s), []).append(cluster)
        if len(buckets) == 1:
            clusters = _agglomerate(base, clusters, k)
            break
        total = len(clusters)
        new_clusters: list[list[int]] = []
        for key in sorted(buckets):
            group = buckets[key]
            # halve each bucket, but never drop the global total below k
            target = max(len(group) - max(0, total - k), (len(group) + 1) // 2)
            reduced = _agglomerate(base, group, target)
            total -= len(group) - len(reduced)
            new_clusters.extend(reduced)
        clusters = new_clusters
        width_s *= 2.0  # halve the bucket count for the next round

    assignment = {}
    for label, cluster in enumerate(clusters):
        for i in cluster:
            assignment[ids[i]] = label
    return ClusteringResult(assignment=assignment, cn=len(clusters), algorithm="gac",
                            params={"k": k, "bucket_days": bucket_days, "metric": metric})


# ---------------------------------------------------------------------------
# HDBSCAN
# ---------------------------------------------------------------------------

def core_distances(D: np.ndarray, min_samples: int) -> np.ndarray:
    """Distance to the min_samples-th nearest neighbor (self excluded)."""
    n = D.shape[0]
    if min_samples < 1 or min_samples >= n:
        raise ValueError(f"min_samples must be in [1, {n - 1}]")
    return np.sort(D, axis=1)[:, min_samples]


def mutual_reachability(D: np.ndarray, core: np.ndarray) -> np.ndarray:
    mr = np.maximum(np.maximum(core[:, None], core[None, :]), D)
    np.fill_diagonal(mr, 0.0)
    return mr


def prim_mst(W: np.ndarray) -> list[tuple[int, int, float]]:
    """Minimum spanning tree edges of a dense weight matrix (Prim's
    algorithm, lowest index wins ties)."""
    n = W.shape[0]
    in_tree = np.zeros(n, dtype=bool)
    in_tree[0] = True
    best = W[0].copy()
    source = np.zeros(n, dtype=int)
    edges = []
    for _ in range(n - 1):
        candidates = np.where(in_tree, np.inf, best)
        v = int(candidates.argmin())
        edges.append((int(source[v]), v, float(best[v])))
        in_tree[v] = True
        improve = (~in_tree) & (W[v] < best)
        best[improve] = W[v][improve]
        source[improve] = v
    return edges


@dataclass
class CondensedTree:
    """Pruned cluster hierarchy: per-cluster birth lambda and parent, point
    fall-out events, and cluster split events."""

    parent: dict[int, int]                   # cluster -> parent cluster
    birth: dict[int, float]                  # cluster -> birth lambda
    point_rows: list[tuple[int, int, float]]     # (cluster, point, lambda)
    cluster_rows: list[tuple[int, int, float, int]]  # (parent, child, lambda, size)

    def stabilities(self) -> dict[int, float]:
        stab = {c: 0.0 for c in self.birth}
        for cluster, _, lam in self.point_rows:
            stab[cluster] += lam - self.birth[cluster]
        for parent, _, lam, size in self.cluster_rows:
            stab[parent] += size * (lam - self.birth[parent])
        return stab


def _single_linkage(mst_edges, n: int):
    """scipy-style merge tree: children/dist arrays indexed by node - n."""
    edges = sorted(mst_edges, key=lambda e: (e[2], e[0], e[1]))
    parent = list(range(2 * n - 1))
    size = [1] * (2 * n - 1)
    children = []
    dists = []

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    nxt = n
    for u, v, w in edges:
        ru, rv = find(u), find(v)
        children.append((ru, rv))
        dists.append(w)
        parent[ru] = parent[rv] = nxt
        size[nxt] = size[ru] + size[rv]
        nxt += 1
    return children, dists, size


def condense_tree(children, dists, sizes, n: int, min_cluster_size: int) -> CondensedTree:
    root = 2 * n - 2
    relabel = {root: 0}
    tree = CondensedTree(parent={}, birth={0: 0.0}, point_rows=[], cluster_rows=[])
    next_label = 1
    ignore = set()

    def node_size(node: int) -> int:
        return 1 if node < n else sizes[node]

    def leaves(node: int) -> list[int]:
        stack, out = [node], []
        while stack:
            cur = stack.pop()
            if cur < n:
                out.append(cur)
            else:
                stack.extend(children[cur - n])
        return out

    # BFS top-down; each internal node detaches small children from the
    # condensed cluster it currently belongs to
    queue = [root]
    while queue:
        node = queue.pop(0)
        if node in ignore or node < n:
            continue
        cluster = relabel[node]
        left, right = children[node - n]
        d = dists[node - n]
        lam = 1.0 / max(d, _ZERO_DIST)
        lsize, rsize = node_size(left), node_size(right)

        if lsize >= min_cluster_size and rsize >= min_cluster_size:
            for child in (left, right):
                label = next_label
                next_label += 1
                relabel[child] = label
                tree.parent[label] = cluster
                tree.birth[label] = lam
                tree.cluster_rows.append((cluster, label, lam, node_size(child)))
                queue.append(child)
        elif lsize < min_cluster_size and rsize < min_cluster_size:
            for child in (left, right):
                for leaf in leaves(child):
                    tree.point_rows.append((cluster, leaf, lam))
                ignore.update(_subtree_nodes(child, children, n))
        else:
            small, big = (left, right) if lsize < min_cluster_size else (right, left)
            for leaf in leaves(small):
                tree.point_rows.append((cluster, leaf, lam))
            ignore.update(_subtree_nodes(small, children, n))
            relabel[big] = cluster
            queue.append(big)
    return tree


def _subtree_nodes(node: int, children, n: int) -> list[int]:
    stack, out = [node], []
    while stack:
        cur = stack.pop()
        out.append(cur)
        if cur >= n:
            stack.extend(children[cur - n])
    return out


def select_clusters(tree: CondensedTree) -> set[int]:
    """Excess-of-mass selection; the root is never selected (no
    single-cluster solutions)."""
    stability = tree.stabilities()
    kids: dict[int, list[int]] = {}
    for child, parent in tree.parent.items():
        kids.setdefault(parent, []).append(child)
    selected: set[int] = set()
    agg: dict[int, float] = {}
    for cluster in sorted(tree.birth, reverse=True):  # children first
        child_sum = sum(agg[c] for c in kids.get(cluster, ()))
        if cluster == 0:
            continue
        if stability[cluster] >= child_sum:
            # drop any selected descendants
            stack = list(kids.get(cluster, ()))
            while stack:
                c = stack.pop()
                selected.discard(c)
                stack.extend(kids.get(c, ()))
            selected.add(cluster)
            agg[cluster] = stability[cluster]
        else:
            agg[cluster] = child_sum
    return selected


def hdbscan(X: np.ndarray, min_cluster_size: int = 5, min_samples: int | None = None,
            ids=None, metric: str = "cosine") -> ClusteringResult:
    """Density-based clustering with automatic cluster count; points in no
    selected cluster are noise."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    ids = _default_ids(n, ids)
    if min_cluster_size < 2:
        raise ValueError("min_cluster_size must be >= 2")
    if n < min_cluster_size:
        raise ValueError(f"need at least min_cluster_size={min_cluster_size} points, got {n}")
    if min_samples is None:
        min_samples = min_cluster_size
    min_samples = min(min_samples, n - 1)

    D = DistanceMatrixView(X, metric).matrix()
    core = core_distances(D, min_samples)
    mr = mutual_reachability(D, core)
    edges = prim_mst(mr)
    children, dists, sizes = _single_linkage(edges, n)
    tree = condense_tree(children, dists, sizes, n, min_cluster_size)
    selected = select_clusters(tree)

    # map each point's fall-out cluster up to the nearest selected ancestor
    label_for: dict[int, int] = {}
    cluster_ids = {c: i for i, c in enumerate(sorted(selected))}
    raw = {}
    for cluster, point, _ in tree.point_rows:
        cur = cluster
        label = -1
        while True:
            if cur in selected:
                label = cluster_ids[cur]
                break
            if cur == 0:
                break
            cur = tree.parent[cur]
        raw[ids[point]] = label
    for doc_id in ids:  # n == 1 guard and safety: everything must be labeled
        raw.setdefault(doc_id, -1)

    assignment = {}
    next_id = len(cluster_ids)
    n_noise = 0
    for doc_id in ids:
        if raw[doc_id] >= 0:
            assignment[doc_id] = raw[doc_id]
        else:
            assignment[doc_id] = next_id
            next_id += 1
            n_noise += 1
    return ClusteringResult(
        assignment=assignment, cn=len(cluster_ids), algorithm="hdbscan",
        params={"min_cluster_size": min_cluster_size, "min_samples": min_samples,
                "metric": metric},
        raw_labels=raw, n_noise=n_noise)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_clustering(result: ClusteringResult, path) -> None:
    with atomic_write(path) as handle:
        summary = {"algorithm": result.algorithm, "CN": result.cn, "params": result.params,
                   "n_noise": result.n_noise}
        handle.write(json.dumps(summary) + "\n")
        for doc_id in sorted(result.assignment):
            handle.write(json.dumps({"doc_id": doc_id,
                                     "cluster_id": result.assignment[doc_id]}) + "\n")


def load_assignment(path) -> dict[str, int]:
    assignment = {}
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if not line.strip():
                continue
            rec = json.loads(line)
            if "doc_id" in rec:
                assignment[rec["doc_id"]] = rec["cluster_id"]
    return assignment
