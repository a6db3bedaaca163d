"""Place recognition over cluster embeddings, plus clustering metrics.

A scene map stores unit-norm cluster embeddings in a balanced k-d tree.
Query frames vote with the scene ids of their clusters' nearest neighbors.
Also here: leave-one-out scene accuracy, normalized mutual information, and
an agglomerative baseline that clusters 3-D segments by minimum pairwise
distance.
"""

from __future__ import annotations

import heapq
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.cluster.hierarchy
import scipy.spatial.distance
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.metrics import silhouette_score

EMBED_DIM = 128
MIN_CLUSTER_LINES = 4
DEFAULT_K_NN = 8


# -- exact k-d tree -------------------------------------------------------------


class KDTree:
    """Balanced k-d tree over row vectors with exact k-nearest-neighbor search.

    Split axes cycle with depth, split points are medians, so the tree depth
    is logarithmic.  Queries return exactly what a linear scan would: ties in
    distance break toward the smaller row index.
    """

    __slots__ = ("points", "_idx", "_axis", "_left", "_right", "_root", "_n_nodes")

    def __init__(self, points: np.ndarray):
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[0] == 0:
            raise ValueError("KDTree needs a nonempty [N, D] array")
        self.points = points
        n = points.shape[0]
        # node storage: one node per point, children as node indices (-1 = none)
        self._idx = np.empty(n, dtype=np.int64)  # point row of each node
        self._axis = np.empty(n, dtype=np.int64)
        self._left = np.full(n, -1, dtype=np.int64)
        self._right = np.full(n, -1, dtype=np.int64)
        self._n_nodes = 0
        self._root = self._build(np.arange(n, dtype=np.int64), depth=0)

    def _build(self, rows: np.ndarray, depth: int) -> int:
        d = self.points.shape[1]
        axis = depth % d
        m = rows.shape[0] // 2
        order = np.argpartition(self.points[rows, axis], m)
        rows = rows[order]
        node = self._n_nodes
        self._n_nodes += 1
        self._idx[node] = rows[m]
        self._axis[node] = axis
        left, right = rows[:m], rows[m + 1 :]
        self._left[node] = self._build(left, depth + 1) if left.size else -1
        self._right[node] = self._build(right, depth + 1) if right.size else -1
        return node

    def query(self, x: np.ndarray, k: int):
        """k nearest rows to x: (distances, row indices), ordered best first."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.points.shape[1],):
            raise ValueError("query point dimensionality mismatch")
        if not 1 <= k <= self.points.shape[0]:
            raise ValueError("k must be in [1, n_points]")
        # max-heap of the current k best as (-d2, -row) so the lexicographically
        # worst candidate, largest (d2, row), sits on top
        best: list = []

        def visit(node: int):
            if node == -1:
                return
            row = self._idx[node]
            diff = self.points[row] - x
            d2 = float(diff @ diff)
            cand = (-d2, -int(row))
            if len(best) < k:
                heapq.heappush(best, cand)
            elif cand > best[0]:
                heapq.heapreplace(best, cand)
            axis = self._axis[node]
            delta = x[axis] - self.points[row, axis]
            near, far = (self._left[node], self._right[node]) if delta < 0 else (self._right[node], self._left[node])
            visit(near)
            if len(best) < k or delta * delta <= -best[0][0]:
                visit(far)

        visit(self._root)
        pairs = sorted((-nd2, -nrow) for nd2, nrow in best)
        dists = np.sqrt([d2 for d2, _ in pairs])
        rows = np.array([row for _, row in pairs], dtype=np.int64)
        return dists, rows


def brute_force_knn(points: np.ndarray, x: np.ndarray, k: int):
    """Reference linear scan with the same (distance, index) ordering."""
    points = np.asarray(points, dtype=np.float64)
    d2 = ((points - np.asarray(x, dtype=np.float64)) ** 2).sum(axis=1)
    order = np.lexsort((np.arange(points.shape[0]), d2))[:k]
    return np.sqrt(d2[order]), order


# -- scene map and voting --------------------------------------------------------


@dataclass(frozen=True)
class MapEntry:
    scene_id: str
    frame_id: str
    line_count: int


@dataclass
class SceneMap:
    """Immutable store of cluster embeddings with their scene/frame origin."""

    embeddings: np.ndarray  # [N, 128] unit rows
    entries: list  # [MapEntry]
    tree: KDTree

    def __len__(self):
        return self.embeddings.shape[0]


@dataclass
class QueryResult:
    scene_id: str
    votes: dict  # scene_id -> vote count
    neighbors: list  # (distance, MapEntry) per query cluster x k


def build_map(records, min_lines: int = MIN_CLUSTER_LINES) -> SceneMap:
    """records: iterable of (frame_id, scene_id, embedding [128], line_count).

    Clusters with fewer than min_lines lines carry too little information and
    are dropped.  Raises if nothing survives.
    """
    embeddings, entries = [], []
    for frame_id, scene_id, emb, line_count in records:
        if line_count < min_lines:
            continue
        emb = np.asarray(emb, dtype=np.float64)
        if emb.shape != (EMBED_DIM,):
            raise ValueError(f"embedding must be [{EMBED_DIM}], got {emb.shape}")
        embeddings.append(emb)
        entries.append(MapEntry(scene_id=scene_id, frame_id=frame_id, line_count=int(line_count)))
    if not embeddings:
        raise ValueError("no clusters with enough lines to build a map")
    arr = np.stack(embeddings)
    return SceneMap(embeddings=arr, entries=entries, tree=KDTree(arr))


def query_frame(scene_map: SceneMap, query_embeddings, k_nn: int = DEFAULT_K_NN) -> QueryResult:
    """Vote over the scene ids of each query cluster's k nearest map entries."""
    q = np.asarray(query_embeddings, dtype=np.float64)
    if q.ndim != 2 or q.shape[0] == 0:
        raise ValueError("query needs at least one embedding")
    k = min(k_nn, len(scene_map))
    votes: dict = {}
    neighbors = []
    for row in q:
        dists, idx = scene_map.tree.query(row, k)
        for d, i in zip(dists, idx):
            entry = scene_map.entries[int(i)]
            votes[entry.scene_id] = votes.get(entry.scene_id, 0) + 1
            neighbors.append((float(d), entry))
    # most votes wins, ties toward the lexicographically smallest scene id
    best = min(votes.items(), key=lambda kv: (-kv[1], kv[0]))
    return QueryResult(scene_id=best[0], votes=votes, neighbors=neighbors)


@dataclass
class FrameClusters:
    """One frame's surviving cluster embeddings for retrieval."""

    frame_id: str
    scene_id: str
    embeddings: np.ndarray  # [M, 128]
    line_counts: np.ndarray  # [M]


def leave_one_out_accuracy(
    frames: list,
    k_nn: int = DEFAULT_K_NN,
    min_lines: int = MIN_CLUSTER_LINES,
    include_unrecognizable: bool = True,
):
    """Hold out each frame, map the rest, query, count correct scene matches.

    frames: [FrameClusters].  Frames whose clusters all fall under the
    min_lines filter (or whose scene has no other frame) cannot be recognized;
    they count as failures unless include_unrecognizable is False.
    Returns (accuracy, per-frame QueryResult-or-None list).
    """
    if not frames:
        raise ValueError("no frames to evaluate")
    results = []
    total = correct = 0
    for held in range(len(frames)):
        query = frames[held]
        records = [
            (f.frame_id, f.scene_id, emb, int(cnt))
            for j, f in enumerate(frames)
            if j != held
            for emb, cnt in zip(f.embeddings, f.line_counts)
        ]
        keep = [i for i, cnt in enumerate(query.line_counts) if cnt >= min_lines]
        try:
            scene_map = build_map(records, min_lines)
        except ValueError:
            scene_map = None
        if scene_map is None or not keep:
            results.append(None)
            if include_unrecognizable:
                total += 1
            continue
        res = query_frame(scene_map, query.embeddings[keep], k_nn)
        results.append(res)
        total += 1
        if res.scene_id == query.scene_id:
            correct += 1
    return (correct / total if total else 0.0), results


# -- normalized mutual information ----------------------------------------------


def nmi(pred_labels, gt_labels) -> float:
    """NMI = I(U;V) / sqrt(H(U) H(V)) with natural logs.

    Labels are opaque ids; the background id is an ordinary cluster.  Both
    partitions single-cluster -> 1.0 (they are identical); exactly one
    single-cluster -> 0.0 (no information).
    """
    u = np.asarray(pred_labels).ravel()
    v = np.asarray(gt_labels).ravel()
    if u.size == 0 or u.size != v.size:
        raise ValueError("label vectors must be nonempty and equal length")
    n = u.size
    _, ui = np.unique(u, return_inverse=True)
    _, vi = np.unique(v, return_inverse=True)
    nu, nv = int(ui.max()) + 1, int(vi.max()) + 1
    cont = np.zeros((nu, nv), dtype=np.float64)
    np.add.at(cont, (ui, vi), 1.0)
    pij = cont / n
    pi = pij.sum(axis=1)
    pj = pij.sum(axis=0)
    hu = float(-(pi[pi > 0] * np.log(pi[pi > 0])).sum())
    hv = float(-(pj[pj > 0] * np.log(pj[pj > 0])).sum())
    if hu == 0.0 and hv == 0.0:
        return 1.0
    if hu == 0.0 or hv == 0.0:
        return 0.0
    nz = pij > 0
    mi = float((pij[nz] * (np.log(pij[nz]) - np.log(np.outer(pi, pj)[nz]))).sum())
    return mi / np.sqrt(hu * hv)


# -- agglomerative baseline -------------------------------------------------------


def segment_min_distance(p1, q1, p2, q2) -> float:
    """Minimum Euclidean distance between segments [p1, q1] and [p2, q2]."""
    p1, q1 = np.asarray(p1, dtype=np.float64), np.asarray(q1, dtype=np.float64)
    p2, q2 = np.asarray(p2, dtype=np.float64), np.asarray(q2, dtype=np.float64)
    d1 = q1 - p1
    d2 = q2 - p2
    r = p1 - p2
    a = float(d1 @ d1)
    e = float(d2 @ d2)
    f = float(d2 @ r)
    if a == 0.0 and e == 0.0:
        return float(np.linalg.norm(r))
    if a == 0.0:
        s, t = 0.0, np.clip(f / e, 0.0, 1.0)
    else:
        c = float(d1 @ r)
        if e == 0.0:
            t = 0.0
            s = np.clip(-c / a, 0.0, 1.0)
        else:
            b = float(d1 @ d2)
            denom = a * e - b * b
            s = np.clip((b * f - c * e) / denom, 0.0, 1.0) if denom > 0.0 else 0.0
            t = (b * s + f) / e
            # when t leaves its segment, clamp it and recompute s
            if t < 0.0:
                t = 0.0
                s = np.clip(-c / a, 0.0, 1.0)
            elif t > 1.0:
                t = 1.0
                s = np.clip((b - c) / a, 0.0, 1.0)
    closest1 = p1 + s * d1
    closest2 = p2 + t * d2
    return float(np.linalg.norm(closest1 - closest2))


def segment_distance_matrix(endpoints: np.ndarray) -> np.ndarray:
    """Pairwise minimum distances; endpoints is [N, 6] (start xyz, end xyz)."""
    n = endpoints.shape[0]
    out = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(i + 1, n):
            d = segment_min_distance(endpoints[i, :3], endpoints[i, 3:], endpoints[j, :3], endpoints[j, 3:])
            out[i, j] = out[j, i] = d
    return out


def agglomerative_baseline(
    endpoints: np.ndarray,
    max_clusters: int = 15,
    minimize_silhouette: bool = False,
) -> np.ndarray:
    """Single-linkage clustering of 3-D segments by minimum segment distance.

    endpoints: [N, 6].  Cut levels k = 2..min(max_clusters, N-1) are scored by
    silhouette over the same distance; the best k wins (maximize by default,
    minimize optionally).  Returns integer labels; N < 2 or degenerate input
    collapses to a single cluster.
    """
    endpoints = np.asarray(endpoints, dtype=np.float64)
    n = endpoints.shape[0]
    if n < 2:
        return np.zeros(n, dtype=np.int64)
    dist = segment_distance_matrix(endpoints)
    condensed = scipy.spatial.distance.squareform(dist, checks=False)
    link = scipy.cluster.hierarchy.linkage(condensed, method="single")
    best_labels = np.zeros(n, dtype=np.int64)
    best_score = None
    for k in range(2, min(max_clusters, n - 1) + 1):
        labels = scipy.cluster.hierarchy.fcluster(link, t=k, criterion="maxclust")
        if np.unique(labels).size < 2:
            continue
        score = silhouette_score(dist, labels, metric="precomputed")
        if minimize_silhouette:
            score = -score
        if best_score is None or score > best_score:
            best_score = score
            best_labels = labels.astype(np.int64)
    return best_labels


# -- sklearn-style wrapper ---------------------------------------------------------


class PlaceRecognizer(BaseEstimator):
    """Scene recognition by nearest-neighbor voting over cluster embeddings.

    fit takes [FrameClusters]; predict takes an [M, 128] embedding array (one
    frame's clusters) and returns the winning scene id.
    """

    def __init__(self, k_nn: int = DEFAULT_K_NN, min_lines: int = MIN_CLUSTER_LINES):
        self.k_nn = k_nn
        self.min_lines = min_lines

    def fit(self, X, y=None):
        records = [
            (f.frame_id, f.scene_id, emb, int(cnt))
            for f in X
            for emb, cnt in zip(f.embeddings, f.line_counts)
        ]
        self.map_ = build_map(records, self.min_lines)
        return self

    def predict(self, X):
        if not hasattr(self, "map_"):
            raise NotFittedError("PlaceRecognizer must be fitted first")
        return query_frame(self.map_, X, self.k_nn).scene_id

    def query(self, X) -> QueryResult:
        if not hasattr(self, "map_"):
            raise NotFittedError("PlaceRecognizer must be fitted first")
        return query_frame(self.map_, X, self.k_nn)


# -- embedding dump ---------------------------------------------------------------

_EMB_MAGIC = b"LPEMB"
_EMB_VERSION = 1


def write_embeddings(path, records):
    """Binary dump of (frame_id, scene_id, embedding, line_count) records."""
    path = Path(path)
    with open(path, "wb") as f:
        f.write(_EMB_MAGIC)
        f.write(struct.pack("<HI", _EMB_VERSION, len(records)))
        for frame_id, scene_id, emb, line_count in records:
            emb = np.asarray(emb, dtype=np.float32)
            if emb.shape != (EMBED_DIM,):
                raise ValueError("bad embedding shape")
            fid = frame_id.encode("utf-8")
            sid = scene_id.encode("utf-8")
            f.write(struct.pack("<HHi", len(fid), len(sid), int(line_count)))
            f.write(fid)
            f.write(sid)
            f.write(emb.tobytes())


def read_embeddings(path):
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(5)
        if magic != _EMB_MAGIC:
            raise ValueError("not an embedding dump")
        version, count = struct.unpack("<HI", f.read(6))
        if version != _EMB_VERSION:
            raise ValueError(f"unsupported embedding dump version {version}")
        records = []
        for _ in range(count):
            flen, slen, line_count = struct.unpack("<HHi", f.read(8))
            frame_id = f.read(flen).decode("utf-8")
            scene_id = f.read(slen).decode("utf-8")
            emb = np.frombuffer(f.read(4 * EMBED_DIM), dtype=np.float32).copy()
            records.append((frame_id, scene_id, emb, line_count))
    return records
