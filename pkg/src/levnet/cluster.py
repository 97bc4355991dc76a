"""Weight clustering for shared plaintext encodings.

Convolution weights are replaced by a small set of centroid values so that
encrypted inference only has to encode one plaintext per centroid instead of
one per weight.  Three granularities are supported:

* ``full_cluster``: one global codebook over every conv weight in the model.
* ``slice_cluster``: an independent codebook per kernel column of each conv
  layer, which matches how weights are grouped into plaintexts by the
  simulator's rotation layout.
* ``ensemble_slice_cluster``: like ``slice_cluster``, but the same coordinate
  across M topology-identical models forms a point in R^M, so all models in a
  packed ensemble share one codebook per slice.

Only convolution weights are clustered; biases and linear layers are left
untouched.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .graph import ConvNode, GraphError, ModelGraph

__all__ = [
    "ClusterError",
    "SliceKey",
    "Codebook",
    "ClusterReport",
    "kmeans",
    "full_cluster",
    "slice_cluster",
    "ensemble_slice_cluster",
]

_MAX_ITERS = 300
_N_RESTARTS = 10
_EXACT_MAX_DISTINCT = 9
_ASSIGN_CHUNK = 1 << 16


class ClusterError(ValueError):
    """Raised for invalid clustering inputs (bad k, no conv layers, ...)."""


@dataclass(frozen=True)
class SliceKey:
    """Identifies one kernel column of one conv layer.

    ``s`` is 1-based: a 3x3 kernel has slices 1, 2, 3.
    """

    layer: str
    s: int

    def __str__(self) -> str:
        return f"{self.layer}:{self.s}"


@dataclass
class Codebook:
    """Result of one k-means run.

    ``centroids`` has shape (J, M) and ``assignments`` shape (N,), where every
    assignment indexes a valid centroid row.  ``scope`` is ``None`` for a
    global codebook or a :class:`SliceKey` for a per-slice one.  ``history``
    records the distortion after each Lloyd iteration of the winning restart;
    it is nonincreasing.
    """

    centroids: np.ndarray
    assignments: np.ndarray
    scope: Optional[SliceKey] = None
    distortion: float = 0.0
    history: Tuple[float, ...] = ()

    def quantized(self) -> np.ndarray:
        """Each point replaced by its centroid, shape (N, M)."""
        return self.centroids[self.assignments]


@dataclass
class ClusterReport:
    """Summary of a clustering pass over a model.

    ``encodings`` counts the unique plaintexts needed: the sum over slices of
    the number of distinct centroids actually used in that slice.
    ``slice_sizes`` holds that per-slice count keyed by ``str(SliceKey)``.
    """

    distortion: float
    encodings: int
    slice_sizes: Dict[str, int] = field(default_factory=dict)


def _as_points(points: Sequence) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ClusterError(f"expected a nonempty (N, M) point array, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ClusterError("points must be finite")
    return pts


def _pp_init(pts: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: spread initial centroids proportionally to squared
    distance from the ones already chosen."""
    n = pts.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = np.sum((pts - pts[chosen[0]]) ** 2, axis=1)
    while len(chosen) < k:
        total = float(d2.sum())
        if total <= 0.0:
            # Remaining mass is zero (duplicates); fall back to uniform.
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        chosen.append(idx)
        d2 = np.minimum(d2, np.sum((pts - pts[idx]) ** 2, axis=1))
    return pts[chosen].copy()


def _assign_points(pts: np.ndarray, centroids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Nearest centroid per point, chunked so big slices stay in memory."""
    n = pts.shape[0]
    assign = np.empty(n, dtype=np.int64)
    min_d2 = np.empty(n, dtype=np.float64)
    for lo in range(0, n, _ASSIGN_CHUNK):
        hi = min(lo + _ASSIGN_CHUNK, n)
        d2 = np.sum((pts[lo:hi, None, :] - centroids[None, :, :]) ** 2, axis=2)
        assign[lo:hi] = d2.argmin(axis=1)
        min_d2[lo:hi] = d2[np.arange(hi - lo), assign[lo:hi]]
    return assign, min_d2


def _lloyd(pts: np.ndarray, centroids: np.ndarray) -> Tuple[np.ndarray, np.ndarray, float, Tuple[float, ...]]:
    k = centroids.shape[0]
    assign = None
    history: List[float] = []
    for _ in range(_MAX_ITERS):
        new_assign, min_d2 = _assign_points(pts, centroids)
        history.append(float(min_d2.sum()))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        centroids = centroids.copy()
        for j in range(k):
            members = pts[assign == j]
            if members.shape[0]:
                centroids[j] = members.mean(axis=0)
        # Reseed any centroid that lost all members to the point currently
        # farthest from its own centroid, so k clusters survive.
        empties = [j for j in range(k) if not np.any(assign == j)]
        if empties:
            dists = np.sum((pts - centroids[assign]) ** 2, axis=1)
            for j in empties:
                idx = int(dists.argmax())
                centroids[j] = pts[idx]
                dists[idx] = 0.0
    assign, min_d2 = _assign_points(pts, centroids)
    distortion = float(min_d2.sum())
    return centroids, assign, distortion, tuple(history)


def _exact_partitions(n: int, k: int):
    """Yield every partition of range(n) into exactly k blocks, as restricted
    growth strings (block label per element)."""
    labels = [0] * n

    def rec(i: int, used: int):
        if n - i < k - used:
            return
        if i == n:
            if used == k:
                yield tuple(labels)
            return
        for b in range(min(used + 1, k)):
            labels[i] = b
            yield from rec(i + 1, max(used, b + 1))

    yield from rec(1, 1)


def _exact_kmeans(pts: np.ndarray, k: int) -> np.ndarray:
    """Optimal centroids for small inputs by enumerating partitions of the
    distinct points (duplicates weighted; co-clustering them loses nothing)."""
    uniq, inverse, counts = np.unique(pts, axis=0, return_inverse=True, return_counts=True)
    nd = uniq.shape[0]
    w = counts.astype(np.float64)[:, None]
    best_d = None
    best_labels = None
    for labels in _exact_partitions(nd, k):
        lab = np.asarray(labels)
        d = 0.0
        for j in range(k):
            sel = lab == j
            block = uniq[sel]
            bw = w[sel]
            c = (block * bw).sum(axis=0) / bw.sum()
            d += float((bw[:, 0] * np.sum((block - c) ** 2, axis=1)).sum())
            if best_d is not None and d >= best_d:
                break
        if best_d is None or d < best_d:
            best_d = d
            best_labels = lab
    centroids = np.empty((k, pts.shape[1]))
    for j in range(k):
        sel = best_labels == j
        centroids[j] = (uniq[sel] * w[sel]).sum(axis=0) / w[sel].sum()
    return centroids


def kmeans(points: Sequence, k: int, seed: int) -> Codebook:
    """Cluster ``points`` (array-like of shape (N,) or (N, M)) into ``k``
    centroids under squared euclidean distortion.

    Deterministic given ``seed``.  Runs k-means++ seeding plus Lloyd's
    iterations to an assignment fixpoint (capped at 300 sweeps), restarted a
    fixed number of times with the best run kept.  Inputs with few distinct
    points are instead solved exactly by enumerating partitions.  If ``k``
    exceeds the number of distinct points the codebook shrinks to that count.
    """
    if k < 1:
        raise ClusterError(f"k must be >= 1, got {k}")
    pts = _as_points(points)
    n_distinct = np.unique(pts, axis=0).shape[0]
    k = min(k, n_distinct)

    if n_distinct <= _EXACT_MAX_DISTINCT:
        best = _lloyd(pts, _exact_kmeans(pts, k))
    else:
        rng = np.random.default_rng(seed)
        best: Optional[Tuple[np.ndarray, np.ndarray, float, Tuple[float, ...]]] = None
        for _ in range(_N_RESTARTS):
            init = _pp_init(pts, k, rng)
            run = _lloyd(pts, init)
            if best is None or run[2] < best[2]:
                best = run
    centroids, assign, distortion, history = best
    return Codebook(
        centroids=centroids,
        assignments=assign.astype(np.int64),
        distortion=distortion,
        history=history,
    )


def _conv_ids(g: ModelGraph) -> List[str]:
    ids = [nid for nid in g.topo_order() if isinstance(g.nodes[nid], ConvNode)]
    if not ids:
        raise ClusterError("model has no conv layers to cluster")
    return ids


def _slice_seed(seed: int, layer: str, s: int) -> int:
    """Stable per-slice seed so slice runs are order-independent."""
    h = hashlib.blake2b(f"{seed}|{layer}|{s}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "big")


def _used_count(assignments: np.ndarray) -> int:
    return int(np.unique(assignments).size)


def full_cluster(g: ModelGraph, k: int, seed: int) -> Tuple[ModelGraph, Codebook, ClusterReport]:
    """One global codebook across every conv weight in the model.

    Returns the quantized graph, the codebook (scope global), and a report.
    The report still counts encodings per slice, since plaintexts are laid out
    per kernel column: the total is the sum over slices of distinct centroids
    appearing in that slice, which is at most ``sum(min(k, slice size))``.
    """
    ids = _conv_ids(g)
    flats = [g.nodes[nid].weight.ravel() for nid in ids]
    cb = kmeans(np.concatenate(flats), k, seed)
    cb.scope = None

    out = g.copy()
    q = cb.quantized()[:, 0]
    report = ClusterReport(distortion=cb.distortion, encodings=0)
    pos = 0
    for nid in ids:
        node = out.nodes[nid]
        shape = node.weight.shape
        count = node.weight.size
        idx = cb.assignments[pos : pos + count].reshape(shape)
        node.weight = q[pos : pos + count].reshape(shape)
        pos += count
        for s in range(shape[3]):
            key = SliceKey(nid, s + 1)
            used = _used_count(idx[:, :, :, s])
            report.slice_sizes[str(key)] = used
            report.encodings += used
    return out, cb, report


def ensemble_slice_cluster(
    models: Sequence[ModelGraph], k: int, seed: int
) -> Tuple[List[ModelGraph], Dict[SliceKey, Codebook], ClusterReport]:
    """Shared per-slice codebooks across M topology-identical models.

    The same weight coordinate across all M models forms one point in R^M;
    each kernel column is clustered independently with a seed derived from
    (seed, layer, column), so results do not depend on traversal order.  With
    M=1 this is exactly per-model slice clustering.
    """
    if not models:
        raise ClusterError("need at least one model")
    ref = models[0]
    ids = _conv_ids(ref)
    for m in models[1:]:
        if _conv_ids(m) != ids:
            raise ClusterError("ensemble models must have identical conv topology")
        for nid in ids:
            if m.nodes[nid].weight.shape != ref.nodes[nid].weight.shape:
                raise ClusterError(f"conv {nid!r} weight shapes differ across the ensemble")

    outs = [m.copy() for m in models]
    books: Dict[SliceKey, Codebook] = {}
    report = ClusterReport(distortion=0.0, encodings=0)
    for nid in ids:
        shape = ref.nodes[nid].weight.shape
        for s in range(shape[3]):
            pts = np.stack([m.nodes[nid].weight[:, :, :, s].ravel() for m in models], axis=1)
            cb = kmeans(pts, k, _slice_seed(seed, nid, s))
            key = SliceKey(nid, s + 1)
            cb.scope = key
            books[key] = cb
            q = cb.quantized()
            for col, om in enumerate(outs):
                om.nodes[nid].weight[:, :, :, s] = q[:, col].reshape(shape[:3])
            used = _used_count(cb.assignments)
            report.slice_sizes[str(key)] = used
            report.encodings += used
            report.distortion += cb.distortion
    return outs, books, report


def slice_cluster(g: ModelGraph, k: int, seed: int) -> Tuple[ModelGraph, Dict[SliceKey, Codebook], ClusterReport]:
    """Independent codebook per kernel column of each conv layer.

    Defined as the M=1 case of :func:`ensemble_slice_cluster`, so the two are
    bit-identical on a single model by construction.
    """
    outs, books, report = ensemble_slice_cluster([g], k, seed)
    return outs[0], books, report
