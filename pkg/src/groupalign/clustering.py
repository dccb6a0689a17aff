"""Bottom-up grouping of proposals and pooling into representative embeddings.

Proposals are merged by hierarchical agglomerative clustering under a
pluggable distance (cosine over features, or spatial IoU over boxes) with
complete linkage, so every cluster's diameter stays below the radius
threshold. Merging can also stop at a fixed cluster count. Each cluster is
pooled into the arithmetic mean of its member features.

Determinism: when two candidate merges tie exactly on linkage distance, the
pair whose smallest member index is smallest wins (then the other cluster's
smallest member index).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .core import Box, Proposal

COSINE = "cosine"
SPATIAL_IOU = "iou"
_METRICS = (COSINE, SPATIAL_IOU)

MODE_PROPOSALS = "proposals"
MODE_SG = "sg"
MODE_MG = "mg"
MODE_MG_CA = "mg_ca"
_MODES = (MODE_PROPOSALS, MODE_SG, MODE_MG, MODE_MG_CA)

# Vectors shorter than this are treated as directionless: cosine distance 1.0
# to everything, so a zero vector cannot poison the merge schedule with NaNs.
ZERO_NORM_EPS = 1e-12


@dataclass(frozen=True)
class RadiusThreshold:
    """Stop merging once the next complete-linkage distance would exceed tau.

    Boundary equality merges: a candidate at exactly tau is accepted.
    """

    tau: float

    def __post_init__(self):
        if not (0.0 < self.tau <= 2.0):
            raise ValueError(f"tau must lie in (0, 2], got {self.tau}")


@dataclass(frozen=True)
class FixedCount:
    """Merge until exactly k clusters remain (or n, if fewer items)."""

    k: int

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"cluster count must be >= 1, got {self.k}")


StopRule = Union[RadiusThreshold, FixedCount]


@dataclass(frozen=True)
class ClusterAssignment:
    """A partition of proposal indices plus the merge history.

    ``merge_trace`` entries are (id_a, id_b, linkage_distance) with the
    scipy-style id convention: items 0..n-1 are their own initial clusters
    and the t-th merge creates cluster id n + t.
    """

    clusters: Tuple[Tuple[int, ...], ...]
    merge_trace: Tuple[Tuple[int, int, float], ...]
    n_items: int

    def __post_init__(self):
        seen = sorted(i for c in self.clusters for i in c)
        if seen != list(range(self.n_items)):
            raise ValueError("clusters do not partition the input indices")

    def __len__(self) -> int:
        return len(self.clusters)


@dataclass(frozen=True)
class GroupEmbedding:
    """Mean-pooled representative of one cluster, the unit fed to alignment."""

    vector: np.ndarray
    member_count: int
    class_tag: Optional[int] = None
    members: Tuple[int, ...] = ()

    def __post_init__(self):
        vec = np.array(self.vector, dtype=np.float64)
        vec.flags.writeable = False
        object.__setattr__(self, "vector", vec)
        object.__setattr__(self, "members", tuple(self.members))
        if self.member_count < 1:
            raise ValueError("member_count must be positive")
        if self.members and len(self.members) != self.member_count:
            raise ValueError("members length disagrees with member_count")


def cosine_distance(z_i: np.ndarray, z_j: np.ndarray) -> float:
    """1 - cos(z_i, z_j), in [0, 2]. Near-zero-norm inputs give 1.0."""
    a = np.asarray(z_i, dtype=np.float64)
    b = np.asarray(z_j, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na < ZERO_NORM_EPS or nb < ZERO_NORM_EPS:
        return 1.0
    return float(1.0 - float(a @ b) / (na * nb))


def iou_distance(box_i: Box, box_j: Box) -> float:
    """1 - IoU of two axis-aligned rectangles; disjoint or zero-area -> 1.0."""
    ax1, ay1, ax2, ay2 = box_i
    bx1, by1, bx2, by2 = box_j
    area_a = max(0.0, ax2 - ax1) * max(0.0, ay2 - ay1)
    area_b = max(0.0, bx2 - bx1) * max(0.0, by2 - by1)
    if area_a <= 0.0 or area_b <= 0.0:
        return 1.0
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 1.0
    inter = iw * ih
    return float(1.0 - inter / (area_a + area_b - inter))


def pairwise_distances(proposals: Sequence[Proposal], metric: str) -> np.ndarray:
    """Full symmetric distance matrix for the chosen metric."""
    if metric not in _METRICS:
        raise ValueError(f"unknown metric {metric!r}, expected one of {_METRICS}")
    n = len(proposals)
    if metric == COSINE:
        feats = np.stack([p.feature for p in proposals]) if n else np.zeros((0, 0))
        norms = np.linalg.norm(feats, axis=1)
        safe = np.where(norms < ZERO_NORM_EPS, 1.0, norms)
        sims = (feats @ feats.T) / np.outer(safe, safe)
        dist = 1.0 - sims
        bad = norms < ZERO_NORM_EPS
        dist[bad, :] = 1.0
        dist[:, bad] = 1.0
        np.fill_diagonal(dist, 0.0)
        return dist
    for p in proposals:
        if p.box is None:
            raise ValueError("spatial IoU metric requires a box on every proposal")
    dist = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d = iou_distance(proposals[i].box, proposals[j].box)
            dist[i, j] = d
            dist[j, i] = d
    return dist


def complete_linkage(a: Sequence[int], b: Sequence[int], pairwise: np.ndarray) -> float:
    """Farthest pair distance between two disjoint index sets."""
    a = list(a)
    b = list(b)
    if not a or not b:
        raise ValueError("complete linkage of an empty set is undefined")
    if set(a) & set(b):
        raise ValueError("index sets must be disjoint")
    return float(pairwise[np.ix_(a, b)].max())


def agglomerate(
    proposals: Sequence[Proposal], metric: str, stop: StopRule
) -> ClusterAssignment:
    """Greedy bottom-up merging under complete linkage.

    Every proposal starts as its own cluster; at each step the active pair
    with the smallest complete-linkage distance merges (ties broken by
    smallest member index, then the partner's smallest member index). Under
    RadiusThreshold the first candidate above tau stops the process, which
    guarantees max intra-cluster pairwise distance <= tau for every output
    cluster. Under FixedCount merging continues until min(k, n) clusters
    remain.
    """
    n = len(proposals)
    if n == 0:
        raise ValueError("cannot cluster an empty proposal list")
    if isinstance(stop, FixedCount):
        n_final = min(stop.k, n)
    elif isinstance(stop, RadiusThreshold):
        n_final = 1
    else:
        raise TypeError(f"unknown stop rule {stop!r}")

    base = pairwise_distances(proposals, metric)

    # Complete linkage admits the exact Lance-Williams update
    # d(A+B, C) = max(d(A, C), d(B, C)), kept in `link` for active rows.
    link = base.copy()
    np.fill_diagonal(link, np.inf)
    active = list(range(n))
    members: List[List[int]] = [[i] for i in range(n)]
    min_member = list(range(n))
    cluster_id = list(range(n))
    trace: List[Tuple[int, int, float]] = []
    next_id = n

    while len(active) > n_final:
        sub = link[np.ix_(active, active)]
        best = sub.min()
        if isinstance(stop, RadiusThreshold) and best > stop.tau:
            break
        # All exactly-tied candidates compete on (smaller min member, larger).
        ti, tj = np.nonzero(sub == best)
        best_key = None
        best_pair = None
        for i, j in zip(ti.tolist(), tj.tolist()):
            if i >= j:
                continue
            a, b = active[i], active[j]
            key = tuple(sorted((min_member[a], min_member[b])))
            if best_key is None or key < best_key:
                best_key = key
                best_pair = (i, j)
        i, j = best_pair
        a, b = active[i], active[j]
        trace.append((min(cluster_id[a], cluster_id[b]), max(cluster_id[a], cluster_id[b]), float(best)))

        merged_row = np.maximum(link[a], link[b])
        link[a] = merged_row
        link[:, a] = merged_row
        link[a, a] = np.inf
        members[a] = members[a] + members[b]
        min_member[a] = min(min_member[a], min_member[b])
        cluster_id[a] = next_id
        next_id += 1
        active.pop(j)

    clusters = sorted((tuple(sorted(members[a])) for a in active), key=lambda c: c[0])
    return ClusterAssignment(tuple(clusters), tuple(trace), n)


def group_embeddings(
    proposals: Sequence[Proposal], assignment: ClusterAssignment
) -> List[GroupEmbedding]:
    """Mean-pool each cluster; output ordered by smallest member index."""
    if assignment.n_items != len(proposals):
        raise ValueError(
            f"assignment covers {assignment.n_items} items, got {len(proposals)} proposals"
        )
    feats = np.stack([p.feature for p in proposals])
    out = []
    for cluster in sorted(assignment.clusters, key=lambda c: c[0]):
        idx = list(cluster)
        out.append(
            GroupEmbedding(
                vector=feats[idx].mean(axis=0),
                member_count=len(idx),
                members=tuple(idx),
            )
        )
    return out


def cluster_by_mode(
    proposals: Sequence[Proposal], mode: str, metric: str, stop: StopRule
) -> List[GroupEmbedding]:
    """Build group embeddings at the requested aggregation level.

    sg     one mean embedding per present pseudo-label class.
    mg     agglomerate within each pseudo-label partition separately.
    mg_ca  agglomerate over all proposals, ignoring labels.
    proposals  no grouping at all: every proposal is its own group.

    sg/mg require a pseudo_label on every proposal and tag their outputs
    with the class; class-agnostic outputs carry no tag.
    """
    if mode not in _MODES:
        raise ValueError(f"unknown mode {mode!r}, expected one of {_MODES}")
    if not proposals:
        raise ValueError("cannot group an empty proposal list")

    if mode == MODE_PROPOSALS:
        return [
            GroupEmbedding(vector=p.feature, member_count=1, members=(i,))
            for i, p in enumerate(proposals)
        ]

    if mode == MODE_MG_CA:
        return group_embeddings(proposals, agglomerate(proposals, metric, stop))

    labels = [p.pseudo_label for p in proposals]
    if any(lbl is None for lbl in labels):
        raise ValueError(f"mode {mode!r} requires a pseudo_label on every proposal")

    feats = np.stack([p.feature for p in proposals])
    out: List[GroupEmbedding] = []
    for cls in sorted(set(labels)):
        idx = [i for i, lbl in enumerate(labels) if lbl == cls]
        if mode == MODE_SG:
            out.append(
                GroupEmbedding(
                    vector=feats[idx].mean(axis=0),
                    member_count=len(idx),
                    class_tag=cls,
                    members=tuple(idx),
                )
            )
            continue
        sub = [proposals[i] for i in idx]
        assignment = agglomerate(sub, metric, stop)
        for emb in group_embeddings(sub, assignment):
            out.append(
                GroupEmbedding(
                    vector=emb.vector,
                    member_count=emb.member_count,
                    class_tag=cls,
                    members=tuple(idx[i] for i in emb.members),
                )
            )
    return out
