"""Two-stage clustering that picks the target and source sets.

Stage one clusters deep features and drops excluded clusters. Stage two
clusters mean RGB and keeps the member nearest each centroid, first for the
targets, then for the sources among the patches that are not targets.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from stainlab.errors import ArgumentError, CapacityError
from stainlab.features import ConvEmbedder, embed_patches
from stainlab.imagedata import ImagePatch


@dataclass(frozen=True, eq=False)
class FeatureVector:
    values: np.ndarray
    patch_id: str


@dataclass(frozen=True, eq=False)
class ClusterAssignment:
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    history: tuple[float, ...] = ()
    n_iter: int = 0

    def members(self, cluster: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cluster)


@dataclass
class CurationPlan:
    source_ids: list[str]
    target_ids: list[str]
    excluded_cluster_ids: list[int] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        overlap = set(self.source_ids) & set(self.target_ids)
        if overlap:
            raise ArgumentError(f"source and target sets overlap: {sorted(overlap)[:5]}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CurationPlan":
        return cls(list(d["source_ids"]), list(d["target_ids"]), list(d.get("excluded_cluster_ids", [])),
                   int(d.get("seed", 0)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def extract_features(patches: Sequence[ImagePatch], extractor=None) -> list[FeatureVector]:
    if not patches:
        raise ArgumentError("no patches to embed")
    emb = embed_patches(patches, extractor if extractor is not None else ConvEmbedder())
    return [FeatureVector(v, p.id) for v, p in zip(emb, patches)]


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    # direct differences: exact zero for coincident points, unlike the expanded norm
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    idx = [int(rng.integers(n))]
    d2 = _sq_dists(x, x[idx])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # remaining points coincide with chosen centers
            rest = np.setdiff1d(np.arange(n), idx)
            nxt = int(rest[0]) if rest.size else int(rng.integers(n))
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        idx.append(nxt)
        d2 = np.minimum(d2, _sq_dists(x, x[[nxt]])[:, 0])
    return x[idx].copy()


def kmeans(vectors, k: int, seed: int = 0, max_iters: int = 300, tol: float = 1e-6) -> ClusterAssignment:
    """Lloyd's algorithm with k-means++ seeding.

    ``history`` holds the inertia after each assignment step; it never
    increases. Stops when the relative decrease falls below ``tol``.
    """
    x = np.asarray([v.values if isinstance(v, FeatureVector) else v for v in vectors], dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = len(x)
    if k < 1 or k > n:
        raise ArgumentError(f"k={k} must be in [1, {n}]")
    if not np.all(np.isfinite(x)):
        raise ArgumentError("non-finite feature values")
    # canonical row order, so the result depends on the multiset of vectors, not their order
    order = np.lexsort(x.T[::-1])
    assignment = _lloyd(x[order], k, seed, max_iters, tol)
    labels = np.empty_like(assignment.labels)
    labels[order] = assignment.labels
    return ClusterAssignment(assignment.centroids, labels, assignment.inertia, assignment.history, assignment.n_iter)


def _lloyd(x: np.ndarray, k: int, seed: int, max_iters: int, tol: float) -> ClusterAssignment:
    n = len(x)
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(x, k, rng)
    history: list[float] = []
    labels = np.zeros(n, dtype=np.int64)
    it = 0
    for it in range(1, max_iters + 1):
        d = _sq_dists(x, centroids)
        labels = d.argmin(axis=1)
        inertia = float(d[np.arange(n), labels].sum())
        history.append(inertia)
        if len(history) > 1 and history[-2] - inertia <= tol * max(history[-2], 1e-300):
            break
        new = centroids.copy()
        for c in range(k):
            members = labels == c
            if members.any():
                new[c] = x[members].mean(axis=0)
            else:
                # move an empty centroid onto the worst-served point
                far = int(d[np.arange(n), labels].argmax())
                new[c] = x[far]
                labels[far] = c
        centroids = new
    d = _sq_dists(x, centroids)
    labels = d.argmin(axis=1)
    inertia = float(d[np.arange(n), labels].sum())
    if inertia <= history[-1]:
        history.append(inertia)
    else:
        inertia = history[-1]
    return ClusterAssignment(centroids, labels, inertia, tuple(history), it)


def vet_clusters(assignment: ClusterAssignment, ids: Sequence[str], exclude_list: Sequence[int]) -> list[str]:
    """Ids of patches outside every excluded cluster, in input order."""
    excluded = set(int(c) for c in exclude_list)
    return [pid for pid, lab in zip(ids, assignment.labels) if int(lab) not in excluded]


def mean_rgb(patch) -> np.ndarray:
    px = patch.pixels if isinstance(patch, ImagePatch) else np.asarray(patch, dtype=np.float64)
    return px.reshape(-1, 3).mean(axis=0)


def select_representatives(ids: Sequence[str], vectors, k: int, seed: int = 0) -> list[str]:
    """k-means on ``vectors``; per cluster the member closest to its centroid.

    Ties go to the lexicographically smallest id. Output is ordered by
    cluster index; empty clusters contribute nothing.
    """
    ids = list(ids)
    if k > len(ids):
        raise ArgumentError(f"k={k} exceeds {len(ids)} candidates")
    x = np.asarray(vectors, dtype=np.float64)
    asg = kmeans(x, k, seed)
    chosen = []
    for c in range(k):
        members = asg.members(c)
        if members.size == 0:
            continue
        d = np.sqrt(((x[members] - asg.centroids[c]) ** 2).sum(axis=1))
        best = min(zip(d, (ids[m] for m in members)))
        chosen.append(best[1])
    return chosen


def build_plan(corpus: Sequence[ImagePatch], n_targets: int, n_sources: int, exclude_list: Sequence[int] = (),
               seed: int = 0, n_feature_clusters: int = 8, extractor=None) -> CurationPlan:
    corpus = sorted(corpus, key=lambda p: p.id)
    if not corpus:
        raise CapacityError("empty corpus")
    ids = [p.id for p in corpus]
    if len(set(ids)) != len(ids):
        raise ArgumentError("duplicate patch ids in corpus")
    feats = extract_features(corpus, extractor)
    stage1 = kmeans([f.values for f in feats], min(n_feature_clusters, len(corpus)), seed)
    kept = set(vet_clusters(stage1, ids, exclude_list))
    pool = [p for p in corpus if p.id in kept]
    if len(pool) < n_targets + n_sources:
        raise CapacityError(f"{len(pool)} patches survive vetting; need {n_targets + n_sources}")
    rgb = {p.id: mean_rgb(p) for p in pool}
    pool_ids = [p.id for p in pool]
    targets = select_representatives(pool_ids, [rgb[i] for i in pool_ids], n_targets, seed)
    tset = set(targets)
    rest = [i for i in pool_ids if i not in tset]
    sources = select_representatives(rest, [rgb[i] for i in rest], n_sources, seed + 1)
    if len(targets) < n_targets or len(sources) < n_sources:
        raise CapacityError("clustering produced empty clusters; corpus too degenerate")
    return CurationPlan(sources, targets, sorted(int(c) for c in exclude_list), seed)


def enumerate_triads(plan: CurationPlan) -> list[tuple[str, str]]:
    """Cartesian product, sources outer and targets inner."""
    return [(s, t) for s in plan.source_ids for t in plan.target_ids]


def triad_count(n_sources: int, n_targets: int) -> int:
    return n_sources * n_targets
