"""Consumption-profile clustering.

Lloyd's k-means with k-means++ seeding over per-building daily-mean vectors,
plus silhouette scoring for choosing the number of clusters. Distances are
squared Euclidean on raw kWh values; no feature scaling is applied, so
buildings group primarily by consumption magnitude.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import SummaryVector
from .errors import ConfigError, DataError

DEFAULT_RESTARTS = 10
DEFAULT_MAX_ITER = 300


@dataclass(frozen=True)
class ClusterModel:
    """Fitted k-means state: centroids plus the training assignment."""

    k: int
    centroids: np.ndarray
    labels: dict[str, int]
    inertia: float
    n_iter: int

    def __post_init__(self):
        cent = np.asarray(self.centroids, dtype=np.float64)
        if cent.ndim != 2 or cent.shape[0] != self.k:
            raise DataError("centroid matrix must be (k, dim)")
        object.__setattr__(self, "centroids", cent)

    def assign(self, vector: SummaryVector) -> int:
        """Nearest-centroid cluster id for a (possibly unseen) building."""
        v = vector.daily_means
        if v.size != self.centroids.shape[1]:
            raise DataError(
                f"summary '{vector.building_id}' has {v.size} days; "
                f"model expects {self.centroids.shape[1]}"
            )
        d = _sq_dists(v[None, :], self.centroids)[0]
        return int(np.argmin(d))


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Squared Euclidean distance matrix, shape (n_points, k)."""
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: spread initial centroids by squared distance."""
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[rng.integers(n)]
    closest = _sq_dists(points, centroids[:1]).min(axis=1)
    for i in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            # All remaining points coincide with a chosen centroid.
            centroids[i:] = points[rng.integers(n, size=k - i)]
            break
        probs = closest / total
        idx = rng.choice(n, p=probs)
        centroids[i] = points[idx]
        closest = np.minimum(closest, _sq_dists(points, centroids[i : i + 1])[:, 0])
    return centroids


def _lloyd(
    points: np.ndarray, centroids: np.ndarray, max_iter: int
) -> tuple[np.ndarray, np.ndarray, float, int]:
    """Iterate assignment/update until labels stabilize.

    Ties in the assignment step go to the lowest cluster index; empty
    clusters are re-seeded at the point farthest from its current centroid.
    Each full iteration cannot increase the objective.
    """
    k = centroids.shape[0]
    centroids = centroids.copy()
    labels = np.full(points.shape[0], -1, dtype=np.int64)
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(points, centroids)
        new_labels = d.argmin(axis=1)
        for c in range(k):
            mask = new_labels == c
            if mask.any():
                centroids[c] = points[mask].mean(axis=0)
            else:
                worst = int(d[np.arange(points.shape[0]), new_labels].argmax())
                centroids[c] = points[worst]
                new_labels[worst] = c
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
    inertia = float(_sq_dists(points, centroids)[np.arange(points.shape[0]), labels].sum())
    return centroids, labels, inertia, it


def _canonical_points(
    summaries: list[SummaryVector],
) -> tuple[np.ndarray, list[str]]:
    if not summaries:
        raise DataError("no summary vectors to cluster")
    ordered = sorted(summaries, key=lambda s: s.building_id)
    ids = [s.building_id for s in ordered]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate building ids in clustering input")
    dims = {len(s) for s in ordered}
    if len(dims) != 1:
        raise DataError(f"summary vectors have mixed lengths: {sorted(dims)}")
    points = np.stack([s.daily_means for s in ordered])
    return points, ids


def fit_kmeans(
    summaries: list[SummaryVector],
    k: int,
    seed: int = 0,
    restarts: int = DEFAULT_RESTARTS,
    max_iter: int = DEFAULT_MAX_ITER,
    warm_centroids: np.ndarray | None = None,
) -> ClusterModel:
    """Fit k clusters over building summaries, keeping the best of several runs.

    Input order does not matter: buildings are canonicalized by id before any
    randomness, and each restart draws from its own child seed. An optional
    warm start adds one extra run seeded from a previous solution's centroids
    plus the farthest point, used by sweep_k to keep the inertia curve
    monotone in k.
    """
    if restarts < 1:
        raise ConfigError("restarts must be >= 1")
    points, ids = _canonical_points(summaries)
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ConfigError(f"k must be in [1, {n}], got {k}")

    candidates: list[np.ndarray] = []
    seeds = np.random.SeedSequence([seed, k]).spawn(restarts)
    for ss in seeds:
        candidates.append(_kmeans_pp_init(points, k, np.random.default_rng(ss)))
    if warm_centroids is not None:
        warm = np.asarray(warm_centroids, dtype=np.float64)
        if warm.ndim != 2 or warm.shape[1] != points.shape[1] or warm.shape[0] >= k:
            raise ConfigError("warm_centroids must be (k', dim) with k' < k")
        extra = warm
        while extra.shape[0] < k:
            far = int(_sq_dists(points, extra).min(axis=1).argmax())
            extra = np.vstack([extra, points[far]])
        candidates.append(extra)

    best: tuple[np.ndarray, np.ndarray, float, int] | None = None
    for init in candidates:
        result = _lloyd(points, init, max_iter)
        if best is None or result[2] < best[2]:
            best = result
    centroids, labels, inertia, n_iter = best
    return ClusterModel(
        k=k,
        centroids=centroids,
        labels={bid: int(lab) for bid, lab in zip(ids, labels)},
        inertia=inertia,
        n_iter=n_iter,
    )


def lloyd_trace(
    summaries: list[SummaryVector], k: int, seed: int = 0, max_iter: int = DEFAULT_MAX_ITER
) -> list[float]:
    """Objective value after each Lloyd iteration of a single run.

    Diagnostic companion to fit_kmeans; the returned sequence is
    non-increasing.
    """
    points, _ = _canonical_points(summaries)
    if not 1 <= k <= points.shape[0]:
        raise ConfigError(f"k must be in [1, {points.shape[0]}], got {k}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, k, 0]))
    centroids = _kmeans_pp_init(points, k, rng)
    trace: list[float] = []
    labels = np.full(points.shape[0], -1, dtype=np.int64)
    for _ in range(max_iter):
        d = _sq_dists(points, centroids)
        new_labels = d.argmin(axis=1)
        for c in range(k):
            mask = new_labels == c
            if mask.any():
                centroids[c] = points[mask].mean(axis=0)
            else:
                worst = int(d[np.arange(points.shape[0]), new_labels].argmax())
                centroids[c] = points[worst]
                new_labels[worst] = c
        trace.append(
            float(
                _sq_dists(points, centroids)[
                    np.arange(points.shape[0]), new_labels
                ].sum()
            )
        )
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return trace


def silhouette_score(summaries: list[SummaryVector], labels: dict[str, int]) -> float:
    """Mean silhouette over all buildings (Euclidean distance).

    Buildings in singleton clusters score 0; a single cluster overall or
    fewer points than clusters yields 0.
    """
    points, ids = _canonical_points(summaries)
    try:
        y = np.asarray([labels[bid] for bid in ids], dtype=np.int64)
    except KeyError as exc:
        raise DataError(f"missing label for building {exc.args[0]!r}") from None
    uniq = np.unique(y)
    if uniq.size < 2 or points.shape[0] <= uniq.size:
        return 0.0
    dists = np.sqrt(np.maximum(_sq_dists(points, points), 0.0))
    scores = np.zeros(points.shape[0], dtype=np.float64)
    for i in range(points.shape[0]):
        same = y == y[i]
        n_same = int(same.sum())
        if n_same <= 1:
            continue  # singleton: defined as 0
        a = dists[i, same].sum() / (n_same - 1)
        b = np.inf
        for c in uniq:
            if c == y[i]:
                continue
            other = y == c
            b = min(b, float(dists[i, other].mean()))
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0.0 else (b - a) / denom
    return float(scores.mean())


@dataclass(frozen=True)
class KSweepResult:
    """Inertia/silhouette profile across candidate cluster counts."""

    ks: tuple[int, ...]
    inertias: tuple[float, ...]
    silhouettes: tuple[float, ...]
    best_k: int
    models: dict[int, ClusterModel]


def sweep_k(
    summaries: list[SummaryVector],
    k_min: int = 2,
    k_max: int = 10,
    seed: int = 0,
    restarts: int = DEFAULT_RESTARTS,
) -> KSweepResult:
    """Fit every k in [k_min, k_max]; pick the silhouette-best k.

    Each k also warm-starts from the previous k's centroids, which makes the
    reported inertia sequence non-increasing in k. Silhouette ties resolve
    to the smaller k.
    """
    n = len(summaries)
    if k_min < 1 or k_max < k_min:
        raise ConfigError(f"bad k range [{k_min}, {k_max}]")
    k_max = min(k_max, n)
    if k_max < k_min:
        raise ConfigError(f"k_min {k_min} exceeds population size {n}")
    ks, inertias, silhouettes = [], [], []
    models: dict[int, ClusterModel] = {}
    prev_centroids: np.ndarray | None = None
    for k in range(k_min, k_max + 1):
        warm = prev_centroids if prev_centroids is not None and prev_centroids.shape[0] < k else None
        model = fit_kmeans(summaries, k, seed=seed, restarts=restarts, warm_centroids=warm)
        ks.append(k)
        inertias.append(model.inertia)
        silhouettes.append(silhouette_score(summaries, model.labels))
        models[k] = model
        prev_centroids = model.centroids
    best_idx = int(np.argmax(silhouettes))
    return KSweepResult(
        ks=tuple(ks),
        inertias=tuple(inertias),
        silhouettes=tuple(silhouettes),
        best_k=ks[best_idx],
        models=models,
    )
