"""K-Means (Lloyd) with k-means++ seeding, elbow selection and distance filters."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, DimensionError
from .rng import derive_seed
from .vectorstore import write_csv


@dataclass(frozen=True, eq=False)
class ClusterModel:
    """A fitted partition.  ``distances`` are plain L2 distances to the own center."""

    centers: np.ndarray
    assignments: np.ndarray
    distances: np.ndarray
    inertia: float
    n_iter: int = 0
    converged: bool = True
    inertia_history: tuple = field(default=(), repr=False)

    @property
    def k(self) -> int:
        return int(self.centers.shape[0])

    @property
    def dim(self) -> int:
        return int(self.centers.shape[1])


@dataclass(frozen=True)
class ElbowReport:
    candidates: tuple
    totals: tuple
    diffs: tuple  # diffs[0] is None; diffs[i] = totals[i-1] - totals[i]
    selected: int
    target: int
    models: tuple = field(default=(), repr=False, compare=False)

    def rows(self):
        return [(k, t, d) for k, t, d in zip(self.candidates, self.totals, self.diffs)]

    def model_for(self, k: int) -> ClusterModel:
        return self.models[self.candidates.index(k)]


def _as_points(points) -> np.ndarray:
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"points must be a 2-D array, got shape {x.shape}")
    return x


def squared_distances(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - centers[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _assign(x, centers):
    d2 = squared_distances(x, centers)
    labels = np.argmin(d2, axis=1)  # first minimum wins ties
    return labels, d2[np.arange(len(x)), labels]


def kmeans_plus_plus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = squared_distances(x, centers[:1])[:, 0]
    for c in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers[c] = x[idx]
        closest = np.minimum(closest, squared_distances(x, centers[c : c + 1])[:, 0])
    return centers


def _repair_empty(x, centers, labels, d2):
    """Move each empty center onto the point farthest from its own center."""
    k = len(centers)
    counts = np.bincount(labels, minlength=k)
    for c in np.flatnonzero(counts == 0):
        far = int(np.argmax(d2))
        if d2[far] == 0.0:
            break  # every point sits on a center; nothing to split
        counts[labels[far]] -= 1
        centers[c] = x[far]
        labels[far] = c
        d2[far] = 0.0
        counts[c] += 1
    return centers, labels, d2


def _lloyd(x, k, rng, max_iter, tol):
    centers = kmeans_plus_plus(x, k, rng)
    labels, d2 = _assign(x, centers)
    history = [float(d2.sum())]
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        centers, labels, d2 = _repair_empty(x, centers, labels, d2)
        new_centers = centers.copy()
        for c in range(k):
            members = labels == c
            if members.any():
                new_centers[c] = x[members].mean(axis=0)
        new_labels, new_d2 = _assign(x, new_centers)
        inertia = float(new_d2.sum())
        prev = history[-1]
        history.append(inertia)
        centers = new_centers
        stable = np.array_equal(new_labels, labels)
        labels, d2 = new_labels, new_d2
        if stable or prev == 0.0 or abs(prev - inertia) <= tol * prev:
            converged = True
            break
    return ClusterModel(
        centers=centers,
        assignments=labels,
        distances=np.sqrt(d2),
        inertia=float(d2.sum()),
        n_iter=n_iter,
        converged=converged,
        inertia_history=tuple(history),
    )


def kmeans_fit(points, k: int, seed: int = 0, max_iter: int = 300, tol: float = 1e-6, restarts: int = 5,
               jobs: int = 1) -> ClusterModel:
    """Best-of-``restarts`` Lloyd K-Means; deterministic for a given seed.

    The returned assignments are always the nearest-center labels of the
    returned centers (lowest index on ties), so the model is a fixed point
    of the assignment step.
    """
    x = _as_points(points)
    if k <= 0:
        raise ConfigError(f"k must be positive, got {k}")
    if k > len(x):
        raise ConfigError(f"k={k} exceeds the number of samples ({len(x)})")
    if restarts < 1 or max_iter < 1:
        raise ConfigError("restarts and max_iter must be at least 1")

    def run(r):
        return _lloyd(x, k, np.random.default_rng(derive_seed(seed, f"kmeans/{k}/{r}")), max_iter, tol)

    if jobs > 1 and restarts > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            models = list(pool.map(run, range(restarts)))
    else:
        models = [run(r) for r in range(restarts)]
    # lowest inertia, then lowest restart index
    return min(enumerate(models), key=lambda im: (im[1].inertia, im[0]))[1]


def kmeans_assign(model: ClusterModel, point) -> tuple[int, float]:
    p = np.asarray(point, dtype=np.float64)
    if p.ndim != 1 or p.shape[0] != model.dim:
        raise DimensionError(f"point of shape {p.shape} does not match centers of dimension {model.dim}")
    labels, d2 = _assign(p[None, :], model.centers)
    return int(labels[0]), float(math.sqrt(d2[0]))


def kmeans_assign_batch(model: ClusterModel, points) -> tuple[np.ndarray, np.ndarray]:
    x = _as_points(points)
    if x.shape[1] != model.dim:
        raise DimensionError("points do not match center dimension")
    labels, d2 = _assign(x, model.centers)
    return labels, np.sqrt(d2)


def elbow_select(points, k_candidates: Sequence[int], target: int, seed: int = 0, restarts: int = 5,
                 jobs: int = 1) -> ElbowReport:
    """Fit every candidate k and pick one by the large-drop-near-target rule.

    ``totals[i]`` is the summed (unsquared) distance of every point to its
    center for ``k_candidates[i]``.  Among candidates whose drop from the
    previous candidate is in the top quartile of drops, the one closest to
    ``target`` wins (smaller k on ties).
    """
    x = _as_points(points)
    ks = [int(k) for k in k_candidates]
    if not ks:
        raise ConfigError("elbow selection needs at least one candidate")
    if ks != sorted(ks) or len(set(ks)) != len(ks):
        raise ConfigError("k candidates must be strictly ascending")
    if ks[0] < 1 or ks[-1] > len(x):
        raise ConfigError(f"k candidates must lie in [1, {len(x)}]")
    if target < 1:
        raise ConfigError("elbow target must be at least 1")

    def fit(k):
        return kmeans_fit(x, k, seed=seed, restarts=restarts)

    if jobs > 1 and len(ks) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            models = list(pool.map(fit, ks))
    else:
        models = [fit(k) for k in ks]
    totals = [float(m.distances.sum()) for m in models]
    diffs = [None] + [totals[i - 1] - totals[i] for i in range(1, len(ks))]

    if len(ks) == 1:
        selected = ks[0]
    else:
        drops = np.array(diffs[1:])
        cutoff = np.percentile(drops, 75)
        eligible = [k for k, d in zip(ks[1:], drops) if d >= cutoff]
        selected = min(eligible, key=lambda k: (abs(k - target), k))
    return ElbowReport(tuple(ks), tuple(totals), tuple(diffs), selected, int(target), tuple(models))


def write_elbow_csv(path, report: ElbowReport):
    write_csv(path, ["k", "total_l2", "diff"], report.rows())


def resolve_threshold(distances, rule) -> float:
    """Turn a threshold rule into an absolute distance.

    ``rule`` is ``("absolute", t)`` or ``("percentile", p)`` with p in (0, 100];
    the percentile uses the nearest-rank definition.
    """
    kind, value = rule
    if kind == "absolute":
        return float(value)
    if kind == "percentile":
        if not 0.0 < value <= 100.0:
            raise ConfigError(f"percentile must be in (0, 100], got {value}")
        d = np.sort(np.asarray(distances, dtype=np.float64))
        if d.size == 0:
            return math.inf
        rank = max(1, math.ceil(value / 100.0 * d.size))
        return float(d[rank - 1])
    raise ConfigError(f"unknown threshold rule {kind!r}")


def distance_filter(model: ClusterModel, rule) -> np.ndarray:
    """Indices of samples whose distance to their center is within the threshold."""
    threshold = resolve_threshold(model.distances, rule)
    return np.flatnonzero(model.distances <= threshold)
