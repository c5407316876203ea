"""Unsupervised content groups: k-means on unit-normalized features.

Distances to the centroids are turned into gating weights with
``softmax(-beta * distance)`` so the nearest centroid gets the largest weight.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import softmax

from ._rng import substream


@dataclass
class ContentModel:
    centroids: np.ndarray
    beta: float = 10.0
    inertia_history: list[float] = field(default_factory=list)
    n_iter: int = 0

    def __post_init__(self):
        self.centroids = np.atleast_2d(np.asarray(self.centroids, dtype=np.float64))
        if self.centroids.shape[0] < 1 or not np.all(np.isfinite(self.centroids)):
            raise ValueError("centroids must be a finite, nonempty K x d matrix")
        if not self.beta > 0:
            raise ValueError("beta must be positive")

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    def distances(self, X) -> np.ndarray:
        Xn = normalize_rows(np.atleast_2d(X))
        if Xn.shape[1] != self.centroids.shape[1]:
            raise ValueError("feature dimension mismatch")
        return _dist(Xn, self.centroids)

    def assign(self, X) -> np.ndarray:
        return np.argmin(self.distances(X), axis=1)

    def to_json(self) -> dict:
        return {"K": self.K, "beta": self.beta, "centroids": self.centroids.tolist(),
                "inertia_history": self.inertia_history, "n_iter": self.n_iter}

    @classmethod
    def from_json(cls, obj: dict) -> "ContentModel":
        return cls(np.array(obj["centroids"]), float(obj["beta"]),
                   list(obj.get("inertia_history", [])), int(obj.get("n_iter", 0)))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path) -> "ContentModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def normalize_rows(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    return X / np.where(norms > 0, norms, 1.0)


def _dist(X, C) -> np.ndarray:
    sq = np.sum(X * X, axis=1)[:, None] - 2 * X @ C.T + np.sum(C * C, axis=1)[None, :]
    return np.sqrt(np.maximum(sq, 0.0))


def _sq_dist(X, C) -> np.ndarray:
    return np.maximum(np.sum(X * X, axis=1)[:, None] - 2 * X @ C.T
                      + np.sum(C * C, axis=1)[None, :], 0.0)


def _kmeanspp(X, K, rng) -> np.ndarray:
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = _sq_dist(X, centers[0][None, :])[:, 0]
    for _ in range(1, K):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers.append(X[idx])
        d2 = np.minimum(d2, _sq_dist(X, X[idx][None, :])[:, 0])
    return np.array(centers)


def kmeans_fit(features, K: int = 10, seed: int = 0, max_iter: int = 300, tol: float = 1e-6,
               beta: float = 10.0, normalize: bool = True, n_init: int = 10) -> ContentModel:
    """Lloyd iterations from k-means++ seeds, best of ``n_init`` restarts.

    ``inertia_history[t]`` is the within-cluster sum of squares after the
    t-th assignment step of the kept restart; Lloyd updates make it
    non-increasing. An empty cluster is re-seeded at the point farthest from
    its current centroid. Stops when the relative inertia change drops below
    ``tol``. The restart with the lowest final inertia wins, earliest on ties.
    """
    X = np.asarray(features, dtype=np.float64)
    if normalize:
        X = normalize_rows(X)
    n = X.shape[0]
    if K < 1 or n < K:
        raise ValueError(f"need at least K={K} points, got {n}")
    if n_init < 1:
        raise ValueError("n_init must be at least 1")
    best = None
    for r in range(n_init):
        rng = substream(seed, "cluster.kmeans", *((r,) if r else ()))
        run = _lloyd(X, _kmeanspp(X, K, rng), max_iter, tol)
        if best is None or run[1][-1] < best[1][-1]:
            best = run
    C, history, it = best
    return ContentModel(C, beta, history, it)


def _lloyd(X, C, max_iter, tol):
    n, K = X.shape[0], C.shape[0]
    history: list[float] = []
    it = 0
    for it in range(1, max_iter + 1):
        d2 = _sq_dist(X, C)
        labels = np.argmin(d2, axis=1)
        inertia = float(d2[np.arange(n), labels].sum())
        history.append(inertia)
        if len(history) > 1 and history[-2] - inertia <= tol * max(history[-2], 1e-300):
            break
        newC = C.copy()
        counts = np.bincount(labels, minlength=K)
        for k in range(K):
            if counts[k]:
                newC[k] = X[labels == k].mean(axis=0)
        own = d2[np.arange(n), labels]
        for k in np.flatnonzero(counts == 0):
            far = int(np.argmax(own))
            newC[k] = X[far]
            own[far] = -1.0
        C = newC
    return C, history, it


def content_weights(cm: ContentModel, x) -> np.ndarray:
    """Gate weights ``softmax(-beta * ||x_normalized - centroid_k||)``.

    Accepts one vector (returns ``(K,)``) or a batch (returns ``(N, K)``).
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    w = softmax(-cm.beta * cm.distances(np.atleast_2d(x)), axis=1)
    return w[0] if single else w
