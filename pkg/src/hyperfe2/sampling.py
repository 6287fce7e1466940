"""Clustered training paths.

The macro problem is first solved with a homogeneous linear-elastic
surrogate; the strain histories of all macro Gauss points are then grouped
by k-means and the cluster centroids serve as RVE training paths.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rve import LoadPath
from .twoscale import ElasticHandler, MacroProblem, run_simulation


@dataclass
class PathEnsemble:
    t: np.ndarray  # (T,)
    paths: np.ndarray  # (P, T, 3) Voigt strains
    source: np.ndarray  # macro Gauss point ids

    def __post_init__(self):
        self.paths = np.asarray(self.paths, dtype=float)
        if self.paths.ndim != 3 or self.paths.shape[1] != len(self.t) or self.paths.shape[2] != 3:
            raise ValueError("paths must have shape (P, T, 3)")
        if not np.all(np.isfinite(self.paths)):
            raise ValueError("non-finite path values")

    def __len__(self):
        return len(self.paths)

    def flat(self, weights=None):
        X = self.paths if weights is None else self.paths * np.asarray(weights, dtype=float)
        return X.reshape(len(self.paths), -1)


@dataclass
class ClusterResult:
    centroids: np.ndarray  # (k, T, 3)
    labels: np.ndarray
    inertia: float
    history: list  # inertia after every Lloyd iteration
    t: np.ndarray

    def load_paths(self, scale: float = 1.0) -> list:
        """Centroids as strain load paths, starting from zero load."""
        out = []
        for c in self.centroids:
            t, v = self.t, c * scale
            if t[0] > 0.0:
                t = np.concatenate([[0.0], t])
                v = np.vstack([np.zeros(3), v])
            out.append(LoadPath(t, v))
        return out


def surrogate_macro_run(problem: MacroProblem, C_eff, times) -> PathEnsemble:
    """Macro strain history at every Gauss point under a constant stiffness."""
    rec = []
    run_simulation(problem, ElasticHandler(C_eff), times, on_step=lambda st, info: rec.append(st.E.copy()))
    paths = np.transpose(np.array(rec), (1, 0, 2))
    return PathEnsemble(np.asarray(times, dtype=float), paths, np.arange(problem.n_gp))


def _kmeans_pp(X, k, rng):
    n = len(X)
    idx = [int(rng.integers(n))]
    d2 = np.sum((X - X[idx[0]]) ** 2, axis=1)
    for _ in range(1, k):
        tot = d2.sum()
        if tot <= 0.0:
            j = int(np.argmax(d2))
        else:
            j = int(rng.choice(n, p=d2 / tot))
        idx.append(j)
        d2 = np.minimum(d2, np.sum((X - X[j]) ** 2, axis=1))
    return X[idx].copy()


def kmeans(X, k: int, seed: int = 0, max_iter: int = 300):
    """Lloyd iterations with k-means++ seeding.

    An empty cluster is re-seeded with the point farthest from its centroid.
    Returns ``(centroids, labels, inertia, history)``.
    """
    X = np.asarray(X, dtype=float)
    n = len(X)
    if k < 1 or k > n:
        raise ValueError(f"k = {k} must lie in [1, {n}]")
    if k > len(np.unique(X, axis=0)):
        raise ValueError("k exceeds the number of distinct paths")
    rng = np.random.default_rng(seed)
    C = _kmeans_pp(X, k, rng)
    history = []
    labels = None
    for _ in range(max_iter):
        d2 = ((X[:, None, :] - C[None]) ** 2).sum(axis=2)
        new = np.argmin(d2, axis=1)
        for j in range(k):
            if not np.any(new == j):
                far = int(np.argmax(d2[np.arange(n), new]))
                new[far] = j
        C = np.array([X[new == j].mean(axis=0) for j in range(k)])
        inertia = float(np.sum((X - C[new]) ** 2))
        history.append(inertia)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
    return C, labels, history[-1], history


def cluster_paths(ens: PathEnsemble, k: int = 8, seed: int = 0, weights=None) -> ClusterResult:
    """k-means on the flattened trajectories (Euclidean metric).

    Centroids are reported in a canonical order (lexicographic on the
    flattened centroid) so that input permutations only relabel members.
    """
    X = ens.flat(weights)
    C, labels, inertia, hist = kmeans(X, k, seed)
    # centroids are means of the unweighted members
    cent = np.array([ens.paths[labels == j].mean(axis=0) for j in range(k)])
    order = np.lexsort(cent.reshape(k, -1).T[::-1])
    relabel = np.empty(k, dtype=int)
    relabel[order] = np.arange(k)
    return ClusterResult(cent[order], relabel[labels], inertia, hist, ens.t.copy())


def inertia_report(ens: PathEnsemble, ks, seed: int = 0) -> dict:
    return {int(k): cluster_paths(ens, int(k), seed).inertia for k in ks}
