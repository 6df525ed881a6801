"""Clustering an embedding and scoring it against ground truth labels.

k-means uses squared-distance-weighted seeding and Lloyd iterations with
deterministic restart selection.  Accuracy maximises the label matching
over permutations (Hungarian assignment on the contingency table) and the
mutual information score is adjusted for chance with the exact
hypergeometric expectation.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ShapeMismatch

LLOYD_MAXITER = 300
SHIFT_TOL = 1e-9


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centers: np.ndarray
    inertia: float
    inertia_history: list
    restart: int


def _worker_count(n_tasks: int) -> int:
    env = os.environ.get("DPNE_THREADS", "").strip()
    if env:
        workers = int(env)
        if workers < 1:
            raise ValueError(f"DPNE_THREADS must be a positive integer, got {env!r}")
    else:
        workers = os.cpu_count() or 1
    return max(1, min(workers, n_tasks))


def _seed_centers(h: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Distance-squared weighted seeding: each new centre is drawn with
    probability proportional to the squared distance to the nearest centre."""
    n = h.shape[0]
    centers = np.empty((k, h.shape[1]))
    centers[0] = h[rng.integers(n)]
    d2 = ((h - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0.0:
            pick = rng.choice(n, p=d2 / total)
        else:
            # every point already coincides with a centre
            pick = rng.integers(n)
        centers[j] = h[pick]
        d2 = np.minimum(d2, ((h - centers[j]) ** 2).sum(axis=1))
    return centers


def _lloyd(h: np.ndarray, centers: np.ndarray, max_iter: int, tol: float):
    n, k = h.shape[0], centers.shape[0]
    hsq = np.einsum("ij,ij->i", h, h)
    assign = np.zeros(n, dtype=np.int64)
    history: list = []
    for _ in range(max_iter):
        d2c = hsq[:, None] + np.einsum("ij,ij->i", centers, centers)[None, :] - 2.0 * (h @ centers.T)
        np.maximum(d2c, 0.0, out=d2c)
        assign = d2c.argmin(axis=1)
        centers = centers.copy()
        while True:
            # re-seed starved centres at the point farthest from its own centre;
            # stealing can starve another singleton, hence the loop
            empties = np.flatnonzero(np.bincount(assign, minlength=k) == 0)
            if empties.size == 0:
                break
            own = ((h - centers[assign]) ** 2).sum(axis=1)
            far = int(own.argmax())
            if own[far] <= 0.0:
                break  # duplicate-only data, nothing left to split
            assign[far] = empties[0]
            centers[empties[0]] = h[far]
        inertia = float(((h - centers[assign]) ** 2).sum())
        history.append(inertia)
        new_centers = centers.copy()
        for j in range(k):
            members = assign == j
            if members.any():
                new_centers[j] = h[members].mean(axis=0)
        shift = float(np.sqrt(((new_centers - centers) ** 2).sum(axis=1)).max())
        centers = new_centers
        if shift < tol:
            break
    return assign, centers, history[-1], history


def kmeans_pp(
    h: np.ndarray,
    n_clusters: int,
    restarts: int = 10,
    seed: int = 0,
    max_iter: int = LLOYD_MAXITER,
    tol: float = SHIFT_TOL,
) -> KMeansResult:
    """Restarted k-means; the lowest-inertia run wins, first index on ties.

    Restart r draws from np.random.default_rng([seed, r]) so results do not
    depend on how the restarts are scheduled.  The pool size is capped by
    the DPNE_THREADS environment variable.
    """
    h = np.asarray(h, dtype=float)
    if h.ndim != 2:
        raise ShapeMismatch(f"expected a 2-d embedding, got shape {h.shape}")
    n = h.shape[0]
    if not 1 <= n_clusters <= n:
        raise ShapeMismatch(f"cannot form {n_clusters} clusters from {n} points")
    if restarts < 1:
        raise ValueError(f"need at least one restart, got {restarts}")

    def run(r: int):
        rng = np.random.default_rng([seed, r])
        centers = _seed_centers(h, n_clusters, rng)
        return _lloyd(h, centers, max_iter, tol)

    workers = _worker_count(restarts)
    if workers == 1:
        runs = [run(r) for r in range(restarts)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(run, range(restarts)))
    best = min(range(restarts), key=lambda r: (runs[r][2], r))
    assign, centers, inertia, history = runs[best]
    return KMeansResult(assign, centers, inertia, history, best)


def contingency_table(truth, pred) -> np.ndarray:
    """Joint label counts after compacting both label sets to 0..K-1."""
    truth = np.asarray(truth).ravel()
    pred = np.asarray(pred).ravel()
    if truth.shape != pred.shape or truth.size == 0:
        raise ShapeMismatch(
            f"label vectors must be equal length and nonempty: {truth.shape} vs {pred.shape}"
        )
    _, ti = np.unique(truth, return_inverse=True)
    _, pi = np.unique(pred, return_inverse=True)
    table = np.zeros((ti.max() + 1, pi.max() + 1), dtype=np.int64)
    np.add.at(table, (ti, pi), 1)
    return table


def cluster_accuracy(truth, pred) -> float:
    """Fraction of points whose predicted cluster maps to their true label
    under the best one-to-one relabeling of clusters."""
    table = contingency_table(truth, pred)
    side = max(table.shape)
    padded = np.zeros((side, side), dtype=np.int64)
    padded[: table.shape[0], : table.shape[1]] = table
    rows, cols = linear_sum_assignment(-padded)
    return float(padded[rows, cols].sum()) / float(table.sum())


def _entropy(counts: np.ndarray, n: int) -> float:
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def _expected_mi(a: np.ndarray, b: np.ndarray, n: int) -> float:
    """Expected mutual information of two fixed marginals under the
    hypergeometric model of random contingency tables."""
    emi = 0.0
    lg = math.lgamma
    for ai in a:
        for bj in b:
            lo = max(1, ai + bj - n)
            hi = min(ai, bj)
            for nij in range(lo, hi + 1):
                logp = (
                    lg(ai + 1)
                    + lg(bj + 1)
                    + lg(n - ai + 1)
                    + lg(n - bj + 1)
                    - lg(n + 1)
                    - lg(nij + 1)
                    - lg(ai - nij + 1)
                    - lg(bj - nij + 1)
                    - lg(n - ai - bj + nij + 1)
                )
                emi += (nij / n) * (math.log(n) + math.log(nij) - math.log(ai) - math.log(bj)) * math.exp(logp)
    return emi


def adjusted_mutual_info(truth, pred) -> float:
    """Mutual information adjusted for chance: (MI - E[MI]) / (mean(H) - E[MI]).

    Two all-in-one-cluster partitions agree perfectly and score 1; a
    single-cluster partition against a real one carries no information
    and scores 0.
    """
    table = contingency_table(truth, pred)
    n = int(table.sum())
    a = table.sum(axis=1)
    b = table.sum(axis=0)
    hu = _entropy(a, n)
    hv = _entropy(b, n)
    if hu == 0.0 and hv == 0.0:
        return 1.0
    if hu == 0.0 or hv == 0.0:
        return 0.0
    nz = table > 0
    tij = table[nz] / n
    outer = (a[:, None] * b[None, :])[nz] / (n * n)
    mi = float((tij * (np.log(tij) - np.log(outer))).sum())
    emi = _expected_mi(a.tolist(), b.tolist(), n)
    denom = 0.5 * (hu + hv) - emi
    eps = np.finfo(float).eps
    denom = max(denom, eps) if denom >= 0 else min(denom, -eps)
    return (mi - emi) / denom


def evaluate_clustering(
    h: np.ndarray,
    labels,
    n_clusters: int | None = None,
    restarts: int = 10,
    repeats: int = 10,
    seed: int = 0,
) -> dict:
    """Repeat k-means with shifted seeds and summarise ACC and AMI."""
    labels = np.asarray(labels).ravel()
    h = np.asarray(h, dtype=float)
    if h.shape[0] != labels.shape[0]:
        raise ShapeMismatch(f"{h.shape[0]} embedded points vs {labels.shape[0]} labels")
    if n_clusters is None:
        n_clusters = len(np.unique(labels))
    accs = []
    amis = []
    for rep in range(repeats):
        res = kmeans_pp(h, n_clusters, restarts=restarts, seed=seed + rep)
        accs.append(cluster_accuracy(labels, res.assignments))
        amis.append(adjusted_mutual_info(labels, res.assignments))
    accs = np.array(accs)
    amis = np.array(amis)
    return {
        "acc_mean": float(accs.mean()),
        "acc_std": float(accs.std()),
        "acc_best": float(accs.max()),
        "ami_mean": float(amis.mean()),
        "ami_std": float(amis.std()),
        "ami_best": float(amis.max()),
    }
