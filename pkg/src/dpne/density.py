"""Kernel conditional densities and the distribution preserving penalty.

Input space conditionals use a Gaussian profile with per-point bandwidths
set to the k-th nearest neighbour distance.  Embedding space conditionals
use a heavy tailed Cauchy profile whose bandwidth is either fixed or
calibrated so each row's entropy matches a target neighbourhood size.
The penalty is the KL divergence between the two row-stochastic matrices
and its gradient with respect to the embedding is available in closed
form together with a finite difference reference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .errors import DegenerateBandwidth, NonFinite, ShapeMismatch

BANDWIDTH_FLOOR = 1e-12
Q_FLOOR = 1e-12
BISECT_LO = 1e-12
BISECT_HI = 1e12
ENTROPY_TOL = 1e-4
BISECT_MAXITER = 200


@dataclass(frozen=True)
class KernelProfile:
    """A kernel profile kappa(u) of the squared scaled distance, with derivative."""

    name: str
    kappa: Callable[[np.ndarray], np.ndarray]
    dkappa: Callable[[np.ndarray], np.ndarray]


GAUSSIAN = KernelProfile(
    "gaussian",
    kappa=lambda u: np.exp(-0.5 * u),
    dkappa=lambda u: -0.5 * np.exp(-0.5 * u),
)

CAUCHY = KernelProfile(
    "cauchy",
    kappa=lambda u: 1.0 / (1.0 + u),
    dkappa=lambda u: -1.0 / (1.0 + u) ** 2,
)


class BandwidthResult(NamedTuple):
    value: float
    converged: bool


def pairwise_sq_dists(a: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between all row pairs, exact zero diagonal."""
    a = np.asarray(a, dtype=float)
    sq = np.einsum("ij,ij->i", a, a)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (a @ a.T)
    # the expansion can go slightly negative for near-duplicates
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return d2


def knn_bandwidths(x: np.ndarray, k: int, floor: bool = False) -> np.ndarray:
    """Per-point bandwidth: Euclidean distance to the k-th nearest other point.

    Parameters
    ----------
    x : (N, M) array
    k : neighbour rank, 1 <= k <= N-1
    floor : clamp zero distances (duplicate points) at 1e-12 instead of raising

    Raises
    ------
    DegenerateBandwidth
        if some point's k-th neighbour distance is zero and floor is False.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ShapeMismatch(f"expected a 2-d data matrix, got shape {x.shape}")
    n = x.shape[0]
    if not 1 <= k <= n - 1:
        raise ShapeMismatch(f"k={k} not in [1, {n - 1}] for N={n}")
    d2 = pairwise_sq_dists(x)
    # row-sorted position k skips the self distance at position 0
    kth = np.partition(d2, k, axis=1)[:, k]
    b = np.sqrt(kth)
    if (b <= 0.0).any():
        rows = np.flatnonzero(b <= 0.0)
        if not floor:
            raise DegenerateBandwidth(rows, BANDWIDTH_FLOOR)
        b = np.maximum(b, BANDWIDTH_FLOOR)
    return b


def high_conditionals(x: np.ndarray, k: int, floor: bool = False) -> np.ndarray:
    """Row-stochastic Gaussian conditionals P of the input space.

    P[i, j] is proportional to exp(-d2(i, j) / (2 b_i^2)) for j != i, with
    b_i the k-th neighbour distance of point i.  Rows sum to one and the
    diagonal is exactly zero.
    """
    x = np.asarray(x, dtype=float)
    b = knn_bandwidths(x, k, floor=floor)
    d2 = pairwise_sq_dists(x)
    u = d2 / b[:, None] ** 2
    w = GAUSSIAN.kappa(u)
    np.fill_diagonal(w, 0.0)
    # the k-th neighbour itself has weight exp(-1/2), so no row can underflow
    return w / w.sum(axis=1, keepdims=True)


def low_conditionals(h: np.ndarray, b) -> np.ndarray:
    """Row-stochastic Cauchy conditionals Q of the embedding space.

    Q[i, j] is proportional to 1 / (1 + d2(i, j) / b_i^2) for j != i.
    `b` may be a scalar or a length-N vector; it is clamped at 1e-12.
    """
    h = np.asarray(h, dtype=float)
    n = h.shape[0]
    b = np.asarray(b, dtype=float)
    if b.ndim == 0:
        b = np.full(n, float(b))
    if b.shape != (n,):
        raise ShapeMismatch(f"bandwidths {b.shape} do not match N={n}")
    b = np.maximum(b, BANDWIDTH_FLOOR)
    d2 = pairwise_sq_dists(h)
    u = d2 / b[:, None] ** 2
    w = CAUCHY.kappa(u)
    np.fill_diagonal(w, 0.0)
    return w / w.sum(axis=1, keepdims=True)


def _row_entropies(d2: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Base-2 entropy per row of Gaussian weights; +inf entries are excluded.

    Uses H = log2(S) - sum(w * l) / (S ln 2) with l the shifted logits and
    S their exp-sum, which needs one transcendental pass instead of two.
    """
    with np.errstate(over="ignore"):
        logits = -d2 / (2.0 * b[:, None] ** 2)
    m = logits.max(axis=1, keepdims=True)  # -inf entries never win
    np.subtract(logits, m, out=logits)
    w = np.exp(logits)
    s = w.sum(axis=1)
    prod = np.zeros_like(w)
    np.multiply(w, logits, out=prod, where=w > 0.0)  # skips 0 * -inf
    return np.log2(s) - prod.sum(axis=1) / (s * math.log(2.0))


def _expand_brackets(
    d2: np.ndarray, target: float, warm: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Per-row brackets around warm bandwidths, widened until they hold the root.

    Row entropy is nondecreasing in the bandwidth, so [lo, hi] brackets the
    calibrated value once H(lo) <= target <= H(hi).  Rows whose warm value
    is nonfinite or nonpositive get the full default bracket.
    """
    nrows = d2.shape[0]
    lo = np.full(nrows, BISECT_LO)
    hi = np.full(nrows, BISECT_HI)
    ok = np.isfinite(warm) & (warm > 0.0)
    lo[ok] = np.clip(0.5 * warm[ok], BISECT_LO, BISECT_HI)
    hi[ok] = np.clip(2.0 * warm[ok], BISECT_LO, BISECT_HI)
    for bound, need_more in ((hi, lambda e: e < target), (lo, lambda e: e > target)):
        rows = np.flatnonzero(ok)
        while rows.size:
            ent = _row_entropies(d2[rows], bound[rows])
            rows = rows[need_more(ent)]
            if bound is hi:
                stuck = bound[rows] >= BISECT_HI
                bound[rows] = np.minimum(4.0 * bound[rows], BISECT_HI)
            else:
                stuck = bound[rows] <= BISECT_LO
                bound[rows] = np.maximum(0.25 * bound[rows], BISECT_LO)
            rows = rows[~stuck]
    return lo, hi


def _bisect_rows(
    d2: np.ndarray,
    t: float,
    tol: float,
    max_iter: int,
    warm_start: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised entropy bisection over rows of a squared-distance matrix."""
    nrows = d2.shape[0]
    target = np.log2(float(t))
    if warm_start is None:
        lo = np.full(nrows, BISECT_LO)
        hi = np.full(nrows, BISECT_HI)
    else:
        lo, hi = _expand_brackets(d2, target, warm_start)
    b = np.empty(nrows)
    conv = np.zeros(nrows, dtype=bool)
    active = np.ones(nrows, dtype=bool)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        sub = d2 if active.all() else d2[active]
        ent = _row_entropies(sub, mid[active])
        b[active] = mid[active]
        hit = np.zeros(nrows, dtype=bool)
        hit[active] = np.abs(ent - target) <= tol
        conv |= hit
        go_up = np.zeros(nrows, dtype=bool)
        go_up[active] = ent < target
        active &= ~hit
        lo = np.where(active & go_up, mid, lo)
        hi = np.where(active & ~go_up, mid, hi)
        if not active.any():
            break
    return b, conv


def calibrate_bandwidth(
    squared_distances: np.ndarray,
    t: float,
    tol: float = ENTROPY_TOL,
    max_iter: int = BISECT_MAXITER,
) -> BandwidthResult:
    """Bisect a Gaussian bandwidth so the row entropy matches log2(t).

    Parameters
    ----------
    squared_distances : vector of squared distances to the other points
    t : target neighbourhood size (perplexity), t > 1
    tol : stop when |entropy - log2(t)| <= tol
    max_iter : bisection iterations over [1e-12, 1e12]

    Returns
    -------
    BandwidthResult
        (value, converged).  When the entropy never meets the tolerance the
        last midpoint is returned with converged False; the value always
        lies inside the bracket.
    """
    row = np.atleast_2d(np.asarray(squared_distances, dtype=float))
    if row.shape[0] != 1 or row.shape[1] < 1:
        raise ShapeMismatch(f"expected a distance vector, got shape {row.shape}")
    if not np.isfinite(row).all():
        raise NonFinite("squared distances must be finite")
    if (row < 0.0).any():
        raise ValueError("squared distances must be nonnegative")
    if not t > 1.0:
        raise ValueError(f"target neighbourhood size must exceed 1, got {t}")
    b, conv = _bisect_rows(row, t, tol, max_iter)
    return BandwidthResult(float(b[0]), bool(conv[0]))


def calibrate_bandwidths(
    sq_dists: np.ndarray,
    t: float,
    tol: float = ENTROPY_TOL,
    max_iter: int = BISECT_MAXITER,
    warm_start: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise bandwidth calibration for a full N x N squared-distance matrix.

    Self distances on the diagonal are excluded.  Agrees with the scalar
    `calibrate_bandwidth` applied to each row with the diagonal removed.
    warm_start, when given, seeds each row's bracket with a previous
    bandwidth; the bracket is re-expanded as needed, so the result meets
    the same entropy tolerance in far fewer iterations when the distances
    changed only slightly.
    """
    d2 = np.asarray(sq_dists, dtype=float)
    if d2.ndim != 2 or d2.shape[0] != d2.shape[1]:
        raise ShapeMismatch(f"expected a square matrix, got shape {d2.shape}")
    if d2.shape[0] < 2:
        raise ShapeMismatch("need at least two points to calibrate")
    if not t > 1.0:
        raise ValueError(f"target neighbourhood size must exceed 1, got {t}")
    if warm_start is not None:
        warm_start = np.asarray(warm_start, dtype=float)
        if warm_start.shape != (d2.shape[0],):
            raise ShapeMismatch(
                f"warm start {warm_start.shape} does not match N={d2.shape[0]}"
            )
    d2 = d2.copy()
    np.fill_diagonal(d2, np.inf)
    return _bisect_rows(d2, t, tol, max_iter, warm_start=warm_start)


def dp_objective(p: np.ndarray, q: np.ndarray) -> float:
    """KL divergence sum_ij P_ij log(P_ij / Q_ij), Q zeros floored at 1e-12.

    Zero entries of P contribute nothing, so the exact-zero diagonals of
    valid affinity matrices are harmless.  Only exact zeros of Q are
    floored; tiny positive entries pass through untouched, which keeps
    dp_objective(P, P) identically zero.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape or p.ndim != 2:
        raise ShapeMismatch(f"affinity shapes differ: {p.shape} vs {q.shape}")
    mask = p > 0.0
    psafe = np.where(mask, p, 1.0)
    qsafe = np.where(mask, q, 1.0)
    qsafe = np.where(qsafe > 0.0, qsafe, Q_FLOOR)
    return float(np.sum(psafe * (np.log(psafe) - np.log(qsafe))))


def dp_gradient(p: np.ndarray, q: np.ndarray, h: np.ndarray, b) -> np.ndarray:
    """Gradient of the distribution preserving penalty w.r.t. the embedding.

    Row i is (1 / (N b_i^D)) * sum_j (P_ij - Q_ij) (h_i - h_j) / (1 + u_ij)^2
    with u_ij the squared scaled embedding distance.  The sign is oriented
    so that stepping along the negative of the returned matrix decreases
    the KL penalty; see fd_dp_gradient for the finite difference check.
    """
    h = np.asarray(h, dtype=float)
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    n, d = h.shape
    if p.shape != (n, n) or q.shape != (n, n):
        raise ShapeMismatch(
            f"affinities {p.shape}/{q.shape} do not match embedding N={n}"
        )
    b = np.asarray(b, dtype=float)
    if b.ndim == 0:
        b = np.full(n, float(b))
    b = np.maximum(b, BANDWIDTH_FLOOR)
    d2 = pairwise_sq_dists(h)
    u = d2 / b[:, None] ** 2
    w = (p - q) * CAUCHY.dkappa(u)
    np.fill_diagonal(w, 0.0)
    # sum_j W_ij (h_i - h_j) without materialising the N x N x D tensor
    raw = w.sum(axis=1)[:, None] * h - w @ h
    return -raw / (n * b[:, None] ** d)


def fd_dp_gradient(
    p: np.ndarray, h: np.ndarray, b, step: float = 1e-6
) -> np.ndarray:
    """Central finite differences of dp_objective through low_conditionals.

    Bandwidths are held fixed while coordinates are perturbed, matching the
    closed form gradient.  Intended for small test instances only.
    """
    h = np.asarray(h, dtype=float)
    g = np.zeros_like(h)
    for i in range(h.shape[0]):
        for j in range(h.shape[1]):
            hp = h.copy()
            hp[i, j] += step
            hm = h.copy()
            hm[i, j] -= step
            fp = dp_objective(p, low_conditionals(hp, b))
            fm = dp_objective(p, low_conditionals(hm, b))
            g[i, j] = (fp - fm) / (2.0 * step)
    return g
