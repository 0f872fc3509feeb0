"""Comparison methods: seeded k-means, multiplicative-update NMF with
post-hoc abundance normalization, and factor matching for fair scoring."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ShapeError

logger = logging.getLogger(__name__)


@dataclass
class KmeansResult:
    centroids: np.ndarray      # L x K, role-ordered
    labels: np.ndarray         # length N, values in 0..K-1
    inertia: float
    inertia_history: list = field(default_factory=list)


@dataclass
class NmfResult:
    W: np.ndarray              # L x K factor TACs
    Hc: np.ndarray             # K x N coefficients
    cost_history: list = field(default_factory=list)


def _kmeans_pp_seeds(X, K, rng):
    """k-means++ seeding over the columns of X."""
    N = X.shape[1]
    centers = np.empty((X.shape[0], K))
    idx = int(rng.integers(N))
    centers[:, 0] = X[:, idx]
    d2 = np.sum((X - centers[:, [0]]) ** 2, axis=0)
    for k in range(1, K):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(N))
        else:
            idx = int(rng.choice(N, p=d2 / total))
        centers[:, k] = X[:, idx]
        d2 = np.minimum(d2, np.sum((X - centers[:, [k]]) ** 2, axis=0))
    return centers


def _assign(X, centers):
    # squared distances via the expansion ||x||^2 - 2 x.c + ||c||^2
    d = (np.sum(X ** 2, axis=0)[:, None]
         - 2.0 * X.T @ centers
         + np.sum(centers ** 2, axis=0)[None, :])
    labels = np.argmin(d, axis=1)
    inertia = float(np.sum(np.maximum(d[np.arange(X.shape[1]), labels], 0.0)))
    return labels, inertia


def kmeans_init(Y, K, seed, sbf_reference=None, max_iters=100):
    """Lloyd's k-means on voxel TAC columns, k-means++ seeded, deterministic
    under a fixed seed.

    Centroids are returned role-ordered: when sbf_reference (a length-L TAC)
    is given, the centroid best correlated with it takes slot 0 and the rest
    follow by descending area under the curve; otherwise all slots are
    ordered by descending area under the curve.
    """
    X = np.asarray(Y, dtype=float)
    if X.ndim != 2:
        raise ShapeError("Y", "expected an L x N matrix")
    N = X.shape[1]
    if K > N:
        raise ShapeError("K", f"cannot form {K} clusters from {N} voxels")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp_seeds(X, K, rng)
    labels, inertia = _assign(X, centers)
    history = [inertia]
    for _ in range(max_iters):
        for k in range(K):
            mask = labels == k
            if mask.any():
                centers[:, k] = X[:, mask].mean(axis=1)
            else:
                # deterministic empty-cluster repair: steal the voxel farthest
                # from its assigned centroid
                dist = np.sum((X - centers[:, labels]) ** 2, axis=0)
                far = int(np.argmax(dist))
                centers[:, k] = X[:, far]
                labels[far] = k
        new_labels, inertia = _assign(X, centers)
        history.append(inertia)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels

    order = _role_order(centers, sbf_reference)
    centers = centers[:, order]
    relabel = np.empty(K, dtype=int)
    relabel[order] = np.arange(K)
    labels = relabel[labels]
    return KmeansResult(centroids=centers, labels=labels, inertia=history[-1],
                        inertia_history=history)


def _role_order(centers, sbf_reference):
    K = centers.shape[1]
    auc = centers.sum(axis=0)
    if sbf_reference is None:
        return np.argsort(-auc)
    ref = np.asarray(sbf_reference, dtype=float)
    scale = np.linalg.norm(centers, axis=0) * np.linalg.norm(ref) + 1e-300
    corr = centers.T @ ref / scale
    first = int(np.argmax(corr))
    rest = [k for k in np.argsort(-auc) if k != first]
    return np.array([first] + rest)


def nmf_multiplicative(Y, K, seed, tol=1e-3, max_iters=500):
    """Euclidean-cost NMF via Lee-Seung multiplicative updates.

    Negative observations are clamped to zero first.  Stops when the relative
    cost decrease falls below tol; the cost history is non-increasing.
    """
    X = np.maximum(np.asarray(Y, dtype=float), 0.0)
    if not np.any(X > 0):
        raise DataError("NMF input is identically zero")
    L, N = X.shape
    rng = np.random.default_rng(seed)
    # absolute Gaussian with a small floor keeps entries away from the
    # absorbing zero fixed point
    W = np.abs(rng.standard_normal((L, K))) + 1e-3
    Hc = np.abs(rng.standard_normal((K, N))) + 1e-3
    eps = 1e-12
    cost = 0.5 * float(np.sum((X - W @ Hc) ** 2))
    history = [cost]
    for _ in range(max_iters):
        Hc = Hc * (W.T @ X) / (W.T @ W @ Hc + eps)
        W = W * (X @ Hc.T) / (W @ (Hc @ Hc.T) + eps)
        cost = 0.5 * float(np.sum((X - W @ Hc) ** 2))
        history.append(cost)
        previous = history[-2]
        if previous > 0 and abs(previous - cost) < tol * previous:
            break
    return NmfResult(W=W, Hc=Hc, cost_history=history)


def normalize_nmf(res: NmfResult) -> NmfResult:
    """Rescales each coefficient row to max 1, moving the scale into the
    matching factor column; the product W Hc is unchanged."""
    W = res.W.copy()
    Hc = res.Hc.copy()
    for k in range(W.shape[1]):
        s = float(np.max(np.abs(Hc[k])))
        if s == 0.0:
            logger.warning("coefficient row %d is all zero; left unnormalized", k)
            continue
        Hc[k] /= s
        W[:, k] *= s
    return NmfResult(W=W, Hc=Hc, cost_history=list(res.cost_history))


def match_factors(estimated, reference):
    """Permutation p maximizing total column-wise cosine similarity, so that
    estimated[:, p[j]] corresponds to reference[:, j].

    Solved exactly by enumeration; K must be <= 8.
    """
    E = np.asarray(estimated, dtype=float)
    R = np.asarray(reference, dtype=float)
    if E.shape != R.shape:
        raise ShapeError("estimated", f"expected {R.shape}, got {E.shape}")
    K = E.shape[1]
    if K > 8:
        raise ShapeError("K", "exact matching supports at most 8 factors")
    scale = (np.linalg.norm(E, axis=0)[:, None]
             * np.linalg.norm(R, axis=0)[None, :] + 1e-300)
    corr = (E.T @ R) / scale
    best, best_score = None, -np.inf
    for perm in itertools.permutations(range(K)):
        score = sum(corr[perm[j], j] for j in range(K))
        if score > best_score:
            best, best_score = perm, score
    return np.array(best, dtype=int)
