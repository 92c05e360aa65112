"""Snapshot bases, subspace dissimilarities, permutation tests and shape encodings."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree


@dataclass(frozen=True)
class ReducedBasis:
    Phi: np.ndarray  # (d, r), orthonormal columns
    sigma: np.ndarray  # (r,), non-increasing

    @property
    def rank(self) -> int:
        return self.Phi.shape[1]

    def truncate(self, r: int) -> "ReducedBasis":
        return ReducedBasis(self.Phi[:, :r], self.sigma[:r])


def rsvd(X, r: int, oversample: int = 10, power_iters: int = 2, seed: int = 0) -> ReducedBasis:
    """Randomized range finder with subspace iteration, then a small dense SVD."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("snapshot matrix must be 2-D")
    d, n = X.shape
    if not 1 <= r <= min(d, n):
        raise ValueError(f"rank r={r} must lie in [1, {min(d, n)}] for a {d}x{n} matrix")
    ell = min(r + oversample, min(d, n))
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(X @ rng.standard_normal((n, ell)))
    for _ in range(power_iters):
        Q, _ = np.linalg.qr(X.T @ Q)
        Q, _ = np.linalg.qr(X @ Q)
    U, s, _ = np.linalg.svd(Q.T @ X, full_matrices=False)
    return ReducedBasis(Q @ U[:, :r], s[:r])


def reconstruction_error(u, basis: ReducedBasis | np.ndarray, kind: str = "velocity") -> float:
    """Relative projection residual; pressure errors are relative to the fluctuation ``p - mean(p)``."""
    Phi = basis.Phi if isinstance(basis, ReducedBasis) else np.asarray(basis, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    if Phi.shape[0] != u.size:
        raise ValueError(f"field has {u.size} dofs, basis has {Phi.shape[0]} rows")
    res = np.linalg.norm(u - Phi @ (Phi.T @ u))
    if kind == "velocity":
        den = np.linalg.norm(u)
    elif kind == "pressure":
        den = np.linalg.norm(u - u.mean())
    else:
        raise ValueError(f"kind must be 'velocity' or 'pressure', got {kind!r}")
    if den == 0:
        raise ZeroDivisionError(f"{kind} reconstruction error undefined: zero reference norm")
    return float(res / den)


def _check_columns(A: np.ndarray, name: str) -> None:
    if np.any(np.linalg.norm(A, axis=0) == 0):
        raise ValueError(f"{name} has a zero column")


def hausdorff_subspace(A, B) -> float:
    """Largest relative residual of any column of one matrix projected on the span of the other."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    A, B = A.reshape(A.shape[0], -1), B.reshape(B.shape[0], -1)
    _check_columns(A, "A")
    _check_columns(B, "B")
    QA, _ = np.linalg.qr(A)
    QB, _ = np.linalg.qr(B)

    def worst(X, Q):
        R = X - Q @ (Q.T @ X)
        return np.max(np.sum(R * R, axis=0) / np.sum(X * X, axis=0))

    return float(np.sqrt(max(worst(A, QB), worst(B, QA))))


def grassmann_subspace(A, B, orthonormalize: bool = False) -> float:
    """Geodesic distance from the principal angles between ``span(A)`` and ``span(B)``."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    A, B = A.reshape(A.shape[0], -1), B.reshape(B.shape[0], -1)
    if A.shape != B.shape:
        raise ValueError(f"rank mismatch: {A.shape} vs {B.shape}")
    if orthonormalize:
        A, _ = np.linalg.qr(A)
        B, _ = np.linalg.qr(B)
    s = np.clip(np.linalg.svd(A.T @ B, compute_uv=False), 0.0, 1.0)
    return float(np.sqrt(np.sum(np.arccos(s) ** 2)))


@dataclass(frozen=True)
class DissimilarityMatrix:
    D: np.ndarray
    metric: str

    def __post_init__(self):
        D = np.asarray(self.D, dtype=np.float64)
        if D.ndim != 2 or D.shape[0] != D.shape[1]:
            raise ValueError("dissimilarity matrix must be square")
        if np.abs(D - D.T).max(initial=0) > 1e-12 * max(1.0, np.abs(D).max(initial=0)):
            raise ValueError("dissimilarity matrix must be symmetric")
        if np.any(np.diag(D) != 0):
            raise ValueError("dissimilarity matrix must have a zero diagonal")
        object.__setattr__(self, "D", D)

    @property
    def n(self) -> int:
        return self.D.shape[0]


METRICS = ("enc", "phi", "hausdorff", "grassmann")


def dissimilarity_matrix(items: Sequence, metric: str) -> DissimilarityMatrix:
    """Pairwise distances; Euclidean for encodings, subspace metrics for snapshot blocks."""
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}")
    n = len(items)
    if n < 2:
        raise ValueError("need at least two items")
    if metric in ("enc", "phi"):
        flat = [np.asarray(x, dtype=np.float64).ravel() for x in items]
        dist: Callable = lambda a, b: float(np.linalg.norm(a - b))  # noqa: E731
    elif metric == "hausdorff":
        flat = [np.asarray(x, dtype=np.float64) for x in items]
        dist = hausdorff_subspace
    else:
        flat = [np.linalg.qr(np.asarray(x, dtype=np.float64))[0] for x in items]
        dist = grassmann_subspace
    D = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            D[i, j] = D[j, i] = dist(flat[i], flat[j])
    return DissimilarityMatrix(D, metric)


def _double_center(D: np.ndarray) -> np.ndarray:
    return D - D.mean(axis=0, keepdims=True) - D.mean(axis=1, keepdims=True) + D.mean()


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt((a @ a) * (b @ b))
    return float(a @ b / den)


def mantel_test(D1, D2, n_perm: int = 999, seed: int = 0) -> tuple[float, float]:
    """Correlation of double-centered upper triangles and its permutation p-value
    (rows and columns of ``D2`` permuted jointly on a counter-based stream)."""
    A = D1.D if isinstance(D1, DissimilarityMatrix) else np.asarray(D1, dtype=np.float64)
    B = D2.D if isinstance(D2, DissimilarityMatrix) else np.asarray(D2, dtype=np.float64)
    if A.shape != B.shape:
        raise ValueError("Mantel test needs matrices of equal size")
    if n_perm < 1:
        raise ValueError("n_perm must be >= 1")
    n = A.shape[0]
    iu = np.triu_indices(n, 1)
    a = _double_center(A)[iu]
    if np.var(a) == 0 or np.var(_double_center(B)[iu]) == 0:
        raise ValueError("zero variance in a dissimilarity triangle")
    r_obs = _pearson(a, _double_center(B)[iu])
    rng = np.random.Generator(np.random.Philox(seed))
    hits = 0
    tol = 1e-12 * max(1.0, abs(r_obs))
    for _ in range(n_perm):
        p = rng.permutation(n)
        r = _pearson(a, _double_center(B[np.ix_(p, p)])[iu])
        hits += r >= r_obs - tol
    return r_obs, (1 + hits) / (1 + n_perm)


def mds_embed(D, k: int) -> np.ndarray:
    """Classical multidimensional scaling; negative eigenvalues are clamped to zero."""
    M = D.D if isinstance(D, DissimilarityMatrix) else np.asarray(D, dtype=np.float64)
    n = M.shape[0]
    if not 1 <= k <= n - 1:
        raise ValueError(f"target dimension k={k} must lie in [1, {n - 1}]")
    J = np.eye(n) - np.ones((n, n)) / n
    Bm = -0.5 * J @ (M * M) @ J
    w, V = np.linalg.eigh(0.5 * (Bm + Bm.T))
    order = np.argsort(w)[::-1][:k]
    return V[:, order] * np.sqrt(np.clip(w[order], 0.0, None))


def n_local_shapes(r: int, n_T: int) -> int:
    return math.ceil(r / n_T)


def local_basis(test_row, n_T: int, r: int, pool: Callable[[int], np.ndarray], oversample: int = 10,
                power_iters: int = 2, seed: int = 0) -> tuple[ReducedBasis, np.ndarray]:
    """rSVD basis from the snapshots of the ``ceil(r / n_T)`` training shapes closest to the test shape.

    ``pool(i)`` returns the (d, n_T) snapshot block of training shape ``i``.
    Equal distances are resolved in favour of the lower index.
    """
    row = np.asarray(test_row, dtype=np.float64).ravel()
    n_loc = n_local_shapes(r, n_T)
    if n_loc > row.size:
        raise ValueError(f"need {n_loc} training shapes, only {row.size} available")
    chosen = np.lexsort((np.arange(row.size), row))[:n_loc]
    X = np.concatenate([np.asarray(pool(int(i)), dtype=np.float64) for i in chosen], axis=1)
    if r > X.shape[1]:
        raise ValueError(f"rank {r} exceeds the {X.shape[1]} gathered snapshot columns")
    return rsvd(X, r, oversample, power_iters, seed), chosen


def centerline_encoding(mapped_vertices, centerline) -> np.ndarray:
    """Distance of every mapped vertex to the closest centerline point."""
    C = np.asarray(centerline, dtype=np.float64).reshape(-1, 3)
    if C.shape[0] == 0:
        raise ValueError("centerline must be nonempty")
    d, _ = cKDTree(C).query(np.asarray(mapped_vertices, dtype=np.float64).reshape(-1, 3))
    return np.asarray(d, dtype=np.float64)


@dataclass(frozen=True)
class SsmModel:
    mean: np.ndarray  # (n_cntrl, 4): centerline coordinates and radius
    modes: np.ndarray  # (4 n_cntrl, k)
    scales: np.ndarray  # (k,)

    def __post_init__(self):
        m = np.asarray(self.mean, dtype=np.float64).reshape(-1, 4)
        P = np.asarray(self.modes, dtype=np.float64).reshape(m.size, -1)
        s = np.asarray(self.scales, dtype=np.float64).reshape(-1)
        if P.shape[1] != s.size:
            raise ValueError("one scale per mode is required")
        if s.size > m.size:
            raise ValueError("more modes than flattened shape entries")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "modes", P)
        object.__setattr__(self, "scales", s)

    @property
    def k(self) -> int:
        return self.scales.size


def ssm_sample(model: SsmModel, b=None, seed: int | None = None) -> np.ndarray:
    """``S_mean + P (scales * b)``; draws ``b`` from a standard normal when not given."""
    if b is None:
        b = np.random.default_rng(seed).standard_normal(model.k)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if b.size != model.k:
        raise ValueError(f"coefficient vector has length {b.size}, model has {model.k} modes")
    return model.mean + (model.modes @ (model.scales * b)).reshape(model.mean.shape)
