"""Local thin-plate-spline interpolation of registration maps and field transport.

Each query gets its own interpolant built on its ``k`` nearest centers with
kernel ``r^2 log r`` and a linear polynomial tail.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np
from scipy.spatial import cKDTree

from .fem import FemField, OutsideDomainWarning
from .io import read_fmat, write_fmat


class SingularLocalSystem(np.linalg.LinAlgError):
    def __init__(self, query_index: int):
        super().__init__(f"local RBF system for query {query_index} is singular "
                         "(neighbour centers are coplanar or repeated)")
        self.query_index = query_index


KERNELS = {"tps": 0}


def tps(r: np.ndarray) -> np.ndarray:
    """``r^2 log r`` with the removable singularity at 0 filled with 0."""
    out = np.zeros_like(r)
    nz = r > 0
    out[nz] = r[nz] ** 2 * np.log(r[nz])
    return out


@dataclass(frozen=True, eq=False)
class RbfMap:
    """Scattered-data interpolant from ``centers`` to ``values`` (any trailing width)."""

    centers: np.ndarray
    values: np.ndarray
    k: int = 30
    kernel: str = "tps"
    _tree: cKDTree = field(init=False, repr=False)

    def __post_init__(self):
        C = np.ascontiguousarray(self.centers, dtype=np.float64).reshape(-1, 3)
        V = np.asarray(self.values, dtype=np.float64)
        V = V.reshape(C.shape[0], -1) if V.ndim != 2 else V
        if V.shape[0] != C.shape[0]:
            raise ValueError("one value row per center is required")
        if not np.all(np.isfinite(V)) or not np.all(np.isfinite(C)):
            raise ValueError("RBF data must be finite")
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown kernel {self.kernel!r}")
        if not 4 <= self.k <= C.shape[0]:
            raise ValueError(f"k={self.k} must lie in [4, {C.shape[0]}]")
        tree = cKDTree(C)
        if tree.query(C, k=2)[0][:, 1].min() == 0.0:
            raise ValueError("RBF centers must be distinct")
        object.__setattr__(self, "centers", C)
        object.__setattr__(self, "values", V)
        object.__setattr__(self, "_tree", tree)

    @classmethod
    def fit(cls, source_points, target_points, k: int = 30) -> "RbfMap":
        """Map sending each source point to its registered image."""
        return cls(source_points, target_points, k)

    def inverse(self) -> "RbfMap":
        """Second interpolant with the roles swapped (values become centers)."""
        if self.values.shape[1] != 3:
            raise ValueError("only point-to-point maps can be inverted")
        return RbfMap(self.values, self.centers, self.k, self.kernel)

    def __call__(self, queries, chunk: int = 2048) -> np.ndarray:
        return rbf_interpolate(self, queries, chunk)

    def save(self, path) -> None:
        """Serialize as one FMAT1 matrix: rows ``[centers | values]``, with a
        trailing row ``[k, kernel id, 0, ...]``."""
        M = np.concatenate([self.centers, self.values], axis=1)
        meta = np.zeros((1, M.shape[1]))
        meta[0, 0], meta[0, 1] = self.k, KERNELS[self.kernel]
        write_fmat(path, np.concatenate([M, meta]))

    @classmethod
    def load(cls, path) -> "RbfMap":
        M = read_fmat(path)
        k, kid = int(M[-1, 0]), int(M[-1, 1])
        kernel = {v: n for n, v in KERNELS.items()}[kid]
        return cls(M[:-1, :3], M[:-1, 3:], k, kernel)


def _local_solve(C: np.ndarray, F: np.ndarray, q: np.ndarray, offset: int) -> np.ndarray:
    """Batched local TPS fits. C (b,k,3) centers, F (b,k,m) data, q (b,3) queries."""
    b, k, _ = C.shape
    # translate and scale each neighbourhood; the TPS interpolant is invariant to both
    mu = C.mean(axis=1, keepdims=True)
    s = np.max(np.linalg.norm(C - mu, axis=2), axis=1)[:, None, None]
    s = np.where(s > 0, s, 1.0)
    Cn = (C - mu) / s
    qn = (q[:, None, :] - mu) / s
    sv = np.linalg.svd(Cn, compute_uv=False)
    bad = sv[:, -1] <= 1e-10 * sv[:, 0]
    if bad.any():
        raise SingularLocalSystem(offset + int(np.flatnonzero(bad)[0]))
    r = np.linalg.norm(Cn[:, :, None, :] - Cn[:, None, :, :], axis=3)
    A = np.zeros((b, k + 4, k + 4))
    A[:, :k, :k] = tps(r)
    P = np.concatenate([np.ones((b, k, 1)), Cn], axis=2)
    A[:, :k, k:] = P
    A[:, k:, :k] = np.transpose(P, (0, 2, 1))
    rhs = np.zeros((b, k + 4, F.shape[2]))
    rhs[:, :k] = F
    try:
        coef = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError:
        for i in range(b):
            try:
                np.linalg.solve(A[i], rhs[i])
            except np.linalg.LinAlgError:
                raise SingularLocalSystem(offset + i) from None
        raise
    rq = np.linalg.norm(Cn - qn, axis=2)
    basis = np.concatenate([tps(rq), np.ones((b, 1)), qn[:, 0, :]], axis=1)
    return np.einsum("bj,bjm->bm", basis, coef)


def rbf_interpolate(rbf: RbfMap, queries, chunk: int = 2048) -> np.ndarray:
    Q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    out = np.empty((Q.shape[0], rbf.values.shape[1]))
    for start in range(0, Q.shape[0], chunk):
        q = Q[start : start + chunk]
        _, idx = rbf._tree.query(q, k=rbf.k)
        idx = np.asarray(idx).reshape(q.shape[0], rbf.k)
        out[start : start + chunk] = _local_solve(rbf.centers[idx], rbf.values[idx], q, start)
    return out


FieldLike = Union[FemField, Callable[[np.ndarray], np.ndarray]]


def _sample(g: FieldLike, pts: np.ndarray) -> np.ndarray:
    if isinstance(g, FemField):
        return g.evaluate(pts, outside="nearest")
    vals = np.asarray(g(pts), dtype=np.float64)
    if not np.all(np.isfinite(vals)):
        warnings.warn(OutsideDomainWarning("field returned non-finite values at mapped points"),
                      stacklevel=3)
    return vals


def pushforward_field(g: FieldLike, forward: RbfMap, inverse: RbfMap | None, target_points) -> np.ndarray:
    """``g o phi^{-1}`` at target points: pull each point back to the source, then sample."""
    inv = inverse if inverse is not None else forward.inverse()
    return _sample(g, inv(target_points))


def pullback_field(g: FieldLike, forward: RbfMap, source_points) -> np.ndarray:
    """``g o phi`` at source points."""
    return _sample(g, forward(source_points))
