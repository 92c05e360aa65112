"""Velocity reconstruction from voxel averages with a heteroscedastic noise model.

Observation rows are scalar: rows ``3*i + a`` average component ``a`` over voxel
``i`` and the final row is the integrated divergence.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .fem import TetMesh
from .mesh import MeshError, RegionId, mesh_diameter


class EmptyVoxelWarning(UserWarning):
    pass


class SingularNormalMatrix(np.linalg.LinAlgError):
    def __init__(self, what: str, cond: float):
        super().__init__(f"{what} is numerically singular (condition estimate {cond:.3e})")
        self.cond = cond


# ---------------------------------------------------------------------------
# voxels and operator rows

_CORNERS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.float64)


@dataclass(frozen=True)
class VoxelGrid:
    """Axis-aligned grid of cubic voxels; voxel ``(i, j, k)`` spans ``origin + edge * [i, i+1] x ...``."""

    edge: float = 2e-3
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    shape: tuple[int, int, int] = (1, 1, 1)

    def __post_init__(self):
        if not self.edge > 0:
            raise ValueError("voxel edge must be positive")
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ValueError("voxel grid shape must be three positive integers")
        object.__setattr__(self, "origin", tuple(float(x) for x in self.origin))
        object.__setattr__(self, "shape", tuple(int(x) for x in self.shape))

    @classmethod
    def covering(cls, mesh: TetMesh, edge: float = 2e-3) -> "VoxelGrid":
        lo = mesh.vertices.min(axis=0)
        hi = mesh.vertices.max(axis=0)
        shape = np.maximum(np.ceil((hi - lo) / edge - 1e-9).astype(int), 1)
        return cls(edge, tuple(lo), tuple(shape))

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.shape))

    def index_grid(self) -> np.ndarray:
        """Integer (i, j, k) of every voxel in C order."""
        return np.stack(np.meshgrid(*[np.arange(n) for n in self.shape], indexing="ij"), -1).reshape(-1, 3)

    def centers(self) -> np.ndarray:
        return np.asarray(self.origin) + self.edge * (self.index_grid() + 0.5)

    def sample_points(self, centers: np.ndarray) -> np.ndarray:
        """(M, 9, 3): the 8 corners then the center of each voxel."""
        c = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
        corners = c[:, None, :] + self.edge * (_CORNERS[None] - 0.5)
        return np.concatenate([corners, c[:, None, :]], axis=1)


@dataclass(frozen=True, eq=False)
class VoxelObservations:
    rows: sp.csr_matrix  # (3 M, 3 n)
    centers: np.ndarray  # (M, 3)
    voxel_ids: np.ndarray  # flat grid index of each admitted voxel
    n_inside: np.ndarray  # inside sample points per voxel (1..9)

    @property
    def n_voxels(self) -> int:
        return self.centers.shape[0]

    def observe(self, u) -> np.ndarray:
        """Noise-free voxel measurements of a nodal velocity field, shape (3 M,)."""
        return self.rows @ np.asarray(u, dtype=np.float64).reshape(-1)


def build_voxel_observations(mesh: TetMesh, grid: VoxelGrid, centers=None) -> VoxelObservations:
    """One averaging row per voxel and component over the sample points inside the mesh.

    Voxels are admitted when their center lies inside the domain; explicit
    ``centers`` skip that filter but voxels without any inside point are still
    dropped with a warning.
    """
    if centers is None:
        all_c = grid.centers()
        ids = np.flatnonzero(mesh.contains(all_c))
        C = all_c[ids]
    else:
        C = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
        ids = np.arange(C.shape[0])
    pts = grid.sample_points(C)
    tet, bary = mesh.locate(pts.reshape(-1, 3))
    tet, bary = tet.reshape(-1, 9), bary.reshape(-1, 9, 4)
    inside = tet >= 0
    n_in = inside.sum(axis=1)
    empty = n_in == 0
    if empty.any():
        warnings.warn(EmptyVoxelWarning(
            f"{int(empty.sum())} voxel(s) have no sample point inside the domain and are excluded"),
            stacklevel=2)
    keep = np.flatnonzero(~empty)
    rows, cols, vals = [], [], []
    for out_i, v in enumerate(keep):
        pi = np.flatnonzero(inside[v])
        nodes = mesh.tets[tet[v, pi]].reshape(-1)
        w = bary[v, pi].reshape(-1) / n_in[v]
        for a in range(3):
            rows.append(np.full(nodes.size, 3 * out_i + a))
            cols.append(3 * nodes + a)
            vals.append(w)
    shape = (3 * keep.size, 3 * mesh.n_nodes)
    if keep.size:
        R = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=shape)
    else:
        R = sp.csr_matrix(shape)
    R.sum_duplicates()
    return VoxelObservations(R, C[keep], ids[keep], n_in[keep])


def divergence_row(mesh: TetMesh) -> np.ndarray:
    """Coefficients of ``u -> integral of div u`` over vector DOFs (exact for P1)."""
    vol = mesh.volumes
    if np.any(vol <= 0):
        raise MeshError(f"tet {int(np.flatnonzero(vol <= 0)[0])} is inverted")
    row = np.zeros(3 * mesh.n_nodes)
    contrib = vol[:, None, None] * mesh.grads  # (nt, 4, 3): |K| d_a lambda_j
    idx = 3 * mesh.tets[:, :, None] + np.arange(3)[None, None, :]
    np.add.at(row, idx.reshape(-1), contrib.reshape(-1))
    return row


# ---------------------------------------------------------------------------
# wall distance


def _point_triangle_distance(p: np.ndarray, A: np.ndarray, B: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance from points ``p`` to triangles ``ABC`` (broadcast over leading dims)."""
    ab, ac = B - A, C - A
    n = np.cross(ab, ac)
    nn = np.einsum("...i,...i->...", n, n)
    ap = p - A
    # barycentric coordinates of the projection onto the plane
    v = np.einsum("...i,...i->...", np.cross(ap, ac), n) / nn
    w = np.einsum("...i,...i->...", np.cross(ab, ap), n) / nn
    inside = (v >= 0) & (w >= 0) & (v + w <= 1)
    plane = np.abs(np.einsum("...i,...i->...", ap, n)) / np.sqrt(nn)

    def seg(P, Q):
        d = Q - P
        t = np.clip(np.einsum("...i,...i->...", p - P, d) / np.einsum("...i,...i->...", d, d), 0.0, 1.0)
        return np.linalg.norm(p - (P + t[..., None] * d), axis=-1)

    edge = np.minimum(np.minimum(seg(A, B), seg(B, C)), seg(C, A))
    return np.where(inside, plane, edge)


def wall_distance(mesh: TetMesh, points, region: RegionId = RegionId.WALL) -> np.ndarray:
    """Distance of each point to the union of boundary faces carrying ``region``; inf if there are none."""
    P = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    F = mesh.boundary_faces[mesh.faces_with_label(region)]
    if F.shape[0] == 0:
        return np.full(P.shape[0], np.inf)
    X = mesh.vertices
    tri = X[F]
    cen = tri.mean(axis=1)
    reach = float(np.max(np.linalg.norm(tri - cen[:, None, :], axis=2)))
    tree = cKDTree(cen)
    k = min(8, F.shape[0])
    _, cand = tree.query(P, k=k)
    cand = np.asarray(cand).reshape(P.shape[0], k)
    A, B, C = tri[cand, 0], tri[cand, 1], tri[cand, 2]
    upper = _point_triangle_distance(P[:, None, :], A, B, C).min(axis=1)
    out = np.empty(P.shape[0])
    # any triangle closer than the bound has its centroid within bound + reach
    for i, ids in enumerate(tree.query_ball_point(P, upper + reach * (1 + 1e-12))):
        ids = np.asarray(ids, dtype=np.int64)
        d = _point_triangle_distance(P[i], tri[ids, 0], tri[ids, 1], tri[ids, 2])
        out[i] = min(float(d.min()), float(upper[i]))
    return out


# ---------------------------------------------------------------------------
# observation system


@dataclass(frozen=True, eq=False)
class ObservationSystem:
    """Riesz representers ``Z`` (columns), reduced basis ``Phi`` and the PBDW Gram matrices."""

    Z: sp.csc_matrix  # (d, m)
    Phi: np.ndarray  # (d, r)
    centers: np.ndarray | None = None  # (M, 3) voxel centers
    wall_distance: np.ndarray | None = None  # (M,)
    voxel_edge: float | None = None
    diameter: float | None = None
    has_divergence: bool = True
    L: np.ndarray = field(init=False, repr=False)
    K: np.ndarray = field(init=False, repr=False)
    W: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        Z = sp.csc_matrix(self.Z, dtype=np.float64)
        Phi = np.asarray(self.Phi, dtype=np.float64)
        Phi = Phi[:, None] if Phi.ndim == 1 else Phi
        if Phi.shape[0] != Z.shape[0]:
            raise ValueError(f"basis has {Phi.shape[0]} rows, operator has {Z.shape[0]}")
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "Phi", Phi)
        L = np.asarray(Z.T @ Phi)
        K = np.asarray((Z.T @ Z).todense())
        K = 0.5 * (K + K.T)
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "W", K + np.eye(K.shape[0]))

    @classmethod
    def build(cls, mesh: TetMesh, grid: VoxelGrid, Phi, include_divergence: bool = True,
              centers=None) -> "ObservationSystem":
        vox = build_voxel_observations(mesh, grid, centers)
        rows = vox.rows
        if include_divergence:
            rows = sp.vstack([rows, sp.csr_matrix(divergence_row(mesh)[None, :])])
        return cls(rows.T, Phi, vox.centers, wall_distance(mesh, vox.centers), grid.edge,
                   mesh_diameter(mesh.vertices), include_divergence)

    @property
    def m(self) -> int:
        return self.Z.shape[1]

    @property
    def r(self) -> int:
        return self.Phi.shape[1]

    @property
    def n_voxels(self) -> int:
        return (self.m - int(self.has_divergence)) // 3

    def observe(self, u) -> np.ndarray:
        return self.Z.T @ np.asarray(u, dtype=np.float64).reshape(-1)

    def state(self, z, eta) -> np.ndarray:
        return self.Phi @ z + self.Z @ eta

    def drop_rows(self, rows: Sequence[int]) -> "ObservationSystem":
        """Remove scalar observation rows (an infinite-variance observation carries no information)."""
        keep = np.setdiff1d(np.arange(self.m), np.asarray(rows, dtype=np.int64))
        return ObservationSystem(self.Z[:, keep], self.Phi, self.centers, self.wall_distance,
                                 self.voxel_edge, self.diameter, self.has_divergence and (self.m - 1) in keep)


# ---------------------------------------------------------------------------
# noise model


NOISE_PRESETS = {"low": (10.0, 0.5), "medium": (0.4, 0.1), "high": (0.2, 0.05)}


@dataclass(frozen=True)
class NoiseModel:
    """Signal-to-noise ratios plus optional overrides; ``None`` entries take data-dependent defaults."""

    snr_ho: float = 10.0
    snr_he: float = 0.5
    sigma_div2: float | None = None  # default (u_bar * 1e-2)^2
    delta: float | None = None  # boundary layer thickness, default one voxel edge
    l_T: float | None = None  # kernel length, default diameter / 12
    eps2: float = 0.1
    floor: float | None = None  # isotropic floor of the he block, default (u_bar / snr_ho)^2 * 1e-4

    def __post_init__(self):
        for name in ("snr_ho", "snr_he", "eps2", "sigma_div2", "delta", "l_T", "floor"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"noise model parameter {name} must be positive, got {v}")

    @classmethod
    def preset(cls, name: str, **overrides) -> "NoiseModel":
        if name not in NOISE_PRESETS:
            raise ValueError(f"unknown noise preset {name!r}; choose from {sorted(NOISE_PRESETS)}")
        ho, he = NOISE_PRESETS[name]
        return cls(ho, he, **overrides)


@dataclass(frozen=True, eq=False)
class NoiseCovariance:
    S: np.ndarray
    he: np.ndarray  # boolean mask over voxels
    u_bar: float
    floor: float
    sigma_div2: float | None


def noise_covariance(v_obs, centers, he, model: NoiseModel, diameter: float | None = None,
                     with_divergence: bool = True) -> NoiseCovariance:
    """Assemble ``S`` in observation-row order from observed voxel velocities ``v_obs`` (M, 3)."""
    V = np.asarray(v_obs, dtype=np.float64).reshape(-1, 3)
    Cc = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    he = np.asarray(he, dtype=bool).reshape(-1)
    M = V.shape[0]
    if Cc.shape[0] != M or he.size != M:
        raise ValueError("one center and one he flag per voxel are required")
    speed = np.linalg.norm(V, axis=1)
    u_bar = float(speed.mean()) if M else 0.0
    if not u_bar > 0:
        raise ValueError("mean observed speed is zero; the noise scale is undefined")
    var_ho = (u_bar / model.snr_ho) ** 2
    floor = model.floor if model.floor is not None else var_ho * 1e-4
    sdiv = model.sigma_div2 if model.sigma_div2 is not None else (u_bar * 1e-2) ** 2
    m = 3 * M + int(with_divergence)
    S = np.zeros((m, m))
    ho_rows = (3 * np.flatnonzero(~he)[:, None] + np.arange(3)).reshape(-1)
    S[ho_rows, ho_rows] = var_ho
    idx = np.flatnonzero(he)
    if idx.size:
        if model.l_T is not None:
            l_T = model.l_T
        elif diameter is not None:
            l_T = diameter / 12.0
        else:
            raise ValueError("kernel length l_T needs either an explicit value or the domain diameter")
        c = Cc[idx]
        d2 = np.sum((c[:, None, :] - c[None, :, :]) ** 2, axis=2)
        G = np.exp(-d2 / (2.0 * l_T)) + model.eps2 * np.eye(idx.size)
        dirs = np.zeros((idx.size, 3))
        nz = speed[idx] > 0
        dirs[nz] = V[idx[nz]] / speed[idx[nz], None]
        # P C P^T has (i, j) block  G_ij * d_i d_j^T
        block = (u_bar / model.snr_he) ** 2 * np.einsum("ij,ia,jb->iajb", G, dirs, dirs)
        block = block.reshape(3 * idx.size, 3 * idx.size) + floor * np.eye(3 * idx.size)
        he_rows = (3 * idx[:, None] + np.arange(3)).reshape(-1)
        S[np.ix_(he_rows, he_rows)] = block
    if with_divergence:
        S[-1, -1] = sdiv
    S = 0.5 * (S + S.T)
    try:
        np.linalg.cholesky(S)
    except np.linalg.LinAlgError:  # pragma: no cover - the floor rules this out
        raise SingularNormalMatrix("noise covariance", float(np.linalg.cond(S))) from None
    return NoiseCovariance(S, he, u_bar, floor, sdiv if with_divergence else None)


def build_noise_covariance(obs: ObservationSystem, model: NoiseModel, y) -> NoiseCovariance:
    """Noise covariance for ``obs`` using the voxel part of the measurements ``y``."""
    if obs.centers is None or obs.wall_distance is None:
        raise ValueError("observation system carries no voxel geometry")
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.size != obs.m:
        raise ValueError(f"measurement vector has {y.size} entries, expected {obs.m}")
    delta = model.delta if model.delta is not None else obs.voxel_edge
    he = obs.wall_distance < delta
    return noise_covariance(y[: 3 * obs.n_voxels], obs.centers, he, model, obs.diameter, obs.has_divergence)


# ---------------------------------------------------------------------------
# solve


@dataclass(frozen=True, eq=False)
class PbdwSolution:
    z: np.ndarray
    eta: np.ndarray
    state: np.ndarray
    y_err: np.ndarray
    H_z: np.ndarray | None = None  # (r, m)
    H_eta: np.ndarray | None = None  # (m, m)


def _cond_guard(A: np.ndarray, what: str, limit: float = 1e13) -> None:
    c = float(np.linalg.cond(A))
    if not np.isfinite(c) or c > limit:
        raise SingularNormalMatrix(what, c)


def _rank_guard(K: np.ndarray, what: str, limit: float = 1e13) -> None:
    """Condition of ``K`` after symmetric diagonal scaling, so badly scaled rows are not flagged."""
    d = np.sqrt(np.clip(np.diag(K), 0.0, None))
    if np.any(d == 0):
        raise SingularNormalMatrix(what, np.inf)
    _cond_guard(K / np.outer(d, d), what, limit)


def _as_matrix(S) -> np.ndarray:
    return S.S if isinstance(S, NoiseCovariance) else np.asarray(S, dtype=np.float64)


def pbdw_solve(obs: ObservationSystem, S, y, keep_factors: bool = True) -> PbdwSolution:
    """Two-stage estimate: generalized least squares for ``z``, then the measurement-space correction."""
    S = _as_matrix(S)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if S.shape != (obs.m, obs.m) or y.size != obs.m:
        raise ValueError(f"S must be {obs.m}x{obs.m} and y of length {obs.m}")
    L, K, W = obs.L, obs.K, obs.W
    cS = sla.cho_factor(S)
    cW = sla.cho_factor(W)
    # S^{-1} W^{-1} L and W^{-1} S^{-1} L, so that L^T S^{-1} W^{-1} = (W^{-1} S^{-1} L)^T
    SWL = sla.cho_solve(cS, sla.cho_solve(cW, L))
    WSL = sla.cho_solve(cW, sla.cho_solve(cS, L))
    G = L.T @ SWL
    _cond_guard(G, "reduced normal matrix L^T S^-1 W^-1 L")
    luG = sla.lu_factor(G)
    H_z = sla.lu_solve(luG, WSL.T)
    z = H_z @ y
    y_err = y - L @ z
    # the eta stationarity condition K S^-1 (W eta - y_err) = 0 reduces to W eta = y_err for nonsingular K
    _rank_guard(K, "observation Gram matrix K")
    H_eta = sla.cho_solve(cW, np.eye(obs.m)) if keep_factors else None
    eta = sla.cho_solve(cW, y_err)
    return PbdwSolution(z, eta, obs.state(z, eta), y_err, H_z if keep_factors else None, H_eta)


@dataclass(frozen=True, eq=False)
class StateCovariance:
    H_u: np.ndarray  # (d, m)
    trace: float
    Sigma: np.ndarray | None = None


def estimator_matrix(obs: ObservationSystem, sol: PbdwSolution) -> np.ndarray:
    """``H_u`` with ``state = H_u @ y``."""
    if sol.H_z is None or sol.H_eta is None:
        raise ValueError("solution was computed without keeping the H factors")
    ZH = obs.Z @ sol.H_eta
    return obs.Phi @ sol.H_z + ZH - ZH @ (obs.L @ sol.H_z)


def pbdw_state_covariance(obs: ObservationSystem, S, sol: PbdwSolution, full: bool | None = None,
                          max_full: int = 10_000) -> StateCovariance:
    """Covariance ``H_u S H_u^T`` of the reconstructed state and its trace (the noise error)."""
    S = _as_matrix(S)
    H = estimator_matrix(obs, sol)
    d = H.shape[0]
    Lc = np.linalg.cholesky(S)
    HL = H @ Lc
    trace = float(np.sum(HL * HL))
    if full is None:
        full = d <= max_full
    if full and d > max_full:
        raise MemoryError(f"full state covariance of dimension {d} exceeds the limit {max_full}")
    return StateCovariance(H, trace, HL @ HL.T if full else None)
