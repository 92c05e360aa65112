"""P1 tetrahedral finite elements and pressure estimators.

Velocity degrees of freedom are node-interleaved: component ``a`` of node ``i``
lives at index ``3*i + a``. All element integrals are exact for P1 data.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Mapping

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import cKDTree

from .mesh import MeshError, RegionId

RHO_BLOOD = 1.06e3  # kg/m^3
MU_BLOOD = 3.5e-3  # Pa s
TAU_DEFAULT = 0.025  # s


class SolverError(RuntimeError):
    pass


class OutsideDomainWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# mesh


_TET_FACES = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])  # opposite vertex = row index


@dataclass(frozen=True, eq=False)
class TetMesh:
    vertices: np.ndarray
    tets: np.ndarray
    boundary_faces: np.ndarray
    boundary_labels: np.ndarray
    sections: Mapping[str, np.ndarray] = field(default_factory=dict)
    validate: bool = True

    def __post_init__(self):
        V = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        T = np.ascontiguousarray(self.tets, dtype=np.int64).reshape(-1, 4)
        F = np.ascontiguousarray(self.boundary_faces, dtype=np.int64).reshape(-1, 3)
        L = np.ascontiguousarray(self.boundary_labels, dtype=np.int64).reshape(-1)
        object.__setattr__(self, "vertices", V)
        object.__setattr__(self, "tets", T)
        object.__setattr__(self, "boundary_faces", F)
        object.__setattr__(self, "boundary_labels", L)
        object.__setattr__(self, "sections",
                           {k: np.asarray(v, dtype=np.int64) for k, v in dict(self.sections).items()})
        if T.size and (T.min() < 0 or T.max() >= V.shape[0]):
            raise MeshError("tet vertex index out of range")
        if F.shape[0] != L.shape[0]:
            raise MeshError("boundary_labels must have one entry per boundary face")
        if L.size and (L.min() < 0 or L.max() > max(RegionId)):
            raise MeshError("unknown boundary region id")
        bad = np.flatnonzero(self.volumes <= 0)
        if bad.size:
            raise MeshError(f"tet {int(bad[0])} is inverted or degenerate (volume {self.volumes[bad[0]]:.3e})")
        if self.validate:
            self.boundary_owner  # raises on orphan faces

    # -- geometry caches -------------------------------------------------
    @cached_property
    def _jac(self) -> np.ndarray:
        X = self.vertices[self.tets]
        return X[:, 1:, :] - X[:, :1, :]  # rows are edge vectors

    @cached_property
    def volumes(self) -> np.ndarray:
        return np.linalg.det(self._jac) / 6.0

    @cached_property
    def grads(self) -> np.ndarray:
        """Constant barycentric gradients, shape (n_tets, 4, 3)."""
        J = self._jac
        # x - X0 = J^T xi  ->  grad xi_k = k-th column of J^{-1}
        Jinv = np.linalg.inv(J)
        g = np.empty((J.shape[0], 4, 3))
        g[:, 1:, :] = np.transpose(Jinv, (0, 2, 1))
        g[:, 0, :] = -g[:, 1:, :].sum(axis=1)
        return g

    @cached_property
    def h(self) -> np.ndarray:
        """Element diameter (longest edge)."""
        X = self.vertices[self.tets]
        pairs = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
        return np.max(np.stack([np.linalg.norm(X[:, a] - X[:, b], axis=1) for a, b in pairs]), axis=0)

    @property
    def n_nodes(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_tets(self) -> int:
        return self.tets.shape[0]

    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        return np.unique(self.boundary_faces)

    @cached_property
    def interior_nodes(self) -> np.ndarray:
        mask = np.ones(self.n_nodes, dtype=bool)
        mask[self.boundary_nodes] = False
        return np.flatnonzero(mask)

    @cached_property
    def boundary_owner(self) -> np.ndarray:
        """Owning tet of every boundary face; raises unless each has exactly one."""
        faces = self.tets[:, _TET_FACES].reshape(-1, 3)
        owner = np.repeat(np.arange(self.n_tets), 4)
        key_all = np.sort(faces, axis=1)
        table: dict[tuple[int, int, int], list[int]] = {}
        for k, t in zip(map(tuple, key_all), owner):
            table.setdefault(k, []).append(int(t))
        out = np.empty(self.boundary_faces.shape[0], dtype=np.int64)
        for fi, f in enumerate(np.sort(self.boundary_faces, axis=1)):
            own = table.get(tuple(int(x) for x in f), [])
            if len(own) != 1:
                raise MeshError(f"boundary face {fi} belongs to {len(own)} tets (expected exactly 1)")
            out[fi] = own[0]
        return out

    @cached_property
    def boundary_normals(self) -> np.ndarray:
        """Outward unit normals of the boundary faces (pointing away from the owning tet)."""
        X = self.vertices
        F = self.boundary_faces
        n = np.cross(X[F[:, 1]] - X[F[:, 0]], X[F[:, 2]] - X[F[:, 0]])
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        cen = X[self.tets[self.boundary_owner]].mean(axis=1)
        flip = np.einsum("ij,ij->i", n, X[F[:, 0]] - cen) < 0
        n[flip] *= -1
        return n

    @cached_property
    def boundary_areas(self) -> np.ndarray:
        return triangle_areas(self.vertices, self.boundary_faces)

    def faces_with_label(self, region: RegionId) -> np.ndarray:
        return np.flatnonzero(self.boundary_labels == int(region))

    def section_triangles(self, name: str) -> np.ndarray:
        """Triangles of a named section; integer entries index the boundary faces."""
        s = self.sections[name]
        return self.boundary_faces[s] if s.ndim == 1 else s

    # -- point location --------------------------------------------------
    @cached_property
    def _centroid_tree(self) -> cKDTree:
        return cKDTree(self.vertices[self.tets].mean(axis=1))

    @cached_property
    def _reach(self) -> float:
        X = self.vertices[self.tets]
        c = X.mean(axis=1, keepdims=True)
        return float(np.max(np.linalg.norm(X - c, axis=2)))

    def _bary(self, tet_ids: np.ndarray, pts: np.ndarray) -> np.ndarray:
        X0 = self.vertices[self.tets[tet_ids, 0]]
        g = self.grads[tet_ids]
        lam = np.einsum("...kj,...j->...k", g[..., 1:, :], pts - X0)
        return np.concatenate([1.0 - lam.sum(axis=-1, keepdims=True), lam], axis=-1)

    def locate(self, points, tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
        """Containing tet (-1 when outside) and barycentric coordinates per point."""
        P = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        n = P.shape[0]
        tet = np.full(n, -1, dtype=np.int64)
        bary = np.zeros((n, 4))
        if n == 0:
            return tet, bary
        k = min(16, self.n_tets)
        _, cand = self._centroid_tree.query(P, k=k)
        cand = np.asarray(cand).reshape(n, k)
        lam = self._bary(cand, P[:, None, :])
        score = lam.min(axis=2)
        best = np.argmax(score, axis=1)
        ok = score[np.arange(n), best] >= -tol
        tet[ok] = cand[ok, best[ok]]
        bary[ok] = lam[ok, best[ok]]
        for i in np.flatnonzero(~ok):
            ids = np.asarray(self._centroid_tree.query_ball_point(P[i], self._reach * (1 + 1e-9)), dtype=np.int64)
            if ids.size == 0:
                continue
            lam_i = self._bary(ids, P[i][None, :])
            s = lam_i.min(axis=1)
            j = int(np.argmax(s))
            if s[j] >= -tol:
                tet[i] = ids[j]
                bary[i] = lam_i[j]
        return tet, bary

    def contains(self, points, tol: float = 1e-10) -> np.ndarray:
        return self.locate(points, tol)[0] >= 0

    # -- refinement ------------------------------------------------------
    def refine(self) -> "TetMesh":
        """Red (midpoint) refinement: every tet into 8, every boundary face and section triangle into 4."""
        T = self.tets
        pairs = np.array([(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)])
        edges = np.sort(T[:, pairs].reshape(-1, 2), axis=1)
        uniq, inv = np.unique(edges, axis=0, return_inverse=True)
        inv = inv.reshape(-1, 6) + self.n_nodes
        V = np.concatenate([self.vertices, 0.5 * (self.vertices[uniq[:, 0]] + self.vertices[uniq[:, 1]])])
        x0, x1, x2, x3 = T.T
        m01, m02, m03, m12, m13, m23 = inv.T
        kids = np.concatenate([
            np.stack([x0, m01, m02, m03], 1), np.stack([m01, x1, m12, m13], 1),
            np.stack([m02, m12, x2, m23], 1), np.stack([m03, m13, m23, x3], 1),
            np.stack([m01, m02, m03, m13], 1), np.stack([m01, m02, m12, m13], 1),
            np.stack([m02, m03, m13, m23], 1), np.stack([m02, m12, m13, m23], 1),
        ])
        kids = _orient_positive(V, kids)
        emap = {(int(a), int(b)): int(i) + self.n_nodes for i, (a, b) in enumerate(uniq)}
        mid = lambda a, b: emap[(min(a, b), max(a, b))]  # noqa: E731
        F, L = [], []
        for (a, b, c), lab in zip(self.boundary_faces.tolist(), self.boundary_labels.tolist()):
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            F += [[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]
            L += [lab] * 4
        sections = {}
        for name, sec in self.sections.items():
            if sec.ndim == 1:  # boundary face ids: face i became faces 4i..4i+3
                sections[name] = (4 * sec[:, None] + np.arange(4)).ravel()
            else:
                sections[name] = np.array([t for a, b, c in sec.tolist() for t in (
                    [a, mid(a, b), mid(c, a)], [mid(a, b), b, mid(b, c)],
                    [mid(c, a), mid(b, c), c], [mid(a, b), mid(b, c), mid(c, a)])])
        return TetMesh(V, kids, np.array(F), np.array(L), sections, validate=self.validate)


def _orient_positive(V: np.ndarray, T: np.ndarray) -> np.ndarray:
    X = V[T]
    det = np.linalg.det(X[:, 1:] - X[:, :1])
    T = T.copy()
    neg = det < 0
    T[neg, 0], T[neg, 1] = T[neg, 1].copy(), T[neg, 0].copy()
    return T


def triangle_areas(V: np.ndarray, F: np.ndarray) -> np.ndarray:
    F = np.asarray(F, dtype=np.int64).reshape(-1, 3)
    return 0.5 * np.linalg.norm(np.cross(V[F[:, 1]] - V[F[:, 0]], V[F[:, 2]] - V[F[:, 0]]), axis=1)


def extract_boundary(tets: np.ndarray) -> np.ndarray:
    """Faces that belong to exactly one tet, oriented with the opposite vertex on the left."""
    faces = tets[:, _TET_FACES].reshape(-1, 3)
    key = np.sort(faces, axis=1)
    _, inv, cnt = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    return faces[cnt[inv.reshape(-1)] == 1]


def box_mesh(n: int = 2, lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0), labeler=None) -> TetMesh:
    """Kuhn (6 tets per cube) triangulation of a box with ``n`` cells per side.

    ``labeler(centroids) -> region ids`` labels the boundary faces (all WALL by default).
    """
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    g = np.linspace(0, 1, n + 1)
    X, Y, Z = np.meshgrid(g, g, g, indexing="ij")
    V = lo + (hi - lo) * np.stack([X.ravel(), Y.ravel(), Z.ravel()], 1)
    idx = lambda i, j, k: (i * (n + 1) + j) * (n + 1) + k  # noqa: E731
    tets = []
    perms = [(0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)]
    for i in range(n):
        for j in range(n):
            for k in range(n):
                base = np.array([i, j, k])
                for p in perms:
                    path = [base.copy()]
                    cur = base.copy()
                    for ax in p:
                        cur = cur.copy()
                        cur[ax] += 1
                        path.append(cur)
                    tets.append([idx(*c) for c in path])
    T = _orient_positive(V, np.array(tets, dtype=np.int64))
    F = extract_boundary(T)
    if labeler is None:
        L = np.full(F.shape[0], int(RegionId.WALL))
    else:
        L = np.asarray(labeler(V[F].mean(axis=1)), dtype=np.int64)
    return TetMesh(V, T, F, L)


def load_tet_mesh(path: str | Path) -> TetMesh:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MeshError(f"{path}: invalid JSON ({exc})") from exc
    for key in ("vertices", "tets", "boundary_faces", "boundary_labels"):
        if key not in doc:
            raise MeshError(f"{path}: missing key {key!r}")
    labels = [RegionId.parse(x) if isinstance(x, str) else int(x) for x in doc["boundary_labels"]]
    return TetMesh(np.array(doc["vertices"], float), np.array(doc["tets"], np.int64),
                   np.array(doc["boundary_faces"], np.int64).reshape(-1, 3), np.array(labels, np.int64),
                   doc.get("sections", {}))


def save_tet_mesh(mesh: TetMesh, path: str | Path) -> None:
    doc = {
        "vertices": mesh.vertices.tolist(),
        "tets": mesh.tets.tolist(),
        "boundary_faces": mesh.boundary_faces.tolist(),
        "boundary_labels": [RegionId(int(k)).label for k in mesh.boundary_labels],
        "sections": {k: v.tolist() for k, v in mesh.sections.items()},
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


# ---------------------------------------------------------------------------
# fields


@dataclass
class FemField:
    """Nodal P1 values: shape (n,) for scalars, (n, 3) for vectors."""

    mesh: TetMesh
    values: np.ndarray
    time: float | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 1 and v.size == 3 * self.mesh.n_nodes and v.size != self.mesh.n_nodes:
            v = v.reshape(-1, 3)
        if v.shape[0] != self.mesh.n_nodes:
            raise ValueError(f"field has {v.shape[0]} nodal rows, mesh has {self.mesh.n_nodes} nodes")
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")
        self.values = v

    @property
    def is_vector(self) -> bool:
        return self.values.ndim == 2

    @property
    def dofs(self) -> np.ndarray:
        return self.values.reshape(-1)

    def evaluate(self, points, outside: str = "nan") -> np.ndarray:
        """Interpolate at arbitrary points; ``outside`` is 'nan', 'nearest' or 'raise'."""
        P = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        tet, bary = self.mesh.locate(P)
        miss = tet < 0
        out_shape = (P.shape[0],) + self.values.shape[1:]
        out = np.full(out_shape, np.nan)
        ok = ~miss
        if ok.any():
            out[ok] = np.einsum("pk,pk...->p...", bary[ok], self.values[self.mesh.tets[tet[ok]]])
        if miss.any():
            if outside == "raise":
                raise ValueError(f"point {int(np.flatnonzero(miss)[0])} lies outside the mesh")
            if outside == "nearest":
                warnings.warn(OutsideDomainWarning(
                    f"{int(miss.sum())} point(s) outside the domain; using the nearest node value"),
                    stacklevel=2)
                _, nn = cKDTree(self.mesh.vertices).query(P[miss])
                out[miss] = self.values[nn]
        return out

    def tet_gradients(self) -> np.ndarray:
        """Per-tet gradient ``G[a, b] = d u_b / d x_a`` (vector) or ``grad p`` (scalar)."""
        vals = self.values[self.mesh.tets]
        if self.is_vector:
            return np.einsum("tja,tjb->tab", self.mesh.grads, vals)
        return np.einsum("tja,tj->ta", self.mesh.grads, vals)


# ---------------------------------------------------------------------------
# assembly


@dataclass(frozen=True)
class P1Operators:
    stiffness: sp.csr_matrix  # scalar, (n, n)
    mass: sp.csr_matrix  # scalar, (n, n)
    vector_stiffness: sp.csr_matrix  # (3n, 3n)
    vector_mass: sp.csr_matrix  # (3n, 3n)
    divergence: sp.csr_matrix  # (n, 3n): int q div w
    stabilization: sp.csr_matrix  # (n, n): sum h_K^2 int grad p . grad q
    lumped_mass: np.ndarray  # (n,): int phi_i


def _scatter(mesh: TetMesh, local: np.ndarray, rows_per_node: int = 1, cols_per_node: int = 1,
             shape=None) -> sp.csr_matrix:
    """Sum element matrices of shape (nt, 4*r, 4*c) with node-interleaved offsets."""
    T = mesh.tets
    ri = (T[:, :, None] * rows_per_node + np.arange(rows_per_node)).reshape(T.shape[0], -1)
    ci = (T[:, :, None] * cols_per_node + np.arange(cols_per_node)).reshape(T.shape[0], -1)
    R = np.broadcast_to(ri[:, :, None], local.shape)
    C = np.broadcast_to(ci[:, None, :], local.shape)
    if shape is None:
        shape = (mesh.n_nodes * rows_per_node, mesh.n_nodes * cols_per_node)
    return sp.coo_matrix((local.ravel(), (R.ravel(), C.ravel())), shape=shape).tocsr()


def element_stiffness(mesh: TetMesh) -> np.ndarray:
    return mesh.volumes[:, None, None] * np.einsum("tia,tja->tij", mesh.grads, mesh.grads)


def element_mass(mesh: TetMesh) -> np.ndarray:
    base = (np.ones((4, 4)) + np.eye(4)) / 20.0
    return mesh.volumes[:, None, None] * base


def assemble_p1(mesh: TetMesh) -> P1Operators:
    Ke = element_stiffness(mesh)
    Me = element_mass(mesh)
    I3 = np.eye(3)
    Kv = np.einsum("tij,ab->tiajb", Ke, I3).reshape(mesh.n_tets, 12, 12)
    Mv = np.einsum("tij,ab->tiajb", Me, I3).reshape(mesh.n_tets, 12, 12)
    # int_K phi_i d_a phi_j = |K|/4 d_a phi_j
    De = (mesh.volumes[:, None, None, None] / 4.0) * np.broadcast_to(
        mesh.grads[:, None, :, :], (mesh.n_tets, 4, 4, 3))
    De = De.reshape(mesh.n_tets, 4, 12)
    Se = (mesh.h**2)[:, None, None] * Ke
    lumped = np.zeros(mesh.n_nodes)
    np.add.at(lumped, mesh.tets.ravel(), np.repeat(mesh.volumes / 4.0, 4))
    return P1Operators(
        stiffness=_scatter(mesh, Ke),
        mass=_scatter(mesh, Me),
        vector_stiffness=_scatter(mesh, Kv, 3, 3),
        vector_mass=_scatter(mesh, Mv, 3, 3),
        divergence=_scatter(mesh, De, 1, 3),
        stabilization=_scatter(mesh, Se),
        lumped_mass=lumped,
    )


def _vec(u, mesh: TetMesh) -> np.ndarray:
    if isinstance(u, FemField):
        u = u.values
    u = np.asarray(u, dtype=np.float64)
    if u.size != 3 * mesh.n_nodes:
        raise ValueError(f"velocity has {u.size} entries, expected {3 * mesh.n_nodes}")
    return u.reshape(mesh.n_nodes, 3)


def _convection(mesh: TetMesh, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-tet gradient G (nt,3,3) and centroid value of u.grad u (nt,3)."""
    vals = u[mesh.tets]
    G = np.einsum("tja,tjb->tab", mesh.grads, vals)
    uc = vals.mean(axis=1)
    return G, np.einsum("ta,tab->tb", uc, G)


def rhs_against_gradient(mesh: TetMesh, F_tet: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    """``sum_K w_K |K| F_K . grad phi_i`` for a per-tet constant vector field."""
    w = mesh.volumes if weights is None else mesh.volumes * weights
    contrib = w[:, None] * np.einsum("tb,tib->ti", F_tet, mesh.grads)
    out = np.zeros(mesh.n_nodes)
    np.add.at(out, mesh.tets.ravel(), contrib.ravel())
    return out


def ppe_rhs(mesh: TetMesh, u_n, u_half, u_next, tau: float = TAU_DEFAULT, rho: float = RHO_BLOOD) -> np.ndarray:
    if tau <= 0:
        raise ValueError("tau must be > 0")
    un, uh, up = _vec(u_n, mesh), _vec(u_half, mesh), _vec(u_next, mesh)
    du_c = (up - un)[mesh.tets].mean(axis=1)  # (u_{n+1}-u_n) is affine: centroid rule is exact
    _, conv = _convection(mesh, uh)
    return rhs_against_gradient(mesh, -rho / tau * du_c - rho * conv)


def _solve_spd(A: sp.spmatrix, b: np.ndarray) -> np.ndarray:
    try:
        x = spla.spsolve(A.tocsc(), b)
    except RuntimeError as exc:  # SuperLU singular factor
        raise SolverError(f"sparse solve failed: {exc}") from exc
    x = np.atleast_1d(x)
    if not np.all(np.isfinite(x)):
        raise SolverError("sparse solve returned non-finite values (singular system?)")
    return x


def solve_dirichlet_scalar(mesh: TetMesh, ops: P1Operators, rhs: np.ndarray) -> np.ndarray:
    """Solve ``A p = rhs`` for p = 0 on every boundary node."""
    free = mesh.interior_nodes
    p = np.zeros(mesh.n_nodes)
    if free.size:
        A = ops.stiffness[free][:, free]
        p[free] = _solve_spd(A, rhs[free])
    return p


def ppe_solve(mesh: TetMesh, u_n, u_half, u_next, tau: float = TAU_DEFAULT, rho: float = RHO_BLOOD,
              mu: float = MU_BLOOD, ops: P1Operators | None = None) -> FemField:
    """Pressure-Poisson estimator with homogeneous Dirichlet pressure on the whole boundary.
    ``mu`` does not enter (the viscous term drops out against gradients of P1 tests)."""
    ops = ops or assemble_p1(mesh)
    return FemField(mesh, solve_dirichlet_scalar(mesh, ops, ppe_rhs(mesh, u_n, u_half, u_next, tau, rho)))


def ste_rhs(mesh: TetMesh, ops: P1Operators, u_n, u_half, u_next, tau: float = TAU_DEFAULT,
            rho: float = RHO_BLOOD, mu: float = MU_BLOOD, c_s: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Momentum (3n) and continuity (n) right-hand sides of the Stokes estimator.

    The Laplacian of a P1 velocity vanishes inside each element, so only the
    convective part of the stabilization right-hand side survives.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    un, uh, up = _vec(u_n, mesh), _vec(u_half, mesh), _vec(u_next, mesh)
    du = (up - un).reshape(-1)
    mom = -rho / tau * (ops.vector_mass @ du)
    G, conv_c = _convection(mesh, uh)
    # int_K phi_i (u.grad u)_b : u.grad u is linear inside K, so use the element mass
    nodal_conv = np.einsum("tja,tab->tjb", uh[mesh.tets], G)  # (u.grad u) at the 4 nodes
    Me = element_mass(mesh)
    loc = np.einsum("tij,tjb->tib", Me, nodal_conv)
    conv = np.zeros((mesh.n_nodes, 3))
    np.add.at(conv, mesh.tets.ravel(), loc.reshape(-1, 3))
    mom = mom - rho * conv.reshape(-1) - mu * (ops.vector_stiffness @ uh.reshape(-1))
    cont = rhs_against_gradient(mesh, -rho * conv_c, weights=c_s * mesh.h**2)
    return mom, cont


def _stokes_matrix(mesh: TetMesh, ops: P1Operators, c_s: float, stabilized: bool = True):
    """Bordered saddle-point matrix on (interior velocity dofs, all pressures, mean multiplier)."""
    vfree = (mesh.interior_nodes[:, None] * 3 + np.arange(3)).ravel()
    A = ops.vector_stiffness[vfree][:, vfree]
    D = ops.divergence[:, vfree]
    S = c_s * ops.stabilization if stabilized else sp.csr_matrix((mesh.n_nodes, mesh.n_nodes))
    m = sp.csr_matrix(ops.lumped_mass[None, :])
    K = sp.bmat([[A, -D.T, None], [D, S, m.T], [None, m, None]], format="csc")
    return K, vfree


def _solve_stokes(mesh: TetMesh, ops: P1Operators, mom: np.ndarray, cont: np.ndarray, c_s: float,
                  stabilized: bool = True) -> tuple[np.ndarray, np.ndarray]:
    K, vfree = _stokes_matrix(mesh, ops, c_s, stabilized)
    rhs = np.concatenate([mom[vfree], cont, [0.0]])
    try:
        lu = spla.splu(K)
    except RuntimeError as exc:
        raise SolverError(f"Stokes saddle-point factorization failed: {exc}") from exc
    x = lu.solve(rhs)
    if not np.all(np.isfinite(x)):
        raise SolverError("Stokes solve returned non-finite values")
    w = np.zeros(3 * mesh.n_nodes)
    w[vfree] = x[: vfree.size]
    p = x[vfree.size : vfree.size + mesh.n_nodes]
    return w, p


def ste_solve(mesh: TetMesh, u_n, u_half, u_next, tau: float = TAU_DEFAULT, rho: float = RHO_BLOOD,
              mu: float = MU_BLOOD, c_s: float = 1.0, ops: P1Operators | None = None) -> tuple[FemField, FemField]:
    """Stabilized Stokes estimator; w = 0 on the boundary and the pressure has zero mean."""
    if c_s <= 0:
        raise ValueError("C_s must be > 0")
    ops = ops or assemble_p1(mesh)
    mom, cont = ste_rhs(mesh, ops, u_n, u_half, u_next, tau, rho, mu, c_s)
    w, p = _solve_stokes(mesh, ops, mom, cont, c_s)
    return FemField(mesh, w.reshape(-1, 3)), FemField(mesh, p)


# ---------------------------------------------------------------------------
# bias corrections


class BlockCovariance:
    """3x3 covariance blocks for mesh-adjacent node pairs (including i == j)."""

    def __init__(self, blocks: Mapping[tuple[int, int], np.ndarray] | None = None):
        self._b: dict[tuple[int, int], np.ndarray] = {}
        for (i, j), B in (blocks or {}).items():
            self._b[(int(i), int(j))] = np.asarray(B, dtype=np.float64).reshape(3, 3)

    def block(self, i: int, j: int) -> np.ndarray:
        if (i, j) in self._b:
            return self._b[(i, j)]
        if (j, i) in self._b:
            return self._b[(j, i)].T
        raise KeyError(f"missing covariance block for node pair ({i}, {j})")

    def scaled(self, c: float) -> "BlockCovariance":
        return BlockCovariance({k: c * v for k, v in self._b.items()})

    def __add__(self, other: "BlockCovariance") -> "BlockCovariance":
        keys = set(self._b) | set(other._b)
        out = {}
        for i, j in keys:
            a = self.block(i, j) if (i, j) in self._b or (j, i) in self._b else 0.0
            b = other.block(i, j) if (i, j) in other._b or (j, i) in other._b else 0.0
            out[(i, j)] = a + b
        return BlockCovariance(out)

    @classmethod
    def from_dense(cls, mesh: TetMesh, Sigma: np.ndarray) -> "BlockCovariance":
        Sigma = np.asarray(Sigma, dtype=np.float64)
        blocks = {}
        for t in mesh.tets:
            for i in t:
                for j in t:
                    if (int(i), int(j)) not in blocks:
                        blocks[(int(i), int(j))] = Sigma[3 * i : 3 * i + 3, 3 * j : 3 * j + 3]
        return cls(blocks)

    def element_blocks(self, mesh: TetMesh) -> np.ndarray:
        """Array (nt, 4, 4, 3, 3) of the blocks for every node pair of every tet."""
        out = np.empty((mesh.n_tets, 4, 4, 3, 3))
        for t, nodes in enumerate(mesh.tets.tolist()):
            for a, i in enumerate(nodes):
                for b, j in enumerate(nodes):
                    out[t, a, b] = self.block(i, j)
        return out


def bias_rhs(mesh: TetMesh, Sigma: BlockCovariance, rho: float = RHO_BLOOD, mode: str = "ppe") -> np.ndarray:
    """Right-hand side of the bias problem.

    The expected convection of a zero-mean P1 perturbation with node covariance
    blocks is ``sum_ij phi_i (Sigma_ij^T grad phi_j)``; only pairs sharing an
    element contribute. PPE mode tests against pressure gradients (length n),
    STE mode against vector hats (length 3n).
    """
    Sb = Sigma.element_blocks(mesh)
    g = mesh.grads
    # v[t, i, j, a] = sum_b d_b phi_j Sigma_ij[b, a]
    v = np.einsum("tjb,tijba->tija", g, Sb)
    if mode == "ppe":
        s = v.sum(axis=2)  # (t, i, a): sum over j
        # int_K phi_i = |K|/4, tested with grad phi_q
        per_q = -rho * (mesh.volumes / 4.0)[:, None] * np.einsum("tia,tqa->tq", s, g)
        out = np.zeros(mesh.n_nodes)
        np.add.at(out, mesh.tets.ravel(), per_q.ravel())
        return out
    if mode == "ste":
        Me = element_mass(mesh)  # int phi_i phi_q
        per_q = rho * np.einsum("tiq,tia->tqa", Me, v.sum(axis=2))
        out = np.zeros((mesh.n_nodes, 3))
        np.add.at(out, mesh.tets.ravel(), per_q.reshape(-1, 3))
        return out.reshape(-1)
    raise ValueError(f"mode must be 'ppe' or 'ste', got {mode!r}")


def bias_correction(mesh: TetMesh, Sigma: BlockCovariance, rho: float = RHO_BLOOD, mode: str = "ppe",
                    c_s: float = 1.0, ops: P1Operators | None = None):
    """Bias correction field: scalar b for PPE, (w, b) for STE.

    The STE variant is solved with the same pressure stabilization as the
    estimator itself, since unstabilized equal-order P1/P1 is not inf-sup stable.
    """
    ops = ops or assemble_p1(mesh)
    r = bias_rhs(mesh, Sigma, rho, mode)
    if mode == "ppe":
        return FemField(mesh, solve_dirichlet_scalar(mesh, ops, r))
    w, b = _solve_stokes(mesh, ops, r, np.zeros(mesh.n_nodes), c_s)
    return FemField(mesh, w.reshape(-1, 3)), FemField(mesh, b)


# ---------------------------------------------------------------------------
# reduced-order models


def _orth(M: np.ndarray, what: str, rtol: float = 1e-10, allow_drop: bool = False) -> np.ndarray:
    if M.shape[1] == 0:
        return M
    U, s, _ = np.linalg.svd(M, full_matrices=False)
    keep = s > rtol * max(s[0], 1e-300)
    if not allow_drop and not keep.all():
        raise SolverError(f"rank loss while orthonormalizing the {what} basis "
                          f"({int(keep.sum())} of {M.shape[1]} directions independent)")
    return U[:, keep]


@dataclass
class ReducedPPE:
    mesh: TetMesh
    ops: P1Operators
    basis: np.ndarray  # interior-node rows
    A_r: np.ndarray
    tau: float
    rho: float

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    def solve(self, u_n, u_half, u_next) -> FemField:
        rhs = ppe_rhs(self.mesh, u_n, u_half, u_next, self.tau, self.rho)[self.mesh.interior_nodes]
        z = np.linalg.solve(self.A_r, self.basis.T @ rhs)
        p = np.zeros(self.mesh.n_nodes)
        p[self.mesh.interior_nodes] = self.basis @ z
        return FemField(self.mesh, p)


@dataclass
class ReducedSTE:
    mesh: TetMesh
    ops: P1Operators
    V: np.ndarray  # velocity basis on interior velocity dofs (incl. supremizers)
    Q: np.ndarray  # mean-zero pressure basis on all nodes
    K_r: np.ndarray
    vfree: np.ndarray
    tau: float
    rho: float
    mu: float
    c_s: float

    @property
    def dim(self) -> int:
        return self.K_r.shape[0]

    def solve(self, u_n, u_half, u_next) -> tuple[FemField, FemField]:
        mom, cont = ste_rhs(self.mesh, self.ops, u_n, u_half, u_next, self.tau, self.rho, self.mu, self.c_s)
        b = np.concatenate([self.V.T @ mom[self.vfree], self.Q.T @ cont])
        x = np.linalg.solve(self.K_r, b)
        rv = self.V.shape[1]
        w = np.zeros(3 * self.mesh.n_nodes)
        w[self.vfree] = self.V @ x[:rv]
        p = self.Q @ x[rv:]
        return FemField(self.mesh, w.reshape(-1, 3)), FemField(self.mesh, p)


def rom_project_ppe(mesh: TetMesh, Phi_p: np.ndarray, tau: float = TAU_DEFAULT, rho: float = RHO_BLOOD,
                    ops: P1Operators | None = None) -> ReducedPPE:
    ops = ops or assemble_p1(mesh)
    Phi = np.asarray(Phi_p, dtype=np.float64).reshape(mesh.n_nodes, -1)[mesh.interior_nodes]
    Phi = _orth(Phi, "pressure")
    A = ops.stiffness[mesh.interior_nodes][:, mesh.interior_nodes]
    return ReducedPPE(mesh, ops, Phi, Phi.T @ (A @ Phi), tau, rho)


def rom_project_ste(mesh: TetMesh, Phi_u: np.ndarray, Phi_p: np.ndarray, enrich: bool = True,
                    tau: float = TAU_DEFAULT, rho: float = RHO_BLOOD, mu: float = MU_BLOOD, c_s: float = 1.0,
                    ops: P1Operators | None = None) -> ReducedSTE:
    """Galerkin projection of the stabilized Stokes estimator.

    The pressure basis is projected onto zero-mean fields (a constant mode is the
    kernel of the operator and is dropped). With ``enrich`` the velocity basis is
    augmented by one supremizer per pressure mode, so the reduced system has
    ``r_u + 2 r_p`` unknowns.
    """
    ops = ops or assemble_p1(mesh)
    K, vfree = _stokes_matrix(mesh, ops, c_s)
    nv = vfree.size
    A = K[:nv, :nv]
    D = ops.divergence[:, vfree]
    Vu = np.asarray(Phi_u, dtype=np.float64).reshape(3 * mesh.n_nodes, -1)[vfree]
    P = np.asarray(Phi_p, dtype=np.float64).reshape(mesh.n_nodes, -1)
    m = ops.lumped_mass
    P = P - np.outer(np.ones(mesh.n_nodes), m @ P) / m.sum()
    Q = _orth(P, "pressure", allow_drop=True)
    cols = [Vu]
    if enrich and Q.shape[1]:
        lu = spla.splu(A.tocsc())
        sup = lu.solve(np.asarray((-D.T) @ Q))  # A s = B p with B = -D^T the pressure-gradient operator
        cols.append(sup.reshape(nv, -1))
    V = _orth(np.concatenate(cols, axis=1), "velocity")
    S = c_s * ops.stabilization
    top = np.concatenate([V.T @ (A @ V), -(V.T @ (D.T @ Q))], axis=1)
    bot = np.concatenate([Q.T @ (D @ V), Q.T @ (S @ Q)], axis=1)
    return ReducedSTE(mesh, ops, V, Q, np.concatenate([top, bot]), vfree, tau, rho, mu, c_s)


# ---------------------------------------------------------------------------
# sections


def section_mean(mesh: TetMesh, p, triangles: np.ndarray) -> float:
    tri = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    a = triangle_areas(mesh.vertices, tri)
    tot = a.sum()
    if not tot > 0:
        raise ValueError("section has zero total area")
    vals = p.values if isinstance(p, FemField) else np.asarray(p, dtype=np.float64)
    return float(np.sum(a * vals[tri].mean(axis=1)) / tot)


def pressure_drop(mesh: TetMesh, p, section_in, section_out) -> float:
    """Area-weighted mean pressure over ``section_out`` minus that over ``section_in``.
    Sections are triangle arrays or names registered on the mesh."""
    if isinstance(section_in, str):
        section_in = mesh.section_triangles(section_in)
    if isinstance(section_out, str):
        section_out = mesh.section_triangles(section_out)
    if len(section_in) == 0 or len(section_out) == 0:
        raise ValueError("pressure drop needs two nonempty sections")
    return section_mean(mesh, p, section_out) - section_mean(mesh, p, section_in)
