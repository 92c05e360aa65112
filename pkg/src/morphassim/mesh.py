"""Labeled triangulated surface meshes and the geometry helpers shared by the other modules."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_N_CNTRL = 390


class RegionId(enum.IntEnum):
    WALL = 0
    INLET = 1
    OUTLET_1 = 2
    OUTLET_2 = 3
    OUTLET_3 = 4
    OUTLET_4 = 5

    @property
    def label(self) -> str:
        return _LABELS[self]

    @classmethod
    def parse(cls, name: str) -> "RegionId":
        try:
            return _BY_LABEL[name.strip().lower()]
        except KeyError:
            raise ValueError(f"unknown region id {name!r}") from None

    @classmethod
    def outlets(cls) -> tuple["RegionId", ...]:
        return (cls.OUTLET_1, cls.OUTLET_2, cls.OUTLET_3, cls.OUTLET_4)


_LABELS = {
    RegionId.WALL: "wall",
    RegionId.INLET: "inlet",
    RegionId.OUTLET_1: "outlet1",
    RegionId.OUTLET_2: "outlet2",
    RegionId.OUTLET_3: "outlet3",
    RegionId.OUTLET_4: "outlet4",
}
_BY_LABEL = {v: k for k, v in _LABELS.items()}


class MeshError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LabeledSurfaceMesh:
    """Surface mesh with per-face region labels and a pointwise centerline.

    Region membership is stored on faces; a vertex belongs to every region of
    its incident faces (see :attr:`vertex_regions`).
    """

    vertices: np.ndarray
    faces: np.ndarray
    face_labels: np.ndarray
    centerline: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    radii: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        lab = np.asarray(self.face_labels, dtype=np.int64).reshape(-1)
        c = np.asarray(self.centerline, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        object.__setattr__(self, "face_labels", lab)
        object.__setattr__(self, "centerline", c)
        if self.radii is not None:
            r = np.asarray(self.radii, dtype=np.float64).reshape(-1)
            if r.shape[0] != c.shape[0]:
                raise MeshError(f"radii length {r.shape[0]} != centerline length {c.shape[0]}")
            if np.any(r < 0):
                raise MeshError("radii must be nonnegative")
            object.__setattr__(self, "radii", r)
        if lab.shape[0] != f.shape[0]:
            raise MeshError(f"{f.shape[0]} faces but {lab.shape[0]} face labels")
        if f.size:
            if f.min() < 0 or f.max() >= v.shape[0]:
                bad = int(np.flatnonzero((f < 0) | (f >= v.shape[0]))[0] // 3)
                raise MeshError(
                    f"face {bad} references vertex out of range (vertex count {v.shape[0]})"
                )
            dup = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
            if dup.any():
                raise MeshError(f"face {int(np.flatnonzero(dup)[0])} repeats a vertex index")
        if lab.size and (lab.min() < 0 or lab.max() > int(RegionId.OUTLET_4)):
            raise MeshError(f"unknown region id {int(lab[(lab < 0) | (lab > 5)][0])}")

    @property
    def n_points(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    @cached_property
    def vertex_regions(self) -> np.ndarray:
        """Boolean (n_points, 6) table: vertex i touches a face labeled with region k."""
        table = np.zeros((self.n_points, len(RegionId)), dtype=bool)
        for k in range(3):
            table[self.faces[:, k], self.face_labels] = True
        return table

    def with_vertices(self, vertices: np.ndarray) -> "LabeledSurfaceMesh":
        return LabeledSurfaceMesh(vertices, self.faces, self.face_labels, self.centerline, self.radii)

    def translated(self, t) -> "LabeledSurfaceMesh":
        t = np.asarray(t, dtype=np.float64)
        return LabeledSurfaceMesh(
            self.vertices + t, self.faces, self.face_labels, self.centerline + t, self.radii
        )


def _check_n_cntrl(mesh: LabeledSurfaceMesh, n_cntrl: int | None) -> None:
    if n_cntrl is not None and mesh.centerline.shape[0] != n_cntrl:
        raise MeshError(
            f"centerline has {mesh.centerline.shape[0]} points, session expects n_cntrl={n_cntrl}"
        )


def load_surface_mesh(path: str | Path, n_cntrl: int | None = None) -> LabeledSurfaceMesh:
    """Read the JSON mesh format. ``n_cntrl`` enforces the session centerline length."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MeshError(f"{path}: invalid JSON ({exc})") from exc
    for key in ("vertices", "faces", "face_labels", "centerline"):
        if key not in doc:
            raise MeshError(f"{path}: missing key {key!r}")
    if len(doc["faces"]) != len(doc["face_labels"]):
        raise MeshError(f"{path}: 'faces' and 'face_labels' differ in length")
    labels = [int(RegionId.parse(s)) for s in doc["face_labels"]]
    faces = doc["faces"]
    for f in faces:
        if len(f) != 3 or any((not isinstance(i, int)) or i < 0 for i in f):
            raise MeshError(f"{path}: faces must be triples of nonnegative integers, got {f!r}")
    mesh = LabeledSurfaceMesh(
        vertices=np.array(doc["vertices"], dtype=np.float64).reshape(-1, 3),
        faces=np.array(faces, dtype=np.int64).reshape(-1, 3),
        face_labels=np.array(labels, dtype=np.int64),
        centerline=np.array(doc["centerline"], dtype=np.float64).reshape(-1, 3),
        radii=None if doc.get("radii") is None else np.array(doc["radii"], dtype=np.float64),
    )
    _check_n_cntrl(mesh, n_cntrl)
    return mesh


def save_surface_mesh(mesh: LabeledSurfaceMesh, path: str | Path) -> None:
    doc = {
        "vertices": mesh.vertices.tolist(),
        "faces": mesh.faces.tolist(),
        "face_labels": [RegionId(int(k)).label for k in mesh.face_labels],
        "centerline": mesh.centerline.tolist(),
    }
    if mesh.radii is not None:
        doc["radii"] = mesh.radii.tolist()
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def face_normals(vertices: np.ndarray, faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit face normals (right-hand rule) and face areas."""
    a, b, c = (vertices[faces[:, k]] for k in range(3))
    cr = np.cross(b - a, c - a)
    twice_area = np.linalg.norm(cr, axis=1)
    scale = np.max(np.abs(vertices)) if vertices.size else 1.0
    tiny = 1e-14 * max(scale, 1e-300) ** 2
    bad = np.flatnonzero(twice_area <= tiny)
    if bad.size:
        raise MeshError(f"face {int(bad[0])} has zero area")
    return cr / twice_area[:, None], 0.5 * twice_area


def corner_angles(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Interior angle at each corner of each face, shape (n_faces, 3)."""
    out = np.empty(faces.shape, dtype=np.float64)
    for k in range(3):
        p = vertices[faces[:, k]]
        e1 = vertices[faces[:, (k + 1) % 3]] - p
        e2 = vertices[faces[:, (k + 2) % 3]] - p
        cosang = np.einsum("ij,ij->i", e1, e2) / (
            np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1)
        )
        out[:, k] = np.arccos(np.clip(cosang, -1.0, 1.0))
    return out


def vertex_normals(mesh: LabeledSurfaceMesh) -> np.ndarray:
    """Angle-weighted vertex normals: sum of incident face normals weighted by the
    interior angle at the vertex, renormalized to unit length."""
    return _vertex_normals(mesh.vertices, mesh.faces)


def _vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    fn, _ = face_normals(vertices, faces)
    ang = corner_angles(vertices, faces)
    acc = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(acc, faces[:, k], fn * ang[:, k : k + 1])
    norm = np.linalg.norm(acc, axis=1)
    referenced = np.zeros(vertices.shape[0], dtype=bool)
    referenced[faces.ravel()] = True
    bad = np.flatnonzero(~referenced)
    if bad.size:
        raise MeshError(f"vertex {int(bad[0])} has no incident face")
    bad = np.flatnonzero(norm <= 1e-14)
    if bad.size:
        raise MeshError(f"vertex {int(bad[0])} has a zero normal resultant")
    return acc / norm[:, None]


def parse_selector(selector) -> tuple[RegionId, ...]:
    """Accept a RegionId, a label string (``"inlet&wall"`` for intersections) or a tuple."""
    if isinstance(selector, RegionId):
        return (selector,)
    if isinstance(selector, str):
        return tuple(RegionId.parse(s) for s in selector.replace("∩", "&").split("&"))
    return tuple(RegionId(int(s)) if not isinstance(s, str) else RegionId.parse(s) for s in selector)


def region_points(mesh: LabeledSurfaceMesh, selector) -> np.ndarray:
    """Sorted indices of vertices whose region set contains every requested id."""
    ids = parse_selector(selector)
    keep = np.all(mesh.vertex_regions[:, [int(i) for i in ids]], axis=1)
    return np.flatnonzero(keep)


def subdivide_midpoint(mesh: LabeledSurfaceMesh, levels: int) -> LabeledSurfaceMesh:
    """Split every triangle into four through its edge midpoints, ``levels`` times."""
    if levels < 0:
        raise ValueError("levels must be >= 0")
    verts, faces, labels = mesh.vertices, mesh.faces, mesh.face_labels
    for _ in range(levels):
        edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
        key = np.sort(edges, axis=1)
        uniq, inv = np.unique(key, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        mids = 0.5 * (verts[uniq[:, 0]] + verts[uniq[:, 1]])
        nf = faces.shape[0]
        m01, m12, m20 = (verts.shape[0] + inv[k * nf : (k + 1) * nf] for k in range(3))
        a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
        faces = np.concatenate(
            [
                np.stack([a, m01, m20], 1),
                np.stack([m01, b, m12], 1),
                np.stack([m20, m12, c], 1),
                np.stack([m01, m12, m20], 1),
            ]
        )
        labels = np.tile(labels, 4)
        verts = np.concatenate([verts, mids])
    return LabeledSurfaceMesh(verts, faces, labels, mesh.centerline, mesh.radii)


def surface_area(mesh: LabeledSurfaceMesh, region: RegionId | None = None) -> float:
    a, b, c = (mesh.vertices[mesh.faces[:, k]] for k in range(3))
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    if region is not None:
        areas = areas[mesh.face_labels == int(region)]
    return float(areas.sum())


_EXACT_PAIRWISE_LIMIT = 4096


def _pairwise_max(points: np.ndarray, block: int = 1024) -> float:
    best = 0.0
    for i in range(0, points.shape[0], block):
        chunk = points[i : i + block]
        d2 = np.sum((chunk[:, None, :] - points[None, :, :]) ** 2, axis=-1)
        best = max(best, float(d2.max()))
    return float(np.sqrt(best))


def mesh_diameter(points) -> float:
    """Exact maximum pairwise distance; large sets are reduced to their convex hull first."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if p.shape[0] == 0:
        raise ValueError("mesh_diameter of an empty point set")
    if p.shape[0] <= _EXACT_PAIRWISE_LIMIT:
        return _pairwise_max(p)
    from scipy.spatial import ConvexHull, QhullError

    try:
        hull = ConvexHull(p)
    except QhullError:
        # flat or degenerate sets: fall back to the exact blocked scan
        return _pairwise_max(p)
    return _pairwise_max(p[hull.vertices])


def icosphere(subdivisions: int = 2, radius: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Vertices and outward-oriented faces of a geodesic sphere (20·4^s faces)."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    v = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    f = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    m = LabeledSurfaceMesh(v, f, np.zeros(len(f), dtype=np.int64))
    for _ in range(subdivisions):
        m = subdivide_midpoint(m, 1)
        vv = m.vertices / np.linalg.norm(m.vertices, axis=1, keepdims=True)
        m = m.with_vertices(vv)
    return radius * m.vertices, m.faces


def label_caps(vertices: np.ndarray, faces: np.ndarray, axis: int = 2, frac: float = 0.85,
               low: RegionId = RegionId.INLET, high: RegionId = RegionId.OUTLET_1) -> np.ndarray:
    """Label faces whose centroid lies beyond ``frac`` of the extent along ``axis`` as caps."""
    cen = vertices[faces].mean(axis=1)[:, axis]
    lo, hi = vertices[:, axis].min(), vertices[:, axis].max()
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    labels = np.full(faces.shape[0], int(RegionId.WALL), dtype=np.int64)
    labels[cen <= mid - frac * half] = int(low)
    labels[cen >= mid + frac * half] = int(high)
    return labels


def straight_centerline(n: int, start, stop) -> np.ndarray:
    s = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - s) * np.asarray(start, float) + s * np.asarray(stop, float)
