"""Wall shear stress and its time statistics from P1 velocity fields."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .fem import MU_BLOOD, FemField, TetMesh
from .mesh import MeshError, RegionId

N_SAMPLES = 8


@dataclass(frozen=True)
class WallTraction:
    face_ids: np.ndarray  # indices into mesh.boundary_faces
    tau: np.ndarray  # (n, 3), Pa
    areas: np.ndarray
    normals: np.ndarray


def wall_shear_stress(mesh: TetMesh, u, mu: float = MU_BLOOD) -> WallTraction:
    """``tau = mu (I - n n^T) G^T n`` per wall face, with ``G[a, b] = d u_b / d x_a``
    of the owning tet, so ``G^T n`` is the normal derivative of the velocity."""
    field = u if isinstance(u, FemField) else FemField(mesh, u)
    if not field.is_vector:
        raise ValueError("wall shear stress needs a vector field")
    faces = mesh.faces_with_label(RegionId.WALL)
    if faces.size == 0:
        raise MeshError("mesh has no WALL faces")
    try:
        owner = mesh.boundary_owner[faces]
    except MeshError as exc:
        raise MeshError(f"wall face without an owning tet: {exc}") from exc
    G = field.tet_gradients()[owner]
    n = mesh.boundary_normals[faces]
    dn = np.einsum("fab,fa->fb", G, n)
    tau = mu * (dn - np.einsum("fb,fb->f", dn, n)[:, None] * n)
    return WallTraction(faces, tau, mesh.boundary_areas[faces], n)


def twss_osi(series: Sequence[WallTraction] | np.ndarray, n_samples: int = N_SAMPLES) -> tuple[np.ndarray, np.ndarray]:
    """Time-averaged shear vector and oscillatory shear index over equally spaced samples."""
    if isinstance(series, np.ndarray):
        T = np.asarray(series, dtype=np.float64)
    else:
        if series and any(not np.array_equal(s.face_ids, series[0].face_ids) for s in series):
            raise ValueError("traction samples refer to different faces")
        T = np.stack([s.tau for s in series])
    if T.shape[0] != n_samples:
        raise ValueError(f"expected {n_samples} time samples, got {T.shape[0]}")
    mean_vec = T.mean(axis=0)
    mean_mag = np.linalg.norm(T, axis=2).mean(axis=0)
    osi = np.zeros(mean_mag.shape)
    nz = mean_mag > 0
    osi[nz] = 0.5 * (1.0 - np.linalg.norm(mean_vec[nz], axis=1) / mean_mag[nz])
    return mean_vec, np.clip(osi, 0.0, 0.5)
