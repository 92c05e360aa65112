"""Chamfer distances between point clouds and the region-aware mesh Chamfer distance."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .mesh import LabeledSurfaceMesh, RegionId, _vertex_normals, region_points


class MissingRegionWarning(UserWarning):
    """A Chamfer sub-term was skipped because a region is empty on one of the meshes."""

    def __init__(self, selector: str, mesh_side: str):
        super().__init__(f"region {selector!r} is empty on the {mesh_side} mesh; term set to 0")
        self.selector = selector
        self.mesh_side = mesh_side


@dataclass(frozen=True)
class ChamferConfig:
    lambda_n: float = 5e-5

    def __post_init__(self):
        if self.lambda_n < 0:
            raise ValueError("lambda_n must be >= 0")


def _as_cloud(X) -> np.ndarray:
    a = np.asarray(X, dtype=np.float64).reshape(-1, 3)
    if a.shape[0] == 0:
        raise ValueError("Chamfer distance of an empty point set")
    return a


def nearest(query: np.ndarray, ref: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact nearest neighbour in ``ref`` for every row of ``query`` (distance, index)."""
    d, i = cKDTree(ref).query(query, k=1)
    return np.asarray(d, dtype=np.float64), np.asarray(i, dtype=np.int64)


def chamfer(X, Y) -> float:
    """Symmetric mean nearest-neighbour Euclidean distance (norms, not squared)."""
    X, Y = _as_cloud(X), _as_cloud(Y)
    dxy, _ = nearest(X, Y)
    dyx, _ = nearest(Y, X)
    return float(dxy.mean() + dyx.mean())


def chamfer_brute(X, Y) -> float:
    """O(|X||Y|) reference implementation used as an oracle."""
    X, Y = _as_cloud(X), _as_cloud(Y)
    d = np.sqrt(((X[:, None, :] - Y[None, :, :]) ** 2).sum(-1))
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())


def chamfer_selectors() -> list[tuple[str, tuple[RegionId, ...]]]:
    """Cap and ring sub-terms of the mesh Chamfer distance, in evaluation order."""
    out: list[tuple[str, tuple[RegionId, ...]]] = []
    for k in RegionId.outlets():
        out.append((k.label, (k,)))
    out.append(("inlet", (RegionId.INLET,)))
    for k in RegionId.outlets():
        out.append((f"{k.label}&wall", (k, RegionId.WALL)))
    out.append(("inlet&wall", (RegionId.INLET, RegionId.WALL)))
    return out


def chamfer_star(S: LabeledSurfaceMesh, T: LabeledSurfaceMesh, cfg: ChamferConfig = ChamferConfig()) -> float:
    """Mesh Chamfer distance: wall Chamfer, wall normal alignment, caps and rings.

    ``S`` carries the (possibly deformed) source vertex positions. The normal
    term is normalized by the full point counts of the two meshes.
    """
    return sum(chamfer_star_terms(S, T, cfg).values())


def chamfer_star_terms(S: LabeledSurfaceMesh, T: LabeledSurfaceMesh,
                       cfg: ChamferConfig = ChamferConfig()) -> dict[str, float]:
    ws, wt = region_points(S, RegionId.WALL), region_points(T, RegionId.WALL)
    if ws.size == 0 or wt.size == 0:
        raise ValueError("mesh Chamfer distance needs a nonempty WALL region on both meshes")
    XS, XT = S.vertices, T.vertices
    terms = {"wall": chamfer(XS[ws], XT[wt])}
    if cfg.lambda_n > 0:
        NS = _vertex_normals(XS, S.faces)
        NT = _vertex_normals(XT, T.faces)
        _, i_st = nearest(XS[ws], XT[wt])
        _, i_ts = nearest(XT[wt], XS[ws])
        a = np.sum(1.0 - np.abs(np.einsum("ij,ij->i", NS[ws], NT[wt][i_st]))) / S.n_points
        b = np.sum(1.0 - np.abs(np.einsum("ij,ij->i", NT[wt], NS[ws][i_ts]))) / T.n_points
        terms["normals"] = cfg.lambda_n * float(a + b)
    else:
        terms["normals"] = 0.0
    for name, sel in chamfer_selectors():
        ps, pt = region_points(S, sel), region_points(T, sel)
        if ps.size == 0 or pt.size == 0:
            warnings.warn(MissingRegionWarning(name, "source" if ps.size == 0 else "target"),
                          stacklevel=3)
            terms[name] = 0.0
            continue
        terms[name] = chamfer(XS[ps], XT[pt])
    return terms
