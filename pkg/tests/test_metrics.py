import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.transform import Rotation

from morphassim.mesh import LabeledSurfaceMesh, icosphere, label_caps
from morphassim.metrics import (ChamferConfig, MissingRegionWarning, chamfer, chamfer_brute, chamfer_star,
                                chamfer_star_terms)
from oracles import chamfer_pairwise


def square(offset=0.0):
    V = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], float) + [offset, 0, 0]
    return LabeledSurfaceMesh(V, [[0, 1, 2], [0, 2, 3]], [0, 0])


def capped_sphere(s=2, scale=(1, 1, 1)):
    v, f = icosphere(s)
    v = v * scale
    return LabeledSurfaceMesh(v, f, label_caps(v, f))


def test_chamfer_examples():
    X = np.random.default_rng(0).standard_normal((20, 3))
    assert chamfer(X, X) == 0.0
    assert chamfer([[0, 0, 0]], [[1, 0, 0], [3, 0, 0]]) == pytest.approx(3.0)
    with pytest.raises(ValueError):
        chamfer(np.zeros((0, 3)), X)


def test_chamfer_symmetric(rng):
    X, Y = rng.standard_normal((50, 3)), rng.standard_normal((50, 3))
    assert chamfer(X, Y) == chamfer(Y, X)


def test_kdtree_matches_pairwise_oracle(rng):
    for _ in range(50):
        X = rng.standard_normal((rng.integers(1, 300), 3))
        Y = rng.standard_normal((rng.integers(1, 300), 3))
        assert chamfer(X, Y) == pytest.approx(chamfer_pairwise(X, Y), rel=1e-12)
        assert chamfer_brute(X, Y) == pytest.approx(chamfer_pairwise(X, Y), rel=1e-12)


pts = arrays(np.float64, st.tuples(st.integers(1, 25), st.just(3)), elements=st.floats(-5, 5))


@given(pts, pts, arrays(np.float64, 3, elements=st.floats(-5, 5)), st.integers(0, 2**31))
def test_rigid_invariance(X, Y, t, seed):
    R = Rotation.random(random_state=seed).as_matrix()
    a = chamfer(X, Y)
    assert chamfer(X @ R.T + t, Y @ R.T + t) == pytest.approx(a, rel=1e-10, abs=1e-10)


def test_mesh_chamfer_identical_is_zero():
    m = capped_sphere()
    for lam in (0.0, 5e-5, 1.0):
        assert chamfer_star(m, m, ChamferConfig(lam)) == 0.0


def test_wall_only_reduces_to_cloud_chamfer():
    a, b = square(), square(0.3)
    with pytest.warns(MissingRegionWarning):
        v = chamfer_star(a, b, ChamferConfig(0.0))
    assert v == pytest.approx(chamfer(a.vertices, b.vertices))


def test_offset_squares_hand_values():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MissingRegionWarning)
        t = chamfer_star_terms(square(), square(0.1), ChamferConfig(1.0))
    assert t["wall"] == pytest.approx(0.2, rel=1e-12)
    assert t["normals"] == pytest.approx(0.0, abs=1e-15)


def test_missing_region_warning_names_side():
    with pytest.warns(MissingRegionWarning) as rec:
        chamfer_star(capped_sphere(), square())
    assert any(w.message.mesh_side == "target" for w in rec)


def test_mesh_chamfer_bounds_wall_term():
    S, T = capped_sphere(2), capped_sphere(3, (1.2, 0.9, 1.0))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MissingRegionWarning)
        terms = chamfer_star_terms(S, T)
    assert all(v >= 0 for v in terms.values())
    assert sum(terms.values()) >= terms["wall"]


def test_empty_wall_is_an_error():
    m = LabeledSurfaceMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]], [1])
    with pytest.raises(ValueError, match="WALL"):
        chamfer_star(m, m)
