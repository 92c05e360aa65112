import numpy as np
import pytest
from scipy.interpolate import RBFInterpolator

from morphassim.fem import FemField, box_mesh
from morphassim.transport import RbfMap, SingularLocalSystem, pullback_field, pushforward_field, tps


def unit_grid(n):
    g = np.linspace(0.0, 1.0, n)
    return np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)


def warp(x):
    return x + 1e-2 * np.sin(2 * np.pi * x[:, [1, 2, 0]])


def smooth(y):
    return np.sin(2 * y[:, 0]) * np.cos(y[:, 1]) + y[:, 2] ** 2


def roundtrip_error(n, n_query=500, seed=0):
    X = unit_grid(n)
    fwd = RbfMap(X, warp(X), 30)
    inv = fwd.inverse()
    h = pullback_field(smooth, fwd, X)
    hf = RbfMap(X, h, 30)
    Y = warp(np.random.default_rng(seed).uniform(0.2, 0.8, (n_query, 3)))
    out = pushforward_field(lambda p: hf(p)[:, 0], fwd, inv, Y)
    return float(np.max(np.abs(out - smooth(Y))))


def test_kernel():
    assert np.array_equal(tps(np.array([0.0, 1.0])), [0.0, 0.0])
    assert tps(np.array([np.e]))[0] == pytest.approx(np.e ** 2)


def test_interpolates_centers(rng):
    C = rng.uniform(0, 1, (200, 3))
    V = np.column_stack([np.sin(3 * C[:, 0]), C[:, 1] * C[:, 2]])
    out = RbfMap(C, V, 30)(C)
    assert np.max(np.abs(out - V)) < 1e-8 * np.max(np.abs(V))


def test_affine_reproduction(rng):
    C = rng.uniform(-1, 1, (150, 3))
    A, b = rng.standard_normal((3, 3)), rng.standard_normal(3)
    Q = rng.uniform(-1.2, 1.2, (300, 3))
    out = RbfMap(C, C @ A.T + b, 30)(Q)
    assert np.max(np.abs(out - (Q @ A.T + b))) < 1e-9 * np.max(np.abs(Q @ A.T + b))


def test_full_neighbourhood_equals_global_fit(rng):
    C = rng.uniform(0, 1, (10, 3))
    V = rng.standard_normal((10, 2))
    Q = rng.uniform(0, 1, (40, 3))
    ref = RBFInterpolator(C, V, kernel="thin_plate_spline", degree=1)(Q)
    assert np.allclose(RbfMap(C, V, 10)(Q), ref, rtol=1e-9, atol=1e-9)


def test_identity_translation_and_constant(rng):
    X = rng.uniform(0, 1, (120, 3))
    g = lambda p: np.cos(p[:, 0]) + p[:, 1]  # noqa: E731
    ident = RbfMap(X, X, 30)
    Y = rng.uniform(0.2, 0.8, (50, 3))
    assert np.allclose(pushforward_field(g, ident, None, Y), g(Y), atol=1e-12)
    assert np.allclose(pullback_field(g, ident, Y), g(Y), atol=1e-12)
    t = np.array([0.3, -0.1, 0.2])
    shift = RbfMap(X, X + t, 30)
    assert np.allclose(pushforward_field(lambda p: p[:, 0], shift, None, Y), Y[:, 0] - t[0], atol=1e-12)
    assert np.allclose(pushforward_field(lambda p: np.full(len(p), 4.2), shift, None, Y), 4.2)


def test_linear_field_through_affine_map(rng):
    X = rng.uniform(0, 1, (120, 3))
    A = np.eye(3) + 0.1 * rng.standard_normal((3, 3))
    fwd = RbfMap(X, X @ A.T + 0.5, 30)
    a = rng.standard_normal(3)
    P = rng.uniform(0.2, 0.8, (60, 3))
    assert np.allclose(pullback_field(lambda p: p @ a, fwd, P), (P @ A.T + 0.5) @ a, atol=1e-10)


def test_fem_field_transport():
    mesh = box_mesh(3)
    V = mesh.vertices
    f = FemField(mesh, 2 * V[:, 0] - V[:, 2])
    fwd = RbfMap(V, V + 0.01 * np.sin(V), 20)
    Y = np.random.default_rng(0).uniform(0.1, 0.9, (30, 3))
    out = pullback_field(f, fwd, Y)
    Z = fwd(Y)
    assert np.allclose(out, 2 * Z[:, 0] - Z[:, 2], atol=1e-10)


def test_roundtrip_accuracy_and_rate():
    errs = [roundtrip_error(n) for n in (6, 12, 24)]
    assert errs[-1] < 1e-3
    assert errs[0] / errs[1] >= 3 and errs[1] / errs[2] >= 3


def test_errors(rng, tmp_path):
    C = rng.uniform(0, 1, (40, 3))
    with pytest.raises(ValueError):
        RbfMap(C, np.zeros(39), 10)
    with pytest.raises(ValueError):
        RbfMap(np.vstack([C, C[:1]]), np.zeros(41), 10)
    flat = C.copy()
    flat[:, 2] = 0.0
    with pytest.raises(SingularLocalSystem) as exc:
        RbfMap(flat, np.zeros(40), 10)(np.array([[0.5, 0.5, 0.0]]))
    assert exc.value.query_index == 0
    m = RbfMap(C, C ** 2, 12)
    m.save(tmp_path / "m.fmat")
    back = RbfMap.load(tmp_path / "m.fmat")
    assert back.k == 12 and np.array_equal(back(C[:5]), m(C[:5]))
