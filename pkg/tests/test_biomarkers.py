import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from morphassim.biomarkers import WallTraction, twss_osi, wall_shear_stress
from morphassim.fem import box_mesh
from morphassim.mesh import MeshError, RegionId


def floor_wall_mesh():
    """Unit box whose bottom face (z = 0) is WALL; the rest is INLET."""
    def lab(c):
        out = np.full(len(c), int(RegionId.INLET))
        out[np.isclose(c[:, 2], 0.0)] = int(RegionId.WALL)
        return out
    return box_mesh(2, labeler=lab)


def test_constant_field_has_no_shear():
    m = floor_wall_mesh()
    t = wall_shear_stress(m, np.tile([1.0, 2.0, 3.0], (m.n_nodes, 1)), mu=2.0)
    assert np.abs(t.tau).max() < 1e-14


def test_shear_flow():
    m = floor_wall_mesh()
    gamma, mu = 3.0, 0.7
    u = np.zeros((m.n_nodes, 3))
    u[:, 0] = gamma * m.vertices[:, 2]
    t = wall_shear_stress(m, u, mu)
    # outward normal of the z = 0 wall is -e3, so the normal derivative carries a sign
    assert np.allclose(t.normals, [0, 0, -1], atol=1e-15)
    assert np.allclose(t.tau, [-mu * gamma, 0, 0], atol=1e-12)
    assert np.allclose(np.einsum("ij,ij->i", t.tau, t.normals), 0, atol=1e-12)


def test_normal_flow_has_no_shear():
    m = floor_wall_mesh()
    u = np.zeros((m.n_nodes, 3))
    u[:, 2] = 2.0 * m.vertices[:, 2]
    assert np.abs(wall_shear_stress(m, u).tau).max() < 1e-14


def test_traction_is_tangential_for_random_fields(rng):
    m = box_mesh(2)
    t = wall_shear_stress(m, rng.standard_normal((m.n_nodes, 3)))
    scale = np.abs(t.tau).max()
    assert np.abs(np.einsum("ij,ij->i", t.tau, t.normals)).max() < 1e-10 * scale


def test_no_wall_faces():
    m = box_mesh(2, labeler=lambda c: np.full(len(c), int(RegionId.INLET)))
    with pytest.raises(MeshError):
        wall_shear_stress(m, np.zeros((m.n_nodes, 3)))


def test_osi_examples():
    tau = np.array([[1.0, -2.0, 0.5]])
    mean, osi = twss_osi(np.repeat(tau[None], 8, axis=0))
    assert np.allclose(mean, tau) and osi[0] == 0.0
    alt = np.array([tau * (-1) ** k for k in range(8)])
    mean, osi = twss_osi(alt)
    assert np.allclose(mean, 0) and osi[0] == pytest.approx(0.5)
    _, osi = twss_osi(np.zeros((8, 2, 3)))
    assert np.array_equal(osi, [0.0, 0.0])
    with pytest.raises(ValueError):
        twss_osi(np.zeros((7, 1, 3)))


def test_series_of_tractions():
    m = box_mesh(2)
    u = np.zeros((m.n_nodes, 3))
    u[:, 0] = m.vertices[:, 2]
    series = [wall_shear_stress(m, np.cos(k) * u) for k in range(8)]
    mean, osi = twss_osi(series)
    assert mean.shape == series[0].tau.shape and np.all((0 <= osi) & (osi <= 0.5))
    bad = series[:7] + [WallTraction(series[0].face_ids[::-1], series[0].tau, series[0].areas, series[0].normals)]
    with pytest.raises(ValueError):
        twss_osi(bad)


series = arrays(np.float64, (8, 5, 3), elements=st.floats(-100, 100))


@given(series, st.floats(1e-3, 1e3))
def test_osi_bounds_and_homogeneity(T, alpha):
    mean, osi = twss_osi(T)
    assert np.all((0 <= osi) & (osi <= 0.5))
    mean2, osi2 = twss_osi(alpha * T)
    assert np.allclose(mean2, alpha * mean, rtol=1e-12, atol=1e-300)
    assert np.allclose(osi2, osi, atol=1e-12)
