"""Acceptance criteria 1-13, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -s`` or ``python3 tests/test_acceptance.py``.
"""

from __future__ import annotations

import functools
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import scipy.sparse as sp
from scipy.linalg import subspace_angles

sys.path.insert(0, str(Path(__file__).parent))

from morphassim import cli, fem  # noqa: E402
from morphassim import manifold as mf  # noqa: E402
from morphassim import registration as reg  # noqa: E402
from morphassim.assimilation import (NOISE_PRESETS, NoiseModel, ObservationSystem, build_noise_covariance,  # noqa: E402
                                     noise_covariance, pbdw_solve, pbdw_state_covariance)
from morphassim.biomarkers import twss_osi, wall_shear_stress  # noqa: E402
from morphassim.fixtures import RegistrationBenchmark, write_demo  # noqa: E402
from morphassim.lumped import CalibrationInput, WindkesselParams, calibrate_windkessel, flow_split, simulate  # noqa: E402
from morphassim.mesh import RegionId, mesh_diameter  # noqa: E402
from morphassim.metrics import chamfer, chamfer_brute  # noqa: E402
from morphassim.transport import RbfMap  # noqa: E402
from oracles import central_difference, pbdw_joint, tet_quadrature, barycentric, p1_gradients  # noqa: E402
from test_assimilation import channel_system as _channel_system  # noqa: E402
from test_fem import observed_order, ppe_manufactured, random_tet, single_tet, ste_manufactured  # noqa: E402
from test_manifold import decaying  # noqa: E402
from test_transport import roundtrip_error  # noqa: E402
from toys import small_net, toy_pair  # noqa: E402

ALL_TERMS = reg.LossWeights(0.3, 0.2, 0.1, 0.05)


def criterion(number: int, title: str, budget: float):
    """Time the check, print one line, then assert. The check returns ``(ok, detail)``."""
    def wrap(fn):
        @functools.wraps(fn)
        def test(*args, **kwargs):
            t0 = time.perf_counter()
            try:
                ok, detail = fn(*args, **kwargs)
            except Exception as exc:
                _emit(f"FAIL [{number:2d}] {title}: raised {type(exc).__name__}: {exc}")
                raise
            dt = time.perf_counter() - t0
            in_time = dt < budget
            status = "PASS" if ok and in_time else "FAIL"
            line = f"{status} [{number:2d}] {title}: {detail}; {dt:.1f} s (budget {budget:g} s)"
            _emit(line)
            assert ok, line
            assert in_time, line
        return test
    return wrap


LINES: list[str] = []  # printed in the terminal summary by conftest.py


def _emit(line: str) -> None:
    LINES.append(line)


@functools.lru_cache(maxsize=None)
def benchmark_result():
    return RegistrationBenchmark().run(0)


# ---------------------------------------------------------------------------


@criterion(1, "chamfer k-d tree vs brute force", 5)
def test_c01_chamfer_oracle():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(200):
        X = rng.standard_normal((rng.integers(1, 301), 3))
        Y = rng.standard_normal((rng.integers(1, 301), 3)) * rng.uniform(0.1, 10)
        a, b = chamfer(X, Y), chamfer_brute(X, Y)
        worst = max(worst, abs(a - b) / abs(b))
    return worst <= 1e-12, f"max rel diff {worst:.1e} over 200 pairs"


@criterion(2, "registration loss gradient vs central differences", 30)
def test_c02_gradient():
    S, T = toy_pair()
    net = small_net(3, hidden=(4, 4))
    ev = reg.registration_loss(net, S, T, ALL_TERMS)
    g = np.concatenate([a.ravel() for a in ev.gradients()])
    fd = central_difference(lambda ps: reg.registration_loss(net.with_params(ps), S, T, ALL_TERMS).value,
                            net.params)
    fd = np.concatenate([a.ravel() for a in fd])
    err = np.linalg.norm(g - fd) / np.linalg.norm(fd)
    return err < 1e-5, f"{S.n_points}-point source, {g.size} params, rel err {err:.1e}"


@criterion(3, "sphere to ellipsoid multigrid benchmark", 600)
def test_c03_registration_benchmark():
    bench = RegistrationBenchmark()
    res = benchmark_result()
    tr, lv = np.asarray(res.loss_trace), np.asarray(res.level_trace)
    rises = reg.segment_ema_rise(tr, lv)
    sw = np.flatnonzero(np.diff(lv)) + 1
    jumps = [tr[i] / tr[i - 1] for i in sw]
    faces = bench.meshes()[0][0].faces.shape[0]
    ok = (res.normalized_chamfer < 0.01 and max(rises) <= 0.05 and all(j <= 10 for j in jumps)
          and len(tr) <= 800 and faces == 320 and len(sw) == 1)
    return ok, (f"chamfer/diam {res.normalized_chamfer:.4f}, EMA rise per segment "
                f"{', '.join(f'{r:.4f}' for r in rises)}, switch jump x{max(jumps):.2f}")


@criterion(4, "flow inversion and Lipschitz bound", 120)
def test_c04_bijectivity():
    res = benchmark_result()
    net = res.net
    cert = reg.lipschitz_bound(net, points=res.mapped)
    Y = res.mapped
    X = reg.invert_flow(net, Y, tol=1e-8)
    err = float(np.max(np.abs(reg.apply_flow(net, X) - Y)))
    viol = 0
    for seed in range(50):
        c = reg.lipschitz_bound(small_net(seed, hidden=(8, 8), gain=float(1 + seed % 5)), n_pairs=2000, seed=seed)
        viol += c.empirical > c.bound
    ok = cert.dt * cert.empirical < 1 and err < 1e-6 and viol == 0
    return ok, f"dt*L_emp {cert.dt * cert.empirical:.3f}, round trip {err:.1e}, bound violations {viol}/50"


@criterion(5, "RBF transport", 120)
def test_c05_transport():
    rng = np.random.default_rng(5)
    C = rng.uniform(-1, 1, (150, 3))
    A, b = rng.standard_normal((3, 3)), rng.standard_normal(3)
    Q = rng.uniform(-1.2, 1.2, (300, 3))
    aff = float(np.max(np.abs(RbfMap(C, C @ A.T + b, 30)(Q) - (Q @ A.T + b))))
    errs = [roundtrip_error(n) for n in (6, 12, 24)]
    ratios = [errs[i] / errs[i + 1] for i in range(2)]
    ok = aff < 1e-9 and errs[-1] < 1e-3 and min(ratios) >= 3
    return ok, (f"affine err {aff:.1e}, round trip {errs[-1]:.1e}, "
                f"ratios {ratios[0]:.1f}/{ratios[1]:.1f}")


@criterion(6, "rSVD vs dense SVD", 60)
def test_c06_rsvd():
    rng = np.random.default_rng(6)
    sv_err, ang = 0.0, 0.0
    cases = [(decaying(rng), {}) for _ in range(5)] + [(rng.standard_normal((50, 40)), {"power_iters": 20})
                                                       for _ in range(5)]
    for X, kw in cases:
        b = mf.rsvd(X, 10, seed=0, **kw)
        U, s, _ = np.linalg.svd(X)
        sv_err = max(sv_err, float(np.max(np.abs(b.sigma - s[:10]))))
        ang = max(ang, float(np.max(subspace_angles(b.Phi, U[:, :10]))))
    X = decaying(rng)
    basis = mf.rsvd(X, 20)
    u = X @ rng.standard_normal(X.shape[1])
    rec = [mf.reconstruction_error(u, basis.truncate(r)) for r in range(1, 21)]
    mono = bool(np.all(np.diff(rec) <= 1e-14))
    ok = sv_err < 1e-8 and ang < 1e-6 and mono
    return ok, f"sigma err {sv_err:.1e}, max angle {ang:.1e}, nested errors monotone {mono}"


@criterion(7, "subspace metrics and Mantel test", 60)
def test_c07_subspace_metrics():
    rng = np.random.default_rng(7)
    g_err = 0.0
    for th in rng.uniform(0, np.pi / 2, 20):
        g = mf.grassmann_subspace([[1.0], [0.0]], [[np.cos(th)], [np.sin(th)]])
        g_err = max(g_err, abs(g - th))
    A = rng.standard_normal((8, 3))
    h_eq = mf.hausdorff_subspace(A, A @ rng.standard_normal((3, 3)))
    h_orth = mf.hausdorff_subspace([[1.0], [0.0]], [[0.0], [1.0]])
    P = rng.standard_normal((12, 4))
    D = np.linalg.norm(P[:, None] - P[None], axis=2)
    r_m, p = mf.mantel_test(D, D, 999, seed=0)
    ok = g_err <= 1e-12 and h_eq < 1e-7 and h_orth == 1.0 and r_m == pytest.approx(1.0, abs=1e-12) and p == 1e-3
    return ok, f"grassmann err {g_err:.1e}, hausdorff {h_eq:.1e}/{h_orth:g}, mantel r {r_m:.6f} p {p:g}"


def _random_system(rng, d, m, r):
    Z = rng.standard_normal((d, m))
    Phi = np.linalg.qr(rng.standard_normal((d, r)))[0]
    B = rng.standard_normal((m, m))
    return ObservationSystem(sp.csc_matrix(Z), Phi), B @ B.T / m + 0.1 * np.eye(m)


@criterion(8, "PBDW with heteroscedastic noise", 120)
def test_c08_pbdw():
    mesh, obs = _channel_system.__wrapped__()
    z0 = np.random.default_rng(0).standard_normal(obs.r)
    u = obs.Phi @ z0
    y = obs.observe(u)
    sol = pbdw_solve(obs, build_noise_covariance(obs, NoiseModel.preset("low"), y), y)
    rec = np.linalg.norm(sol.state - u) / np.linalg.norm(u)
    rng = np.random.default_rng(8)
    joint = 0.0
    for _ in range(50):
        o, S = _random_system(rng, 20, 8, 3)
        yy = rng.standard_normal(o.m)
        s = pbdw_solve(o, S, yy)
        z, eta = pbdw_joint(o.L, o.K, S, yy)
        joint = max(joint, float(np.max(np.abs(s.z - z))), float(np.max(np.abs(s.eta - eta))))
    # Gauss-Markov: z estimates are unbiased for in-span states
    o, S = _random_system(rng, 20, 10, 3)
    z0 = rng.standard_normal(o.r)
    Lc = np.linalg.cholesky(S)
    y0 = o.L @ z0
    H = pbdw_solve(o, S, y0).H_z
    Zs = np.array([H @ (y0 + Lc @ rng.standard_normal(o.m)) for _ in range(1000)])
    bias_se = float(np.max(np.abs(Zs.mean(0) - z0) / (Zs.std(0, ddof=1) / np.sqrt(1000))))
    # Monte-Carlo state covariance
    o, S = _random_system(rng, 10, 6, 2)
    y0 = o.observe(o.Phi @ rng.standard_normal(o.r))
    s0 = pbdw_solve(o, S, y0)
    cov = pbdw_state_covariance(o, S, s0)
    Lc = np.linalg.cholesky(S)
    N = 4000
    E = np.array([pbdw_solve(o, S, y0 + Lc @ rng.standard_normal(o.m)).state for _ in range(N)]) - s0.state
    prods = E[:, :, None] * E[:, None, :]
    cov_se = float(np.max(np.abs(prods.mean(0) - cov.Sigma) / (prods.std(0, ddof=1) / np.sqrt(N))))
    ok = rec < 1e-7 and joint <= 1e-8 and bias_se < 4 and cov_se < 3
    return ok, (f"recovery {rec:.1e}, joint diff {joint:.1e}, bias {bias_se:.2f} SE, "
                f"covariance {cov_se:.2f} SE")


@criterion(9, "heteroscedastic noise model", 30)
def test_c09_noise():
    V = np.array([[1.0, 0, 0], [0, 2.0, 0], [0, 0, 3.0]])
    C = np.array([[0.0, 0, 0], [1.0, 0, 0], [0, 2.0, 0]])
    model = NoiseModel(snr_ho=2.0, snr_he=0.5, sigma_div2=0.3, l_T=0.5, eps2=0.1, floor=1e-3)
    cov = noise_covariance(V, C, [False, True, True], model)
    S = cov.S
    sc, g = (2.0 / 0.5) ** 2, np.exp(-5.0)
    expect = np.zeros((10, 10))
    expect[:3, :3] = np.eye(3)
    e2, e3 = np.eye(3)[1], np.eye(3)[2]
    expect[3:9, 3:9] = np.block([[sc * 1.1 * np.outer(e2, e2), sc * g * np.outer(e2, e3)],
                                 [sc * g * np.outer(e3, e2), sc * 1.1 * np.outer(e3, e3)]]) + 1e-3 * np.eye(6)
    expect[9, 9] = 0.3
    block_err = float(np.max(np.abs(S - expect)))
    rng = np.random.default_rng(9)
    min_gap = np.inf
    for _ in range(50):
        M = int(rng.integers(1, 15))
        c = noise_covariance(rng.standard_normal((M, 3)), rng.uniform(0, 1, (M, 3)), rng.random(M) < 0.5,
                             NoiseModel(), diameter=1.0)
        assert np.array_equal(c.S, c.S.T)
        min_gap = min(min_gap, np.linalg.eigvalsh(c.S).min() - min(c.floor, c.sigma_div2))
    presets = all((NoiseModel.preset(k).snr_ho, NoiseModel.preset(k).snr_he) == v for k, v in NOISE_PRESETS.items())
    presets &= NOISE_PRESETS == {"low": (10.0, 0.5), "medium": (0.4, 0.1), "high": (0.2, 0.05)}
    ok = block_err < 1e-12 and np.array_equal(S, S.T) and min_gap >= -1e-12 and presets
    return ok, f"hand case err {block_err:.1e}, min eig - floor {min_gap:.1e}, presets ok {presets}"


@criterion(10, "P1 finite elements, PPE/STE, bias and reduced models", 300)
def test_c10_fem():
    rng = np.random.default_rng(10)
    V = random_tet(rng)
    mesh = single_tet(V)
    ops = fem.assemble_p1(mesh)
    perm = mesh.tets[0]
    X, w = tet_quadrature(V[perm])
    lam, G = barycentric(V[perm], X), p1_gradients(V[perm])
    K = ops.stiffness.toarray()[np.ix_(perm, perm)]
    M = ops.mass.toarray()[np.ix_(perm, perm)]
    tet_err = max(np.max(np.abs(K - np.einsum("q,ia,ja->ij", w, G, G))),
                  np.max(np.abs(M - np.einsum("q,qi,qj->ij", w, lam, lam))))
    p_errs = ppe_manufactured()
    s_errs, _ = ste_manufactured()
    box = fem.box_mesh(2)
    z = np.zeros((box.n_nodes, 3))
    zero = (not np.any(fem.ppe_solve(box, z, z, z).values) and not np.any(fem.ste_solve(box, z, z, z)[1].values))
    box3 = fem.box_mesh(3)
    Pu = np.linalg.qr(rng.standard_normal((3 * box3.n_nodes, 4)))[0]
    Pp = np.linalg.qr(rng.standard_normal((box3.n_nodes, 3)))[0]
    dim_ok = fem.rom_project_ste(box3, Pu, Pp).dim == 4 + 2 * 3
    A = rng.standard_normal((3 * box.n_nodes,) * 2)
    S1 = fem.BlockCovariance.from_dense(box, A @ A.T / A.shape[0])
    b1 = fem.bias_correction(box, S1, mode="ppe").values
    b2 = fem.bias_correction(box, S1.scaled(3.0), mode="ppe").values
    b0 = fem.bias_correction(box, S1.scaled(0.0), mode="ppe").values
    lin = float(np.max(np.abs(b2 - 3 * b1)) / np.max(np.abs(b1)))
    ok = (tet_err <= 1e-12 and observed_order(p_errs) >= 1 and observed_order(s_errs) >= 1 and zero and dim_ok
          and lin < 1e-12 and not np.any(b0))
    return ok, (f"element err {tet_err:.1e}, PPE order {observed_order(p_errs):.2f}, "
                f"STE order {observed_order(s_errs):.2f}, zero data exact {zero}, "
                f"ROM dim r_u+2r_p {dim_ok}, bias linearity {lin:.1e}")


@criterion(11, "Windkessel calibration and integration", 30)
def test_c11_windkessel():
    p = WindkesselParams(1.2e7, 1.08e8, 2.5e-9)
    dt, Q = 1e-3, 8e-5
    P = simulate(p, np.full(int(15 * p.R_d * p.C / dt) + 1, Q), dt)
    steady = abs(P[-1] / ((p.R_p + p.R_d) * Q) - 1)
    s = flow_split([0.4, 0.2, 0.3, 0.1], [1e-4, 2e-4, 1.5e-4, 0.5e-4])
    inp = CalibrationInput(1e-4, 1.2e8, [0.4, 0.2, 0.3, 0.1], 5e-5, [1e-4, 2e-4, 1.5e-4, 0.5e-4])
    R_S = 1e-4 / 5e-5 * 1.2e8
    par = calibrate_windkessel(inp, "parallel-consistent")
    rel = abs(sum(1 / (q.R_p + q.R_d) for q in par) * R_S - 1)
    ok = steady < 1e-6 and abs(s.sum() - 1) < 1e-15 and rel <= 1e-12
    return ok, f"steady state rel {steady:.1e}, sum sigma - 1 = {s.sum() - 1:.1e}, parallel rel {rel:.1e}"


@criterion(12, "wall shear stress and OSI", 30)
def test_c12_biomarkers():
    rng = np.random.default_rng(12)
    lo, hi = np.inf, -np.inf
    for _ in range(1000):
        _, osi = twss_osi(rng.standard_normal((8, 1, 3)) * rng.uniform(0, 5))
        lo, hi = min(lo, osi.min()), max(hi, osi.max())
    tau = rng.standard_normal((1, 3))
    _, alt = twss_osi(np.array([tau * (-1) ** k for k in range(8)]))

    def top_wall(c):
        out = np.full(len(c), int(RegionId.INLET))
        out[np.isclose(c[:, 2], 1.0)] = int(RegionId.WALL)
        return out

    mesh = fem.box_mesh(2, labeler=top_wall)
    gamma, mu = 3.0, 0.7
    u = np.zeros((mesh.n_nodes, 3))
    u[:, 0] = gamma * mesh.vertices[:, 2]
    t = wall_shear_stress(mesh, u, mu)
    wss = float(np.max(np.abs(t.tau - [mu * gamma, 0, 0])))
    ok = lo >= 0 and hi <= 0.5 and alt[0] == pytest.approx(0.5, abs=1e-15) and wss <= 1e-12
    return ok, f"OSI range [{lo:.3f}, {hi:.3f}], alternating {alt[0]:.3f}, shear err {wss:.1e}"


@criterion(13, "CLI determinism (register, pbdw)", 120)
def test_c13_determinism(tmp_path_factory):
    root = write_demo(tmp_path_factory.mktemp("acc_demo"))
    same = {}
    for cmd in ("register", "pbdw"):
        out = root / "out" / cmd
        digests = []
        for _ in range(2):
            assert cli.run([cmd, "--config", str(root / f"{cmd}.toml"), "--threads", "1",
                            "--output", str(out)]) == 0
            digests.append({f.name: f.read_bytes() for f in sorted(out.iterdir())})
        same[cmd] = digests[0] == digests[1] and len(digests[0]) > 1
    return all(same.values()), ", ".join(f"{k} identical {v}" for k, v in same.items())


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
