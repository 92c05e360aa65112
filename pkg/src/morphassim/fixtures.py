"""Synthetic inputs: the sphere-to-ellipsoid registration pair, a labeled channel
mesh with smooth flows, and a generator for runnable CLI demo directories."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fem
from . import registration as reg
from .io import write_fmat
from .mesh import LabeledSurfaceMesh, RegionId, icosphere, label_caps, save_surface_mesh, straight_centerline


def ellipsoid_mesh(subdivisions: int, radius: float = 0.1, scale=(1.0, 1.0, 1.0),
                   n_cntrl: int = 20) -> LabeledSurfaceMesh:
    """Icosphere scaled per axis, with capped inlet/outlet labels and a straight centerline along z."""
    v, f = icosphere(subdivisions, radius)
    v = v * np.asarray(scale, dtype=np.float64)
    zmax = radius * float(scale[2]) * 0.9
    return LabeledSurfaceMesh(v, f, label_caps(v, f), straight_centerline(n_cntrl, [0, 0, -zmax], [0, 0, zmax]))


@dataclass(frozen=True)
class RegistrationBenchmark:
    """Sphere (320 faces, refined once) onto the (1.3, 0.9, 1.0) ellipsoid in two multigrid levels."""

    radius: float = 0.1
    scale: tuple[float, float, float] = (1.3, 0.9, 1.0)
    level_subdivisions: tuple[int, ...] = (2, 3)
    target_subdivisions: int = 3
    hidden: tuple[int, ...] = (64, 64)
    output_gain: float = 1e-3
    rff: reg.RffConfig = reg.RffConfig(4)
    flow: reg.FlowConfig = reg.FlowConfig(10)
    weights: reg.LossWeights = reg.LossWeights(5e-5, 1e-5, 0.0, 0.0)
    schedule: reg.MultigridSchedule = reg.MultigridSchedule(800, (300,))
    adam: reg.AdamConfig = field(default_factory=lambda: reg.AdamConfig(lr=1e-3, warmup=20, final_lr_factor=0.01))

    def meshes(self) -> tuple[list[LabeledSurfaceMesh], LabeledSurfaceMesh]:
        levels = [ellipsoid_mesh(s, self.radius) for s in self.level_subdivisions]
        return levels, ellipsoid_mesh(self.target_subdivisions, self.radius, self.scale)

    def run(self, seed: int = 0) -> reg.RegistrationResult:
        levels, target = self.meshes()
        return reg.train_multigrid(levels, target, self.weights, self.schedule, self.adam, seed=seed,
                                   hidden=self.hidden, rff=self.rff, flow=self.flow,
                                   output_gain=self.output_gain)


def channel_mesh(n: int = 4, length: float = 0.04, width: float = 0.02) -> fem.TetMesh:
    """Box channel along x: INLET at x = 0, OUTLET_1 at x = length, WALL elsewhere; sections
    ``inlet`` and ``outlet_1`` index those boundary faces."""
    hi = (length, width, width)

    def labeler(c):
        lab = np.full(c.shape[0], int(RegionId.WALL))
        lab[np.isclose(c[:, 0], 0.0)] = int(RegionId.INLET)
        lab[np.isclose(c[:, 0], length)] = int(RegionId.OUTLET_1)
        return lab

    m = fem.box_mesh(n, (0.0, 0.0, 0.0), hi, labeler)
    sections = {"inlet": m.faces_with_label(RegionId.INLET), "outlet_1": m.faces_with_label(RegionId.OUTLET_1)}
    return fem.TetMesh(m.vertices, m.tets, m.boundary_faces, m.boundary_labels, sections)


def duct_flow(mesh: fem.TetMesh, amplitude: float = 0.5) -> np.ndarray:
    """Axial duct profile ``16 U y z (w - y)(w - z) / w^4`` along x, zero on the side walls."""
    V = mesh.vertices
    w = V[:, 1].max()
    u = np.zeros_like(V)
    u[:, 0] = 16.0 * amplitude * V[:, 1] * V[:, 2] * (w - V[:, 1]) * (w - V[:, 2]) / w ** 4
    return u


def smooth_fields(points, n: int, seed: int = 0, components: int = 3) -> np.ndarray:
    """``n`` random low-order trigonometric fields sampled on ``points``; shape (components * p, n)."""
    P = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    span = np.ptp(P, axis=0)
    X = (P - P.min(axis=0)) / np.where(span > 0, span, 1.0)
    rng = np.random.default_rng(seed)
    out = np.empty((P.shape[0], components, n))
    for j in range(n):
        k = rng.integers(0, 3, size=(components, 3))
        ph = rng.uniform(0, 2 * np.pi, size=(components, 3))
        amp = rng.standard_normal(components)
        out[:, :, j] = amp * np.prod(np.cos(np.pi * k[None] * X[:, None, :] + ph[None]), axis=2)
    return out.reshape(-1, n)


# ---------------------------------------------------------------------------
# demo directory


_REGISTER_QUICK = """\
[run]
seed = 0
output = "out/register"

[register]
source_levels = ["sphere_l1.json", "sphere_l2.json"]
target = "ellipsoid.json"
hidden = [16, 16]
output_gain = 1e-3

[rff]
n_rff = 4

[loss]
lambda_n = 5e-5
lambda_C = 1e-5
lambda_edges = 0.0
lambda_en = 0.0

[multigrid]
total_epochs = 40
switch_epochs = [20]

[adam]
lr = 1e-3
warmup = 5
final_lr_factor = 0.1
"""

_REGISTER_BENCH = """\
[run]
seed = 0
output = "out/register_benchmark"

[register]
source_levels = ["sphere_l2.json", "sphere_l3.json"]
target = "ellipsoid.json"
hidden = [64, 64]
output_gain = 1e-3

[rff]
n_rff = 4

[flow]
n_steps = 10

[loss]
lambda_n = 5e-5
lambda_C = 1e-5
lambda_edges = 0.0
lambda_en = 0.0

[multigrid]
total_epochs = 800
switch_epochs = [300]

[adam]
lr = 1e-3
warmup = 20
final_lr_factor = 0.01
"""

_CONFIGS = {
    "transport.toml": """\
[run]
output = "out/transport"

[transport]
source_points = "grid_points.fmat"
mapped_points = "grid_mapped.fmat"
field_points = "grid_points.fmat"
field_values = "grid_field.fmat"
query_points = "grid_queries.fmat"
mode = "pushforward"
k = 30
""",
    "rsvd.toml": """\
[run]
seed = 0
output = "out/rsvd"

[rsvd]
snapshots = "snapshots.fmat"
rank = 10
kind = "velocity"
""",
    "similar.toml": """\
[run]
seed = 0
output = "out/similar"

[similar]
items = ["block_0.fmat", "block_1.fmat", "block_2.fmat", "block_3.fmat", "block_4.fmat", "block_5.fmat"]
metric = "grassmann"
compare_metric = "hausdorff"
n_perm = 999
mds_dim = 2
""",
    "pbdw.toml": """\
[run]
seed = 0
output = "out/pbdw"

[pbdw]
mesh = "channel.json"
basis = "velocity_basis.fmat"
truth = "velocity_truth.fmat"
voxel_edge = 5e-3
origin = [0.0, 0.0, 0.0]
shape = [8, 4, 4]

[noise]
preset = "low"
""",
    "pressure.toml": """\
[run]
output = "out/pressure"

[pressure]
mesh = "channel.json"
u_n = "u_n.fmat"
u_half = "u_half.fmat"
u_next = "u_next.fmat"
method = "ste"
section_in = "inlet"
sections_out = ["outlet_1"]
""",
    "windkessel.toml": """\
[run]
output = "out/windkessel"

[windkessel]
mode = "calibrate"
convention = "as-written"
Q_in_ref = 1e-4
R_S_ref = 1.2e8
u_mean_ref = [0.3, 0.2, 0.25]
Q_in = 8e-5
areas = [1.2e-4, 0.8e-4, 1.0e-4]
""",
    "biomarkers.toml": """\
[run]
output = "out/biomarkers"

[biomarkers]
mesh = "channel.json"
velocities = ["u_t0.fmat", "u_t1.fmat", "u_t2.fmat", "u_t3.fmat", "u_t4.fmat", "u_t5.fmat", "u_t6.fmat", "u_t7.fmat"]
""",
}


def write_demo(root: str | Path, seed: int = 0) -> Path:
    """Write demo inputs and one config per CLI command under ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    # registration pair
    for s in (1, 2, 3):
        save_surface_mesh(ellipsoid_mesh(s), root / f"sphere_l{s}.json")
    save_surface_mesh(ellipsoid_mesh(3, scale=(1.3, 0.9, 1.0)), root / "ellipsoid.json")
    (root / "register.toml").write_text(_REGISTER_QUICK)
    (root / "register_benchmark.toml").write_text(_REGISTER_BENCH)
    # transport: mild sinusoidal warp of a point grid
    g = np.linspace(0.0, 0.1, 8)
    P = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
    warp = P + 1e-3 * np.sin(2 * np.pi * P[:, [1, 2, 0]] / 0.1)
    write_fmat(root / "grid_points.fmat", P)
    write_fmat(root / "grid_mapped.fmat", warp)
    write_fmat(root / "grid_field.fmat", np.stack([P[:, 0] + 2 * P[:, 1], np.cos(10 * P[:, 2])], 1))
    write_fmat(root / "grid_queries.fmat", warp[::7])
    # snapshots
    write_fmat(root / "snapshots.fmat", smooth_fields(P, 40, seed))
    for i in range(6):
        write_fmat(root / f"block_{i}.fmat", smooth_fields(P[::4], 3, seed + 1 + i))
    # channel flow
    mesh = channel_mesh(6)
    fem.save_tet_mesh(mesh, root / "channel.json")
    u = duct_flow(mesh)
    Phi = np.linalg.qr(np.concatenate([u.reshape(-1, 1), smooth_fields(mesh.vertices, 7, seed)], axis=1))[0]
    write_fmat(root / "velocity_basis.fmat", Phi)
    truth = Phi @ rng.standard_normal(Phi.shape[1]) * 0.1 + u.reshape(-1)
    write_fmat(root / "velocity_truth.fmat", truth.reshape(-1, 3))
    for name, a in (("u_n", 0.95), ("u_half", 1.0), ("u_next", 1.05)):
        write_fmat(root / f"{name}.fmat", a * u)
    for k in range(8):
        write_fmat(root / f"u_t{k}.fmat", np.cos(2 * np.pi * k / 8) * u + 0.1 * u)
    for name, text in _CONFIGS.items():
        (root / name).write_text(text)
    return root
