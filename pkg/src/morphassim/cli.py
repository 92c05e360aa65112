"""Command-line front end: ``morphassim <command> --config run.toml``.

Exit codes: 0 success, 2 configuration/schema error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from threadpoolctl import threadpool_limits

from . import assimilation as da
from . import biomarkers as bm
from . import fem
from . import lumped
from . import manifold as mf
from . import registration as reg
from . import transport as tr
from .config import ConfigError, RunSection, bind, input_path, read_document, resolve_threads, to_plain, \
    apply_overrides, write_manifest
from .io import FormatError, read_fmat, write_csv, write_fmat
from .mesh import MeshError, load_surface_mesh, mesh_diameter

log = logging.getLogger("morphassim")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class NumericalFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# section schemas (library dataclasses are reused where they exist)


@dataclass(frozen=True)
class RegisterSection:
    source_levels: tuple[str, ...] = input_path()
    target: str = input_path()
    hidden: tuple[int, ...] = (500,) * 6
    output_gain: float = 1.0
    n_cntrl: int | None = None
    lipschitz_pairs: int = 10_000


@dataclass(frozen=True)
class TransportSection:
    source_points: str = input_path()
    field_values: str = input_path()
    query_points: str = input_path()
    mapped_points: str | None = input_path(optional=True)
    model: str | None = input_path(optional=True)
    field_mesh: str | None = input_path(optional=True)
    field_points: str | None = input_path(optional=True)
    mode: str = "pushforward"
    k: int = 30

    def __post_init__(self):
        if self.mode not in ("pushforward", "pullback"):
            raise ValueError("mode must be 'pushforward' or 'pullback'")
        if (self.mapped_points is None) == (self.model is None):
            raise ValueError("give exactly one of mapped_points and model")
        if self.field_mesh is None and self.field_points is None:
            raise ValueError("give field_mesh or field_points to locate the field values")


@dataclass(frozen=True)
class RsvdSection:
    snapshots: str = input_path()
    rank: int = 10
    oversample: int = 10
    power_iters: int = 2
    kind: str = "velocity"
    test: str | None = input_path(optional=True)
    ranks: tuple[int, ...] = ()


@dataclass(frozen=True)
class SimilarSection:
    items: tuple[str, ...] = input_path()
    metric: str = "hausdorff"
    compare_items: tuple[str, ...] | None = input_path(optional=True)
    compare_metric: str = "enc"
    n_perm: int = 999
    mds_dim: int = 2

    def __post_init__(self):
        for m in (self.metric, self.compare_metric):
            if m not in mf.METRICS:
                raise ValueError(f"metric must be one of {mf.METRICS}, got {m!r}")


@dataclass(frozen=True)
class PbdwSection:
    mesh: str = input_path()
    basis: str = input_path()
    measurements: str | None = input_path(optional=True)
    truth: str | None = input_path(optional=True)
    voxel_edge: float = 2e-3
    origin: tuple[float, float, float] | None = None
    shape: tuple[int, int, int] | None = None
    include_divergence: bool = True
    covariance: bool = True

    def __post_init__(self):
        if (self.measurements is None) == (self.truth is None):
            raise ValueError("give exactly one of measurements and truth")
        if (self.origin is None) != (self.shape is None):
            raise ValueError("origin and shape must be given together")


@dataclass(frozen=True)
class NoiseSection:
    preset: str | None = None
    snr_ho: float | None = None
    snr_he: float | None = None
    sigma_div2: float | None = None
    delta: float | None = None
    l_T: float | None = None
    eps2: float = 0.1
    floor: float | None = None

    def __post_init__(self):
        if self.preset is not None and self.preset not in da.NOISE_PRESETS:
            raise ValueError(f"unknown noise preset {self.preset!r}; choose from {sorted(da.NOISE_PRESETS)}")

    def model(self) -> da.NoiseModel:
        base = da.NoiseModel.preset(self.preset) if self.preset else da.NoiseModel()
        kw = {k: v for k, v in dataclasses.asdict(self).items() if k != "preset" and v is not None}
        return dataclasses.replace(base, **kw)


@dataclass(frozen=True)
class PressureSection:
    mesh: str = input_path()
    u_n: str = input_path()
    u_half: str = input_path()
    u_next: str = input_path()
    method: str = "ppe"
    tau: float = fem.TAU_DEFAULT
    rho: float = fem.RHO_BLOOD
    mu: float = fem.MU_BLOOD
    c_s: float = 1.0
    basis_p: str | None = input_path(optional=True)
    basis_u: str | None = input_path(optional=True)
    enrich: bool = True
    bias_covariance: str | None = input_path(optional=True)
    section_in: str | None = None
    sections_out: tuple[str, ...] = ()

    def __post_init__(self):
        if self.method not in ("ppe", "ste", "ppe-rom", "ste-rom"):
            raise ValueError("method must be ppe, ste, ppe-rom or ste-rom")
        if self.method.endswith("rom") and self.basis_p is None:
            raise ValueError("reduced methods need basis_p")
        if self.method == "ste-rom" and self.basis_u is None:
            raise ValueError("ste-rom needs basis_u")


@dataclass(frozen=True)
class WindkesselSection:
    mode: str = "calibrate"
    convention: str = "as-written"
    Q_in_ref: float | None = None
    R_S_ref: float | None = None
    u_mean_ref: tuple[float, ...] = ()
    Q_in: float | None = None
    areas: tuple[float, ...] = ()
    C_tot: float = lumped.C_TOT_DEFAULT
    R_p: float | None = None
    R_d: float | None = None
    C: float | None = None
    pi0: float = 0.0
    dt: float = 1e-3
    scheme: str = "implicit"
    flow: tuple[float, ...] = ()

    def __post_init__(self):
        if self.mode not in ("calibrate", "simulate"):
            raise ValueError("mode must be 'calibrate' or 'simulate'")
        need = ("Q_in_ref", "R_S_ref", "Q_in") if self.mode == "calibrate" else ("R_p", "R_d", "C")
        for k in need:
            if getattr(self, k) is None:
                raise ConfigError(f"windkessel.{k}", f"required in {self.mode} mode")


@dataclass(frozen=True)
class BiomarkersSection:
    mesh: str = input_path()
    velocities: tuple[str, ...] = input_path()
    mu: float = fem.MU_BLOOD


COMMANDS: dict[str, tuple[Callable, dict[str, type], str]] = {}


def command(name: str, sections: dict[str, type], help: str):
    def deco(fn):
        COMMANDS[name] = (fn, sections, help)
        return fn

    return deco


# ---------------------------------------------------------------------------
# helpers


def _points(path: str) -> np.ndarray:
    a = read_fmat(path)
    if a.size % 3:
        raise ConfigError(path, f"expected 3-D points, found a {a.shape[0]}x{a.shape[1]} matrix")
    return a if a.shape[1] == 3 else a.reshape(-1, 3)


def _nodal(path: str, mesh: fem.TetMesh) -> np.ndarray:
    a = read_fmat(path)
    if a.size != 3 * mesh.n_nodes:
        raise ConfigError(path, f"expected {3 * mesh.n_nodes} velocity dofs, found {a.size}")
    return a.reshape(-1, 3) if a.shape != (mesh.n_nodes, 3) else a


# ---------------------------------------------------------------------------
# commands


@command("register", {"register": RegisterSection, "rff": reg.RffConfig, "flow": reg.FlowConfig,
                      "loss": reg.LossWeights, "multigrid": reg.MultigridSchedule, "adam": reg.AdamConfig},
         "train a multigrid registration")
def cmd_register(cfg, run: RunSection, out: Path) -> list[str]:
    c: RegisterSection = cfg["register"]
    levels = [load_surface_mesh(p, c.n_cntrl) for p in c.source_levels]
    target = load_surface_mesh(c.target, c.n_cntrl)
    res = reg.train_multigrid(levels, target, cfg["loss"], cfg["multigrid"], cfg["adam"], seed=run.seed,
                              hidden=c.hidden, rff=cfg["rff"], flow=cfg["flow"], output_gain=c.output_gain)
    reg.save_model(res.net, out / "model.flownet", cfg["flow"])
    write_fmat(out / "mapped.fmat", res.mapped)
    trace = np.asarray(res.loss_trace)
    e = reg.ema(trace) if trace.size else trace
    write_csv(out / "loss.csv", ["epoch", "level", "loss", "ema"],
              zip(range(trace.size), res.level_trace, trace, e))
    cert = res.certificate
    write_csv(out / "summary.csv", ["key", "value"], [
        ("normalized_chamfer", res.normalized_chamfer),
        ("lipschitz_bound", cert.bound),
        ("lipschitz_empirical", cert.empirical),
        ("dt", cert.dt),
        ("verdict", cert.verdict),
    ])
    return ["model.flownet", "mapped.fmat", "loss.csv", "summary.csv"]


@command("transport", {"transport": TransportSection}, "push forward or pull back a field")
def cmd_transport(cfg, run: RunSection, out: Path) -> list[str]:
    c: TransportSection = cfg["transport"]
    src = _points(c.source_points)
    if c.model is not None:
        net, flow = reg.load_model(c.model)
        mapped = reg.apply_flow(net, src, flow)
    else:
        mapped = _points(c.mapped_points)
    fwd = tr.RbfMap.fit(src, mapped, c.k)
    vals = read_fmat(c.field_values)
    if c.field_mesh is not None:
        g = fem.FemField(fem.load_tet_mesh(c.field_mesh), vals[:, 0] if vals.shape[1] == 1 else vals)
    else:
        g = tr.RbfMap(_points(c.field_points), vals, min(c.k, vals.shape[0]))
    Q = _points(c.query_points)
    if c.mode == "pushforward":
        res = tr.pushforward_field(g, fwd, None, Q)
    else:
        res = tr.pullback_field(g, fwd, Q)
    res = np.asarray(res).reshape(Q.shape[0], -1)
    write_fmat(out / "transported.fmat", res)
    return ["transported.fmat"]


@command("rsvd", {"rsvd": RsvdSection}, "randomized SVD basis and reconstruction errors")
def cmd_rsvd(cfg, run: RunSection, out: Path) -> list[str]:
    c: RsvdSection = cfg["rsvd"]
    X = read_fmat(c.snapshots)
    basis = mf.rsvd(X, c.rank, c.oversample, c.power_iters, seed=run.seed)
    write_fmat(out / "basis.fmat", basis.Phi)
    write_csv(out / "singular_values.csv", ["index", "sigma"], enumerate(basis.sigma))
    T = read_fmat(c.test) if c.test is not None else X
    ranks = c.ranks or tuple(range(1, basis.rank + 1))
    rows = []
    for r in ranks:
        if not 1 <= r <= basis.rank:
            raise ConfigError("rsvd.ranks", f"rank {r} outside [1, {basis.rank}]")
        B = basis.truncate(r)
        for j in range(T.shape[1]):
            rows.append((r, j, mf.reconstruction_error(T[:, j], B, c.kind)))
    write_csv(out / "reconstruction_error.csv", ["rank", "column", "error"], rows)
    return ["basis.fmat", "singular_values.csv", "reconstruction_error.csv"]


@command("similar", {"similar": SimilarSection}, "dissimilarity matrices, Mantel test and MDS")
def cmd_similar(cfg, run: RunSection, out: Path) -> list[str]:
    c: SimilarSection = cfg["similar"]
    A = mf.dissimilarity_matrix([read_fmat(p) for p in c.items], c.metric)
    B = mf.dissimilarity_matrix([read_fmat(p) for p in (c.compare_items or c.items)], c.compare_metric)
    if A.n != B.n:
        raise ConfigError("similar.compare_items", f"expected {A.n} items, got {B.n}")
    for name, D in (("dissimilarity.csv", A), ("compare_dissimilarity.csv", B)):
        write_csv(out / name, ["i", "j", "d"], [(i, j, D.D[i, j]) for i in range(D.n) for j in range(D.n)])
    r, p = mf.mantel_test(A, B, c.n_perm, seed=run.seed)
    write_csv(out / "mantel.csv", ["r", "p", "n_perm"], [(r, p, c.n_perm)])
    Y = mf.mds_embed(A, c.mds_dim)
    write_csv(out / "mds.csv", ["item"] + [f"x{k}" for k in range(Y.shape[1])],
              [(i, *row) for i, row in enumerate(Y)])
    return ["dissimilarity.csv", "compare_dissimilarity.csv", "mantel.csv", "mds.csv"]


@command("pbdw", {"pbdw": PbdwSection, "noise": NoiseSection}, "reconstruct a velocity field from voxel data")
def cmd_pbdw(cfg, run: RunSection, out: Path) -> list[str]:
    c: PbdwSection = cfg["pbdw"]
    noise = cfg["noise"].model()
    mesh = fem.load_tet_mesh(c.mesh)
    grid = (da.VoxelGrid(c.voxel_edge, c.origin, c.shape) if c.origin is not None
            else da.VoxelGrid.covering(mesh, c.voxel_edge))
    Phi = read_fmat(c.basis)
    obs = da.ObservationSystem.build(mesh, grid, Phi, c.include_divergence)
    if obs.n_voxels == 0:
        raise NumericalFailure("no voxel center lies inside the mesh")
    if c.truth is not None:
        y0 = obs.observe(_nodal(c.truth, mesh))
        S0 = da.build_noise_covariance(obs, noise, y0).S
        rng = np.random.Generator(np.random.Philox(run.seed))
        y = y0 + np.linalg.cholesky(S0) @ rng.standard_normal(obs.m)
    else:
        y = read_fmat(c.measurements).reshape(-1)
        if y.size != obs.m:
            raise ConfigError("pbdw.measurements", f"expected {obs.m} entries, found {y.size}")
    S = da.build_noise_covariance(obs, noise, y)
    sol = da.pbdw_solve(obs, S, y, keep_factors=c.covariance)
    write_fmat(out / "measurements.fmat", y)
    write_fmat(out / "state.fmat", sol.state.reshape(-1, 3))
    write_csv(out / "coefficients.csv", ["index", "z"], enumerate(sol.z))
    diag = [("m", obs.m), ("r", obs.r), ("n_voxels", obs.n_voxels), ("n_he", int(S.he.sum())),
            ("u_bar", S.u_bar), ("eta_norm", float(np.linalg.norm(sol.eta)))]
    if c.covariance:
        cov = da.pbdw_state_covariance(obs, S, sol, full=False)
        diag.append(("noise_trace", cov.trace))
    write_csv(out / "diagnostics.csv", ["key", "value"], diag)
    return ["measurements.fmat", "state.fmat", "coefficients.csv", "diagnostics.csv"]


@command("pressure", {"pressure": PressureSection}, "pressure estimators and pressure drops")
def cmd_pressure(cfg, run: RunSection, out: Path) -> list[str]:
    c: PressureSection = cfg["pressure"]
    mesh = fem.load_tet_mesh(c.mesh)
    u = [_nodal(p, mesh) for p in (c.u_n, c.u_half, c.u_next)]
    ops = fem.assemble_p1(mesh)
    outputs = []
    if c.method == "ppe":
        p = fem.ppe_solve(mesh, *u, c.tau, c.rho, c.mu, ops)
    elif c.method == "ste":
        w, p = fem.ste_solve(mesh, *u, c.tau, c.rho, c.mu, c.c_s, ops)
        write_fmat(out / "w.fmat", w.values)
        outputs.append("w.fmat")
    elif c.method == "ppe-rom":
        p = fem.rom_project_ppe(mesh, read_fmat(c.basis_p), c.tau, c.rho, ops).solve(*u)
    else:
        rom = fem.rom_project_ste(mesh, read_fmat(c.basis_u), read_fmat(c.basis_p), c.enrich,
                                  c.tau, c.rho, c.mu, c.c_s, ops)
        w, p = rom.solve(*u)
        write_fmat(out / "w.fmat", w.values)
        outputs.append("w.fmat")
    fields = {"p": p}
    if c.bias_covariance is not None:
        Sig = fem.BlockCovariance.from_dense(mesh, read_fmat(c.bias_covariance))
        mode = "ppe" if c.method.startswith("ppe") else "ste"
        b = fem.bias_correction(mesh, Sig, c.rho, mode, c.c_s, ops)
        b = b if mode == "ppe" else b[1]
        fields["bias"] = b
        fields["p_corrected"] = fem.FemField(mesh, p.values - b.values)
    for name, f in fields.items():
        write_fmat(out / f"{name}.fmat", f.values)
        outputs.append(f"{name}.fmat")
    if c.sections_out:
        if c.section_in is None:
            raise ConfigError("pressure.section_in", "required when sections_out is given")
        for s in (c.section_in, *c.sections_out):
            if s not in mesh.sections:
                raise ConfigError("pressure.sections_out", f"mesh has no section {s!r}")
        rows = [(name, c.section_in, s, fem.pressure_drop(mesh, f, c.section_in, s))
                for name, f in fields.items() for s in c.sections_out]
        write_csv(out / "drops.csv", ["field", "section_in", "section_out", "drop"], rows)
        outputs.append("drops.csv")
    return outputs


@command("windkessel", {"windkessel": WindkesselSection}, "calibrate or simulate RCR outlets")
def cmd_windkessel(cfg, run: RunSection, out: Path) -> list[str]:
    c: WindkesselSection = cfg["windkessel"]
    if c.mode == "calibrate":
        try:
            inp = lumped.CalibrationInput(c.Q_in_ref, c.R_S_ref, c.u_mean_ref, c.Q_in, c.areas, c.C_tot)
        except ValueError as exc:
            raise ConfigError("windkessel", str(exc)) from None
        params = lumped.calibrate_windkessel(inp, c.convention)
        sigma = lumped.flow_split(inp.u_mean_ref, inp.areas)
        write_csv(out / "windkessel.csv", ["outlet", "sigma", "R_p", "R_d", "C"],
                  [(i, s, p.R_p, p.R_d, p.C) for i, (s, p) in enumerate(zip(sigma, params))])
        return ["windkessel.csv"]
    if not c.flow:
        raise ConfigError("windkessel.flow", "simulate mode needs a flow series")
    params = lumped.WindkesselParams(c.R_p, c.R_d, c.C, c.pi0)
    P = lumped.simulate(params, np.asarray(c.flow), c.dt, c.scheme)
    write_csv(out / "pressure.csv", ["step", "time", "flow", "pressure"],
              [(i, (i + 1) * c.dt, q, p) for i, (q, p) in enumerate(zip(c.flow, P))])
    return ["pressure.csv"]


@command("biomarkers", {"biomarkers": BiomarkersSection}, "wall shear stress, TWSS and OSI per wall face")
def cmd_biomarkers(cfg, run: RunSection, out: Path) -> list[str]:
    c: BiomarkersSection = cfg["biomarkers"]
    mesh = fem.load_tet_mesh(c.mesh)
    series = [bm.wall_shear_stress(mesh, _nodal(p, mesh), c.mu) for p in c.velocities]
    twss, osi = bm.twss_osi(series, n_samples=len(series))
    first = series[0]
    mag = np.linalg.norm(np.stack([s.tau for s in series]), axis=2).mean(axis=0)
    write_csv(out / "wall.csv",
              ["face", "area", "twss_x", "twss_y", "twss_z", "twss_mag", "mean_wss_mag", "osi"],
              [(f, a, *t, float(np.linalg.norm(t)), m, o)
               for f, a, t, m, o in zip(first.face_ids, first.areas, twss, mag, osi)])
    return ["wall.csv"]


# ---------------------------------------------------------------------------
# entry point


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="morphassim", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name, (_, _, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="TOML config or a previous run's manifest.json")
        p.add_argument("--seed", type=int, default=None, help="overrides run.seed")
        p.add_argument("--threads", type=int, default=None, help="BLAS threads (fallback: MORPHASSIM_THREADS)")
        p.add_argument("--deterministic", action="store_true", help="force a single thread")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config entry (TOML value syntax)")
        p.add_argument("--output", default=None, help="overrides run.output")
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def run(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    fn, sections, _ = COMMANDS[args.command]
    # schema stage
    try:
        doc = read_document(args.config)
        base = Path(doc.pop("__base__"))
        extra = list(args.set)
        if args.seed is not None:
            extra.append(f"run.seed={args.seed}")
        if args.output is not None:
            extra.append(f"run.output={args.output!r}")
        if args.deterministic:
            extra.append("run.deterministic=true")
        doc = apply_overrides(doc, extra)
        unknown = sorted(set(doc) - set(sections) - {"run"})
        if unknown:
            raise ConfigError(unknown[0], f"unknown section for '{args.command}'")
        run_cfg = bind(RunSection, doc, "run", base)
        cfg = {name: bind(cls, doc, name, base) for name, cls in sections.items()}
        threads = resolve_threads(args.threads, run_cfg)
    except ConfigError as exc:
        print(f"morphassim: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(run_cfg.output)
    if not out.is_absolute():
        out = (base / out).resolve() if args.output is None else Path(args.output).resolve()
    run_cfg = dataclasses.replace(run_cfg, output=str(out))
    resolved = {"run": to_plain(run_cfg), **{k: to_plain(v) for k, v in cfg.items()}}
    try:
        out.mkdir(parents=True, exist_ok=True)
        with threadpool_limits(limits=threads):
            outputs = fn(cfg, run_cfg, out)
        write_manifest(out, args.command, resolved, run_cfg.seed, threads, outputs)
    except ConfigError as exc:
        print(f"morphassim: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError, MeshError) as exc:
        print(f"morphassim: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (np.linalg.LinAlgError, FloatingPointError, ArithmeticError, NumericalFailure, ValueError,
            reg.RegistrationDivergence, reg.InversionError, fem.SolverError) as exc:
        print(f"morphassim: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    log.info("wrote %d output(s) to %s", len(outputs), out)
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
