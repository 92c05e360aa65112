"""ResNet-LDDMM shape registration.

The deformation is the time-1 flow of an autonomous vector field
``f(x) = FNN(psi(x))`` integrated with forward Euler, where ``psi`` appends
power-of-two cosine/sine features to the raw coordinates. Training minimizes
the mesh Chamfer distance plus centerline, edge-length and kinetic-energy
penalties with Adam, switching to finer source meshes at fixed epochs.
"""

from __future__ import annotations

import json
import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .mesh import LabeledSurfaceMesh, MeshError, RegionId, mesh_diameter, region_points
from .metrics import MissingRegionWarning, chamfer, chamfer_selectors, nearest

log = logging.getLogger(__name__)


class RegistrationDivergence(RuntimeError):
    def __init__(self, msg: str, trace: list[float]):
        super().__init__(msg)
        self.trace = trace


class NonFiniteFlow(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"non-finite value in flow at Euler step {step}")
        self.step = step


class InversionError(RuntimeError):
    def __init__(self, msg: str, contraction: float):
        super().__init__(msg)
        self.contraction = contraction


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class RffConfig:
    n_rff: int = 8

    @property
    def dim(self) -> int:
        return 3 + 6 * self.n_rff

    @property
    def frequencies(self) -> np.ndarray:
        return 2.0 ** np.arange(self.n_rff)

    @property
    def jacobian_bound(self) -> float:
        """Bound on the spectral norm of the embedding Jacobian."""
        return float(np.sqrt(1.0 + np.sum(2.0 * 4.0 ** np.arange(self.n_rff))))


@dataclass(frozen=True)
class FlowConfig:
    n_steps: int = 10

    @property
    def dt(self) -> float:
        return 1.0 / self.n_steps


@dataclass(frozen=True)
class LossWeights:
    lambda_n: float = 5e-5
    lambda_C: float = 1e-5
    lambda_edges: float = 1.0
    lambda_en: float = 1.0

    def __post_init__(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ValueError(f"{k} must be >= 0")


@dataclass(frozen=True)
class MultigridSchedule:
    total_epochs: int = 5000
    switch_epochs: tuple[int, ...] = (3000, 4000)

    def __post_init__(self):
        s = tuple(int(e) for e in self.switch_epochs)
        object.__setattr__(self, "switch_epochs", s)
        if any(b <= a for a, b in zip(s, s[1:])):
            raise ValueError("switch epochs must be strictly increasing")
        if s and s[-1] >= self.total_epochs and self.total_epochs > 0:
            raise ValueError("switch epochs must be < total_epochs")

    @property
    def n_levels(self) -> int:
        return len(self.switch_epochs) + 1

    def level_at(self, epoch: int) -> int:
        return int(np.searchsorted(self.switch_epochs, epoch, side="right"))


@dataclass(frozen=True)
class AdamConfig:
    """Adam hyperparameters. ``warmup`` ramps the step size linearly over the first
    epochs and ``final_lr_factor`` decays it geometrically to ``lr * final_lr_factor``
    at the last epoch; the defaults give plain constant-rate Adam."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup: int = 0
    final_lr_factor: float = 1.0

    def __post_init__(self):
        if self.lr <= 0 or self.eps <= 0 or not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("invalid Adam hyperparameters")
        if self.warmup < 0 or self.final_lr_factor <= 0:
            raise ValueError("warmup must be >= 0 and final_lr_factor > 0")

    def rate(self, epoch: int, total: int) -> float:
        r = self.lr
        if self.final_lr_factor != 1.0 and total > 1:
            r *= self.final_lr_factor ** (epoch / (total - 1))
        if self.warmup and epoch < self.warmup:
            r *= (epoch + 1) / self.warmup
        return r


# ---------------------------------------------------------------------------
# network


def rff_embed(x, cfg: RffConfig = RffConfig()) -> np.ndarray:
    """``(x, cos(2^0 x), ..., cos(2^{n-1} x), sin(2^0 x), ..., sin(2^{n-1} x))`` per row."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x.reshape(-1, 3)
    f = cfg.frequencies
    cos_blocks = [np.cos(w * X) for w in f]
    sin_blocks = [np.sin(w * X) for w in f]
    out = np.concatenate([X] + cos_blocks + sin_blocks, axis=1)
    return out[0] if single else out


def _rff_embed_var(X: ad.Var, cfg: RffConfig) -> ad.Var:
    f = cfg.frequencies
    return ad.concat([X] + [ad.cos(X, w) for w in f] + [ad.sin(X, w) for w in f])


@dataclass
class FlowNet:
    """ReLU feed-forward network ``R^{3+6 n_rff} -> R^3``; identity on the output layer."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    rff: RffConfig = field(default_factory=RffConfig)

    def __post_init__(self):
        if not self.weights:
            raise ValueError("FlowNet needs at least one layer")
        if self.weights[0].shape[0] != self.rff.dim:
            raise ValueError(
                f"first layer expects {self.weights[0].shape[0]} inputs, embedding has {self.rff.dim}"
            )
        if self.weights[-1].shape[1] != 3:
            raise ValueError("output dimension must be 3")

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    @classmethod
    def init(cls, hidden: Sequence[int] = (500,) * 6, rff: RffConfig = RffConfig(),
             seed: int = 0, output_gain: float = 1.0) -> "FlowNet":
        """He-uniform weights, zero biases. ``output_gain`` scales the last layer."""
        rng = np.random.default_rng(seed)
        widths = [rff.dim, *hidden, 3]
        Ws, bs = [], []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            lim = np.sqrt(6.0 / a)
            W = rng.uniform(-lim, lim, size=(a, b))
            if i == len(widths) - 2:
                W *= output_gain
            Ws.append(W)
            bs.append(np.zeros(b))
        return cls(Ws, bs, rff)

    @classmethod
    def zeros(cls, hidden: Sequence[int] = (500,) * 6, rff: RffConfig = RffConfig()) -> "FlowNet":
        widths = [rff.dim, *hidden, 3]
        return cls([np.zeros((a, b)) for a, b in zip(widths[:-1], widths[1:])],
                   [np.zeros(b) for b in widths[1:]], rff)

    def copy(self) -> "FlowNet":
        return FlowNet([W.copy() for W in self.weights], [b.copy() for b in self.biases], self.rff)

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def with_params(self, params: Sequence[np.ndarray]) -> "FlowNet":
        return FlowNet(list(params[0::2]), list(params[1::2]), self.rff)

    def field(self, X) -> np.ndarray:
        """Vector field ``f(x)`` evaluated on the rows of ``X``."""
        h = rff_embed(np.asarray(X, dtype=np.float64).reshape(-1, 3), self.rff)
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if i < last:
                h = np.maximum(h, 0.0)
        return h

    def field_var(self, X: ad.Var, params: Sequence[ad.Var]) -> ad.Var:
        h = _rff_embed_var(X, self.rff)
        n = len(self.weights)
        for i in range(n):
            h = ad.affine(h, params[2 * i], params[2 * i + 1])
            if i < n - 1:
                h = ad.relu(h)
        return h

    def shifted(self, t) -> "FlowNet":
        """Network with ``f'(x) = f(x - t)``.

        The embedding of a translated point is an affine image of the embedding,
        ``psi(x - t) = psi(x) A + c``, so the shift folds into the first layer.
        """
        t = np.asarray(t, dtype=np.float64).reshape(3)
        d = self.rff.dim
        A = np.zeros((d, d))
        c = np.zeros(d)
        A[:3, :3] = np.eye(3)
        c[:3] = -t
        n = self.rff.n_rff
        for i, w in enumerate(self.rff.frequencies):
            cw, sw = np.cos(w * t), np.sin(w * t)
            ci = 3 + 3 * i  # cos block
            si = 3 + 3 * n + 3 * i  # sin block
            for j in range(3):
                # cos(w(x-t)) = cos(wx)cos(wt) + sin(wx)sin(wt)
                A[ci + j, ci + j] = cw[j]
                A[si + j, ci + j] = sw[j]
                # sin(w(x-t)) = sin(wx)cos(wt) - cos(wx)sin(wt)
                A[si + j, si + j] = cw[j]
                A[ci + j, si + j] = -sw[j]
        W0, b0 = self.weights[0], self.biases[0]
        Ws = [A @ W0] + [W.copy() for W in self.weights[1:]]
        bs = [b0 + c @ W0] + [b.copy() for b in self.biases[1:]]
        return FlowNet(Ws, bs, self.rff)


def flow_forward(net: FlowNet, X, cfg: FlowConfig = FlowConfig()) -> list[np.ndarray]:
    """Euler trajectory ``[X_0, ..., X_N]`` with ``X_{i+1} = X_i + dt f(X_i)``."""
    Xi = np.asarray(X, dtype=np.float64).reshape(-1, 3).copy()
    traj = [Xi]
    for i in range(cfg.n_steps):
        Xi = Xi + cfg.dt * net.field(Xi)
        if not np.all(np.isfinite(Xi)):
            raise NonFiniteFlow(i)
        traj.append(Xi)
    return traj


def apply_flow(net: FlowNet, X, cfg: FlowConfig = FlowConfig()) -> np.ndarray:
    return flow_forward(net, X, cfg)[-1]


# ---------------------------------------------------------------------------
# objective


@dataclass
class _RegionPair:
    name: str
    src: np.ndarray
    tgt: np.ndarray


@dataclass
class LossPlan:
    """Index sets and target-side constants reused across epochs for one source level."""

    source: LabeledSurfaceMesh
    target: LabeledSurfaceMesh
    wall_s: np.ndarray
    wall_t: np.ndarray
    target_normals: np.ndarray
    pairs: list[_RegionPair]
    edges: np.ndarray

    @classmethod
    def build(cls, source: LabeledSurfaceMesh, target: LabeledSurfaceMesh) -> "LossPlan":
        from .mesh import _vertex_normals

        if source.centerline.shape[0] != target.centerline.shape[0]:
            raise MeshError(
                f"centerline length mismatch: source {source.centerline.shape[0]}, "
                f"target {target.centerline.shape[0]}"
            )
        ws, wt = region_points(source, RegionId.WALL), region_points(target, RegionId.WALL)
        if ws.size == 0 or wt.size == 0:
            raise ValueError("mesh Chamfer distance needs a nonempty WALL region on both meshes")
        pairs = []
        for name, sel in chamfer_selectors():
            ps, pt = region_points(source, sel), region_points(target, sel)
            if ps.size == 0 or pt.size == 0:
                warnings.warn(MissingRegionWarning(name, "source" if ps.size == 0 else "target"),
                              stacklevel=3)
                continue
            pairs.append(_RegionPair(name, ps, pt))
        f = source.faces
        edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        return cls(source, target, ws, wt, _vertex_normals(target.vertices, target.faces),
                   pairs, edges)


def _chamfer_var(A: ad.Var, B: np.ndarray) -> ad.Var:
    """Chamfer distance between a differentiable cloud and a constant one;
    nearest-neighbour assignments are frozen at their current values."""
    a = A.value
    _, i_ab = nearest(a, B)
    _, i_ba = nearest(B, a)
    d1 = ad.rownorm(A - B[i_ab]).sum() * (1.0 / a.shape[0])
    d2 = ad.rownorm(B - ad.gather(A, i_ba)).sum() * (1.0 / B.shape[0])
    return d1 + d2


def _vertex_normals_var(X: ad.Var, faces: np.ndarray, n: int) -> ad.Var:
    """Angle-weighted unit vertex normals, differentiable in the vertex positions."""
    corners = [ad.gather(X, faces[:, k]) for k in range(3)]
    cr = ad.cross(corners[1] - corners[0], corners[2] - corners[0])
    fn = cr / ad.col(ad.rownorm(cr))
    acc = None
    for k in range(3):
        p = corners[k]
        e1 = corners[(k + 1) % 3] - p
        e2 = corners[(k + 2) % 3] - p
        cosang = ad.rowdot(e1, e2) / (ad.rownorm(e1) * ad.rownorm(e2))
        contrib = ad.scatter_add(fn * ad.col(ad.arccos(cosang)), faces[:, k], n)
        acc = contrib if acc is None else acc + contrib
    return acc / ad.col(ad.rownorm(acc))


def _chamfer_star_var(Y: ad.Var, plan: LossPlan, lambda_n: float) -> tuple[ad.Var, dict]:
    XT = plan.target.vertices
    Yw = ad.gather(Y, plan.wall_s)
    parts = {"wall": _chamfer_var(Yw, XT[plan.wall_t])}
    if lambda_n > 0:
        NS = _vertex_normals_var(Y, plan.source.faces, plan.source.n_points)
        NTw = plan.target_normals[plan.wall_t]
        _, i_st = nearest(Yw.value, XT[plan.wall_t])
        _, i_ts = nearest(XT[plan.wall_t], Yw.value)
        NSw = ad.gather(NS, plan.wall_s)
        a = ad.absolute(ad.rowdot(NSw, NTw[i_st])).sum()
        b = ad.absolute(ad.rowdot(ad.gather(NSw, i_ts), NTw)).sum()
        term_a = (-a + float(plan.wall_s.size)) * (1.0 / plan.source.n_points)
        term_b = (-b + float(plan.wall_t.size)) * (1.0 / plan.target.n_points)
        parts["normals"] = (term_a + term_b) * lambda_n
    for pr in plan.pairs:
        parts[pr.name] = _chamfer_var(ad.gather(Y, pr.src), XT[pr.tgt])
    total = None
    for v in parts.values():
        total = v if total is None else total + v
    return total, parts


@dataclass
class LossEvaluation:
    value: float
    terms: dict[str, float]
    tape: ad.Tape
    loss: ad.Var
    params: list[ad.Var]
    mapped: np.ndarray
    mapped_centerline: np.ndarray

    def gradients(self) -> list[np.ndarray]:
        g = self.tape.backward(self.loss)
        return [g.get(p.id, np.zeros_like(p.value)) for p in self.params]


def registration_loss(net: FlowNet, source: LabeledSurfaceMesh, target: LabeledSurfaceMesh,
                      w: LossWeights = LossWeights(), cfg: FlowConfig = FlowConfig(),
                      plan: LossPlan | None = None) -> LossEvaluation:
    """Record the full registration objective on a fresh tape.

    Centerline points are flowed together with the vertices; the kinetic energy
    sums ``||f||^2`` over the vertex rows of every Euler step before the last.
    """
    if plan is None:
        plan = LossPlan.build(source, target)
    tape = ad.Tape()
    params = [tape.param(p) for p in net.params]
    n_p = source.n_points
    Y = tape.const(np.concatenate([source.vertices, source.centerline]))
    energy = None
    vert_rows = np.arange(n_p)
    for i in range(cfg.n_steps):
        f = net.field_var(Y, params)
        e = ad.sqnorm(ad.gather(f, vert_rows)) if source.centerline.shape[0] else ad.sqnorm(f)
        energy = e if energy is None else energy + e
        Y = Y + f * cfg.dt
        if not np.all(np.isfinite(Y.value)):
            raise NonFiniteFlow(i)
    Yv = ad.gather(Y, vert_rows)
    cham, parts = _chamfer_star_var(Yv, plan, w.lambda_n)
    terms = {k: float(v.value) for k, v in parts.items()}
    total = cham
    if source.centerline.shape[0]:
        Yc = ad.gather(Y, np.arange(n_p, n_p + source.centerline.shape[0]))
        cl = ad.sqnorm(Yc - target.centerline)
        terms["centerline"] = w.lambda_C * float(cl.value)
        total = total + cl * w.lambda_C
    Ye = ad.gather(Yv, plan.edges[:, 0]) - ad.gather(Yv, plan.edges[:, 1])
    edges = ad.sqnorm(Ye)
    terms["edges"] = w.lambda_edges * float(edges.value)
    terms["energy"] = w.lambda_en * float(energy.value) if energy is not None else 0.0
    total = total + edges * w.lambda_edges
    if energy is not None:
        total = total + energy * w.lambda_en
    Yall = Y.value
    return LossEvaluation(float(total.value), terms, tape, total, params,
                          Yall[:n_p].copy(), Yall[n_p:].copy())


# ---------------------------------------------------------------------------
# training


@dataclass
class BijectivityCertificate:
    bound: float
    empirical: float
    dt: float

    @property
    def certified(self) -> bool:
        return self.dt * self.bound < 1.0

    @property
    def empirically_bijective(self) -> bool:
        return self.dt * self.empirical < 1.0

    @property
    def verdict(self) -> str:
        if self.certified:
            return "certified bijective"
        if self.empirically_bijective:
            return "empirically bijective"
        return "not certified"


@dataclass
class RegistrationResult:
    net: FlowNet
    mapped: np.ndarray
    loss_trace: list[float]
    normalized_chamfer: float
    certificate: BijectivityCertificate
    level_trace: list[int] = field(default_factory=list)


class Adam:
    def __init__(self, params: Sequence[np.ndarray], cfg: AdamConfig = AdamConfig()):
        self.cfg = cfg
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: Sequence[np.ndarray],
             lr: float | None = None) -> list[np.ndarray]:
        c = self.cfg
        lr = c.lr if lr is None else lr
        self.t += 1
        b1t = 1.0 - c.beta1 ** self.t
        b2t = 1.0 - c.beta2 ** self.t
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g
            mhat = self.m[i] / b1t
            vhat = self.v[i] / b2t
            out.append(p - lr * mhat / (np.sqrt(vhat) + c.eps))
        return out


def train_multigrid(source_levels: Sequence[LabeledSurfaceMesh], target: LabeledSurfaceMesh,
                    w: LossWeights = LossWeights(), sched: MultigridSchedule = MultigridSchedule(),
                    adam: AdamConfig = AdamConfig(), seed: int = 0,
                    hidden: Sequence[int] = (500,) * 6, rff: RffConfig = RffConfig(),
                    flow: FlowConfig = FlowConfig(), output_gain: float = 1.0,
                    net: FlowNet | None = None,
                    callback: Callable[[int, float, dict], None] | None = None) -> RegistrationResult:
    """Adam on the network weights with the source mesh refined at the switch epochs.

    The weights and the optimizer moments carry over across refinements; only
    the point cloud changes. With zero epochs the identity map is returned.
    """
    if not source_levels:
        raise ValueError("at least one source level is required")
    if len(source_levels) < sched.n_levels and sched.total_epochs > max(sched.switch_epochs, default=0):
        raise ValueError(f"schedule needs {sched.n_levels} source levels, got {len(source_levels)}")
    finest = source_levels[min(sched.n_levels, len(source_levels)) - 1]
    if sched.total_epochs == 0:
        ident = FlowNet.zeros(hidden, rff)
        cert = lipschitz_bound(ident, flow=flow, seed=seed)
        return RegistrationResult(ident, finest.vertices.copy(), [],
                                  chamfer(finest.vertices, target.vertices) / mesh_diameter(target.vertices),
                                  cert)
    if net is None:
        net = FlowNet.init(hidden, rff, seed=seed, output_gain=output_gain)
    params = [p.copy() for p in net.params]
    opt = Adam(params, adam)
    plans: dict[int, LossPlan] = {}
    trace: list[float] = []
    levels: list[int] = []
    for epoch in range(sched.total_epochs):
        lev = sched.level_at(epoch)
        if lev not in plans:
            plans[lev] = LossPlan.build(source_levels[lev], target)
            if lev > 0:
                log.info("epoch %d: switching to source level %d (%d points)", epoch, lev,
                         source_levels[lev].n_points)
        current = net.with_params(params)
        try:
            ev = registration_loss(current, source_levels[lev], target, w, flow, plan=plans[lev])
        except NonFiniteFlow as exc:
            raise RegistrationDivergence(f"epoch {epoch}: {exc}", trace) from exc
        if not np.isfinite(ev.value):
            raise RegistrationDivergence(f"epoch {epoch}: loss is {ev.value}", trace)
        trace.append(ev.value)
        levels.append(lev)
        if callback is not None:
            callback(epoch, ev.value, ev.terms)
        params = opt.step(params, ev.gradients(), adam.rate(epoch, sched.total_epochs))
    net = net.with_params(params)
    mapped = apply_flow(net, finest.vertices, flow)
    cert = lipschitz_bound(net, flow=flow, seed=seed, points=mapped)
    nc = chamfer(mapped, target.vertices) / mesh_diameter(target.vertices)
    return RegistrationResult(net, mapped, trace, nc, cert, levels)


def ema(values: Sequence[float], window: int = 50) -> np.ndarray:
    """Exponential moving average with span ``window``."""
    alpha = 2.0 / (window + 1.0)
    out = np.empty(len(values))
    acc = None
    for i, v in enumerate(values):
        acc = v if acc is None else alpha * v + (1 - alpha) * acc
        out[i] = acc
    return out


def segment_ema_rise(trace: Sequence[float], levels: Sequence[int], window: int = 50) -> list[float]:
    """Per multigrid segment, the summed upward moves of the loss EMA relative to its start."""
    trace, levels = np.asarray(trace), np.asarray(levels)
    out = []
    for lev in np.unique(levels):
        seg = trace[levels == lev]
        e = ema(seg, window)
        rise = np.clip(np.diff(e), 0, None).sum()
        out.append(float(rise / e[0]))
    return out


# ---------------------------------------------------------------------------
# bijectivity and inversion


def lipschitz_bound(net: FlowNet, cfg: RffConfig | None = None, flow: FlowConfig = FlowConfig(),
                    n_pairs: int = 10_000, seed: int = 0, points=None) -> BijectivityCertificate:
    """Certified bound (product of layer spectral norms times the embedding
    Jacobian bound) and a sampled difference-quotient estimate of Lip(f)."""
    cfg = cfg or net.rff
    prod = 1.0
    for W in net.weights:
        prod *= float(np.linalg.norm(W, 2)) if W.size else 0.0
    bound = prod * cfg.jacobian_bound
    rng = np.random.default_rng(seed)
    if points is None:
        lo, hi = -np.ones(3), np.ones(3)
    else:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        lo, hi = p.min(0), p.max(0)
        pad = 0.05 * np.max(hi - lo) + 1e-12
        lo, hi = lo - pad, hi + pad
    x = rng.uniform(lo, hi, size=(n_pairs, 3))
    # half far pairs, half close pairs at log-uniform separations
    scale = np.max(hi - lo)
    y_far = rng.uniform(lo, hi, size=(n_pairs // 2, 3))
    dirs = rng.standard_normal((n_pairs - n_pairs // 2, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    r = scale * 10.0 ** rng.uniform(-6, -1, size=(dirs.shape[0], 1))
    y = np.concatenate([y_far, x[n_pairs // 2:] + r * dirs])
    num = np.linalg.norm(net.field(x) - net.field(y), axis=1)
    den = np.linalg.norm(x - y, axis=1)
    ok = den > 0
    emp = float(np.max(num[ok] / den[ok])) if ok.any() else 0.0
    return BijectivityCertificate(bound, emp, flow.dt)


def invert_flow(net: FlowNet, Y, cfg: FlowConfig = FlowConfig(), tol: float = 1e-8,
                max_iter: int = 500) -> np.ndarray:
    """Invert the Euler flow step by step with the fixed-point map ``x <- y - dt f(x)``."""
    X = np.asarray(Y, dtype=np.float64).reshape(-1, 3).copy()
    for step in range(cfg.n_steps - 1, -1, -1):
        y = X
        x = y.copy()
        prev = None
        rate = 0.0
        for _ in range(max_iter):
            nxt = y - cfg.dt * net.field(x)
            delta = float(np.max(np.linalg.norm(nxt - x, axis=1)))
            if prev is not None and prev > 0:
                rate = delta / prev
            x = nxt
            if delta < tol:
                break
            if not np.isfinite(delta):
                raise InversionError(f"fixed-point iteration diverged at step {step}", rate)
            prev = delta
        else:
            raise InversionError(
                f"no convergence within {max_iter} iterations at Euler step {step} "
                f"(last update {delta:.3e}, contraction estimate {rate:.3f})",
                rate,
            )
        X = x
    return X


# ---------------------------------------------------------------------------
# model files

_MODEL_MAGIC = b"FLOWNET1"


def save_model(net: FlowNet, path: str | Path, flow: FlowConfig = FlowConfig()) -> None:
    """JSON header (widths, n_rff, n_steps) followed by a little-endian f64 weight blob
    (per layer: W row-major of shape (in, out), then b)."""
    header = json.dumps({"widths": net.widths, "n_rff": net.rff.n_rff, "n_steps": flow.n_steps,
                         "activation": "relu"}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MODEL_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for W, b in zip(net.weights, net.biases):
            fh.write(np.ascontiguousarray(W).astype("<f8").tobytes())
            fh.write(np.ascontiguousarray(b).astype("<f8").tobytes())


def load_model(path: str | Path) -> tuple[FlowNet, FlowConfig]:
    data = Path(path).read_bytes()
    if data[:8] != _MODEL_MAGIC:
        raise ValueError(f"{path}: not a flow model file")
    (hlen,) = struct.unpack_from("<Q", data, 8)
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    off = 16 + hlen
    widths = header["widths"]
    Ws, bs = [], []
    for a, b in zip(widths[:-1], widths[1:]):
        W = np.frombuffer(data, "<f8", a * b, off).reshape(a, b).astype(np.float64)
        off += 8 * a * b
        bb = np.frombuffer(data, "<f8", b, off).astype(np.float64)
        off += 8 * b
        Ws.append(W)
        bs.append(bb)
    return FlowNet(Ws, bs, RffConfig(header["n_rff"])), FlowConfig(header["n_steps"])
