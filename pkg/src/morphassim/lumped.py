"""Three-element (RCR) Windkessel outlet models."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

C_TOT_DEFAULT = 1e-8  # m^3/Pa


@dataclass(frozen=True)
class WindkesselParams:
    R_p: float  # Pa s / m^3
    R_d: float  # Pa s / m^3
    C: float  # m^3 / Pa
    pi: float = 0.0  # distal pressure state, Pa

    def __post_init__(self):
        if not (self.R_p > 0 and self.R_d > 0 and self.C > 0):
            raise ValueError("Windkessel resistances and capacitance must be > 0")

    def with_state(self, pi: float) -> "WindkesselParams":
        return WindkesselParams(self.R_p, self.R_d, self.C, pi)


@dataclass(frozen=True)
class CalibrationInput:
    """Template (reference) quantities and the patient inflow and outlet areas."""

    Q_in_ref: float
    R_S_ref: float
    u_mean_ref: tuple[float, ...]  # per-outlet template mean velocity
    Q_in: float
    areas: tuple[float, ...]  # per-outlet patient areas
    C_tot: float = C_TOT_DEFAULT

    def __post_init__(self):
        u = tuple(float(x) for x in self.u_mean_ref)
        a = tuple(float(x) for x in self.areas)
        object.__setattr__(self, "u_mean_ref", u)
        object.__setattr__(self, "areas", a)
        if len(u) != len(a):
            raise ValueError("one template velocity per outlet area is required")
        if min(self.Q_in_ref, self.R_S_ref, self.Q_in, self.C_tot) <= 0:
            raise ValueError("flows, resistance and capacitance must be positive")
        if min(a) <= 0 or min(u) <= 0:
            raise ValueError("outlet areas and template velocities must be positive")


CONVENTIONS = ("as-written", "parallel-consistent")


def flow_split(u_mean, areas) -> np.ndarray:
    q = np.asarray(u_mean, dtype=np.float64) * np.asarray(areas, dtype=np.float64)
    tot = q.sum()
    if not tot > 0:
        raise ValueError("flow split denominator is zero")
    return q / tot


def calibrate_windkessel(inp: CalibrationInput, convention: str = "as-written") -> list[WindkesselParams]:
    """Rescale the systemic resistance by the inflow ratio, distribute it over the
    outlets by flow split, split 10/90 proximal/distal, capacitance by area.

    ``as-written`` uses ``R_i = sigma_i R_S``; ``parallel-consistent`` uses
    ``R_i = R_S / sigma_i`` so the outlets combine in parallel to ``R_S``.
    """
    if convention not in CONVENTIONS:
        raise ValueError(f"convention must be one of {CONVENTIONS}")
    R_S = inp.Q_in_ref / inp.Q_in * inp.R_S_ref
    sigma = flow_split(inp.u_mean_ref, inp.areas)
    R = sigma * R_S if convention == "as-written" else R_S / sigma
    A = np.asarray(inp.areas)
    C = A / A.sum() * inp.C_tot
    return [WindkesselParams(0.1 * r, 0.9 * r, c) for r, c in zip(R, C)]


def windkessel_step(params: WindkesselParams, Q: float, dt: float,
                    scheme: str = "implicit") -> tuple[WindkesselParams, float]:
    """Advance the distal pressure by one step; returns the new state and ``P = R_p Q + pi``."""
    if dt <= 0:
        raise ValueError("dt must be > 0")
    C, Rd, pi = params.C, params.R_d, params.pi
    if scheme == "implicit":
        nxt = (C / dt * pi + Q) / (C / dt + 1.0 / Rd)
    elif scheme == "semi-implicit":
        nxt = pi + dt / C * (Q - pi / Rd)
    else:
        raise ValueError("scheme must be 'implicit' or 'semi-implicit'")
    return params.with_state(nxt), params.R_p * Q + nxt


def simulate(params: WindkesselParams, Q: np.ndarray, dt: float, scheme: str = "implicit") -> np.ndarray:
    """Outlet pressure for a flow series, one step per sample."""
    out = np.empty(len(Q))
    p = params
    for i, q in enumerate(np.asarray(Q, dtype=np.float64)):
        p, out[i] = windkessel_step(p, float(q), dt, scheme)
    return out
