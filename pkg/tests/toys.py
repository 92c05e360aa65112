"""Small hand-sized problems shared by several test modules."""

from __future__ import annotations

import numpy as np

from morphassim import registration as reg
from morphassim.mesh import LabeledSurfaceMesh, RegionId


def bipyramid(n_ring: int = 8, scale=(1.0, 1.0, 1.0), n_cntrl: int = 3, twist: float = 0.0) -> LabeledSurfaceMesh:
    """Ring of ``n_ring`` points between two apexes: ``n_ring + 2`` vertices.
    Faces at the bottom apex are INLET, at the top apex OUTLET_1."""
    a = 2 * np.pi * np.arange(n_ring) / n_ring + twist
    V = np.vstack([np.column_stack([np.cos(a), np.sin(a), 0.1 * np.sin(3 * a)]), [[0, 0, -1.0], [0, 0, 1.0]]])
    V = 0.5 * V * np.asarray(scale, float)
    bot, top = n_ring, n_ring + 1
    F, lab = [], []
    for i in range(n_ring):
        j = (i + 1) % n_ring
        F.append([i, bot, j] if i % 2 else [j, i, bot])
        lab.append(RegionId.INLET if i % 2 else RegionId.WALL)
        F.append([i, j, top])
        lab.append(RegionId.OUTLET_1 if i % 2 else RegionId.WALL)
    c = np.column_stack([np.zeros(n_cntrl), np.zeros(n_cntrl), np.linspace(-0.3, 0.3, n_cntrl)]) * scale
    return LabeledSurfaceMesh(V, F, lab, c)


def toy_pair():
    """10-point source and a scaled, twisted 10-point target."""
    return bipyramid(), bipyramid(scale=(1.2, 0.9, 1.1), twist=0.2)


def small_net(seed: int = 0, hidden=(6, 6), n_rff: int = 2, gain: float = 0.5) -> reg.FlowNet:
    return reg.FlowNet.init(hidden, reg.RffConfig(n_rff), seed=seed, output_gain=gain)
