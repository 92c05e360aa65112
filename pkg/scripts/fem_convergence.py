"""Manufactured-solution error tables for the PPE and STE pressure estimators on
the unit box under uniform midpoint refinement."""

import argparse

import numpy as np

from morphassim import fem
from morphassim.fem import RHO_BLOOD

TAU = 0.025


def ppe_case(mesh, ops):
    X = mesh.vertices
    x, y, z = X.T
    a, b, c = x * (1 - x), y * (1 - y), z * (1 - z)
    p = 64 * a * b * c
    grad = 64 * np.stack([(1 - 2 * x) * b * c, a * (1 - 2 * y) * c, a * b * (1 - 2 * z)], 1)
    uh = np.stack([x, -y, 0 * x], 1)
    up = -(TAU / RHO_BLOOD) * (grad + RHO_BLOOD * np.stack([x, y, 0 * x], 1))
    ph = fem.ppe_solve(mesh, np.zeros_like(X), uh, up, TAU, ops=ops).values
    return ph - p


def ste_case(mesh, ops, c_s):
    X = mesh.vertices
    x, y, z = X.T
    p = x ** 2 - y * z + 0.5 * z
    grad = np.stack([2 * x, -z, -y + 0.5], 1)
    zero = np.zeros_like(X)
    _, ph = fem.ste_solve(mesh, zero, zero, -(TAU / RHO_BLOOD) * grad, TAU, c_s=c_s, ops=ops)
    e = ph.values - p
    return e - ops.lumped_mass @ e / ops.lumped_mass.sum()


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--levels", type=int, default=3)
    ap.add_argument("--c-s", type=float, default=0.01, help="STE stabilization constant")
    args = ap.parse_args()
    mesh = fem.box_mesh(2)
    prev = None
    print(f"{'tets':>7} {'h':>8} {'PPE L2':>10} {'rate':>5} {'STE L2':>10} {'rate':>5}")
    for _ in range(args.levels):
        ops = fem.assemble_p1(mesh)
        errs = [float(np.sqrt(e @ (ops.mass @ e))) for e in (ppe_case(mesh, ops), ste_case(mesh, ops, args.c_s))]
        rates = ["" if prev is None else f"{np.log2(p / e):5.2f}" for p, e in zip(prev or errs, errs)]
        print(f"{mesh.n_tets:7d} {mesh.h.max():8.4f} {errs[0]:10.3e} {rates[0]:>5} {errs[1]:10.3e} {rates[1]:>5}")
        prev = errs
        mesh = mesh.refine()


if __name__ == "__main__":
    main()
