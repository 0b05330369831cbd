#!/usr/bin/env python3
"""Derive the self-cell Coulomb constant used by the mesh solver.

The discrete free-space solve needs the potential a uniformly charged cell
induces at its own center:

    C = mean of 1/|r| over the cube [-1/2, 1/2]^3
      = integral of 1/|r| over that cube (unit volume).

By symmetry the integral is 8x the corner octant [0, 1/2]^3. The integrand is
singular (integrable) at the origin; substituting x = u^2/2 per axis gives a
Jacobian u*v*w that cancels the 1/|r| growth, so tensor Gauss-Legendre
converges fast. The closed form is 3*ln(2 + sqrt(3)) - pi/2.

Run: python3 scripts/self_cell_constant.py
"""

import math

import numpy as np


def octant_integral(n: int) -> float:
    """Gauss-Legendre approximation of 8 * int_{[0,1/2]^3} dV / |r|."""
    nodes, weights = np.polynomial.legendre.leggauss(n)
    # Map [-1, 1] -> [0, 1].
    u = 0.5 * (nodes + 1.0)
    wu = 0.5 * weights
    # x = u^2 / 2 maps [0, 1] -> [0, 1/2] with dx = u du.
    uu, vv, ww = np.meshgrid(u, u, u, indexing="ij")
    jac = uu * vv * ww
    r = 0.5 * np.sqrt(uu**4 + vv**4 + ww**4)
    integrand = np.where(r > 0.0, jac / np.where(r > 0.0, r, 1.0), 0.0)
    w3 = (
        wu[:, None, None]
        * wu[None, :, None]
        * wu[None, None, :]
    )
    return 8.0 * float(np.sum(w3 * integrand))


def main() -> None:
    closed = 3.0 * math.log(2.0 + math.sqrt(3.0)) - math.pi / 2.0
    print(f"closed form 3*ln(2+sqrt(3)) - pi/2 = {closed:.15f}")
    print(f"{'n':>4}  {'quadrature':>18}  {'difference':>12}")
    for n in (10, 20, 40, 80, 120):
        approx = octant_integral(n)
        print(f"{n:>4}  {approx:>18.15f}  {approx - closed:>12.3e}")
    frozen = 2.380077363979553
    print(f"frozen constant in poisson.rs     = {frozen:.15f}")
    assert abs(frozen - closed) < 1e-15, "frozen constant drifted"
    print("frozen constant matches the closed form")


if __name__ == "__main__":
    main()
