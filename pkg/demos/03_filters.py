"""How accurate are the finite-difference filters?

The central filters differentiate ``sin`` sampled on uniform grids of
increasing density.  The three-point secant filter is second order (the
error drops by about 4 when the grid doubles); the local-polynomial filters
gain two more orders.  The same filters also act on scattered points, which
is how they are used on projected operating points.

Run:  python3 demos/03_filters.py
"""

import numpy as np

from narxdecouple.fcpd import STENCILS, build_fd_filters


def central_error(z, stencil):
    F = build_fd_filters(np.ones((1, 1)), z[:, None], stencil)
    d = F.apply("central", np.sin(z)[:, None])[:, 0]
    inner = (z > 0.5) & (z < 1.5)
    return np.max(np.abs(d - np.cos(z))[inner])


print("uniform grid on [0, 2]")
print("     N  " + "  ".join(f"{s:>10s}" for s in STENCILS))
for N in (21, 41, 81, 161, 321):
    z = np.linspace(0, 2, N)
    print(f"{N:6d}  " + "  ".join(f"{central_error(z, s):10.2e}" for s in STENCILS))

rng = np.random.default_rng(0)
print("\nscattered points on [0, 2]")
for N in (50, 200, 800):
    z = np.sort(rng.uniform(0, 2, N))
    print(f"{N:6d}  " + "  ".join(f"{central_error(z, s):10.2e}" for s in STENCILS))
