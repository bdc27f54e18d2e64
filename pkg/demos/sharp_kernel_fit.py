"""Polynomial fits of a sharp kernel and the hybrid correction near zero.

Raising the Chebyshev order lowers the sup error slowly. A spectral part on
the frequencies below the cut removes the residual there at any order.
"""

import numpy as np

from lrgwn.filters import chebyshev_response, fit_chebyshev_ls, fit_hybrid_filter, mexican_hat, response_parts

kernel = mexican_hat(8.0)
print("rho   sup error on [0, 2]")
for rho in (2, 5, 10, 20, 30, 50):
    _, err = fit_chebyshev_ls(kernel, rho)
    print(f"{rho:>3}   {err:.3e}")

cut = 0.05
grid = np.linspace(0.0, cut, 50, endpoint=False)
print(f"\nmax error below lambda = {cut}")
for rho in (8, 20, 50):
    c, _ = fit_chebyshev_ls(kernel, rho)
    print(f"polynomial rho={rho:<3} {np.abs(chebyshev_response(c, grid) - kernel(grid)).max():.3e}")
hybrid = fit_hybrid_filter(kernel, 8, grid, z=grid.size, lambda_cut=cut)
print(f"hybrid rho=8        {np.abs(response_parts(hybrid, grid)[0][:, 0] - kernel(grid)).max():.3e}")
