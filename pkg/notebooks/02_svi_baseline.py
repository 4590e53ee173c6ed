"""Masking a surface and filling it back in with per-slice SVI fits.

Run with ``python3 notebooks/02_svi_baseline.py``.
"""

# %% A synthetic surface with 30% of its points hidden
import numpy as np

from volsurf.eval import evaluate, regional
from volsurf.pricing import HestonParams
from volsurf.surface import make_grid, random_mask
from volsurf.svi import fit_surface
from volsurf.synthgen import generate_surface

g = make_grid()
truth = generate_surface(HestonParams(0.05, 1.5, 0.06, 0.4, -0.6), g)
mask = random_mask(0.3, np.random.default_rng(7))
print(f"{int((mask == 0).sum())} of {mask.size} points hidden")

# %% Fit each observed slice and read the missing points off the curves
params, iv_hat = fit_surface(truth, mask, g)
for tau, sp in zip(g.tenors, params):
    print(f"tau={tau:4.2f}  a={sp.a:.5f} b={sp.b:.4f} rho={sp.rho:+.3f} m={sp.m:+.4f} sigma={sp.sigma:.4f}")

# %% Errors and arbitrage of the reconstruction
m = evaluate(iv_hat, truth, mask, g)
print(m.to_dict())

# %% Where the errors sit
reg = regional(iv_hat, truth.iv, mask, g)
for row in reg.to_rows():
    if row["count"]:
        print(f"{row['moneyness']:>14} {row['tenor']:>6}  rmse {row['rmse_miss']:.2e}  n={row['count']}")
print("recombined", reg.recombined(), "global", m.rmse_miss)
