"""Pricing, implied volatility and a Heston surface on the reconstruction grid.

Run with ``python3 notebooks/01_pricing_and_surfaces.py``.
"""

# %% Black-76 round trip
import numpy as np

from volsurf.noarb import butterfly_check, calendar_check
from volsurf.pricing import HestonParams, MarketContext, OptionSpec, black76_price, heston_price, implied_vol, vega
from volsurf.surface import make_grid, total_variance
from volsurf.synthgen import generate_surface

ctx = MarketContext(forward=100.0)
opt = OptionSpec(strike=110.0, tenor=0.5, is_call=True)
price = black76_price(ctx, opt, 0.25)
print(f"call price {price:.6f}, vega {vega(ctx, opt, 0.25):.4f}")
print(f"recovered sigma {implied_vol(price, ctx, opt):.12f}")

# %% Heston prices and their implied volatilities
p = HestonParams(v0=0.04, kappa=2.0, theta=0.04, xi=0.3, rho=-0.7)
for K in (80.0, 100.0, 120.0):
    o = OptionSpec(K, 1.0, K >= 100.0)
    px = heston_price(p, ctx, o)
    print(f"K={K:5.1f} price {px:8.4f} iv {implied_vol(px, ctx, o):.4f}")

# %% The full 8 x 25 surface and its arbitrage diagnostics
g = make_grid()
s = generate_surface(p, g)
np.set_printoptions(precision=3, suppress=True, linewidth=140)
print("tenors", g.tenors)
print(s.iv[:, ::4])
w = total_variance(s, g)
print("butterfly", butterfly_check(w, g.log_moneyness))
print("calendar", calendar_check(w))

# %% Negative correlation gives the familiar downward skew
left, right = s.iv[:, 0], s.iv[:, -1]
print("put wing minus call wing by tenor:", np.round(left - right, 4))
