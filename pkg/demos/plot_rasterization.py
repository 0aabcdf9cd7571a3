r"""
Rasterizing routing instances
=============================

Every instance is drawn onto a 224 x 224 RGB canvas before the CNN sees it.
A TSP node lights its pixel white; for CVRP the depot is yellow ``[1, 1, 0]``
and a customer is ``[1, 0, d/Q]``, so demand lives in the blue channel.

Two nodes can land in the same pixel. The chance that at most one pixel is
shared stays above 99% for 100 nodes, which we check against a balls-in-bins
simulation.
"""

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from visroute.problems import generate_cvrp, generate_tsp
from visroute.raster import (
    NUM_PIXELS,
    at_most_one_collision_prob,
    pixel_index,
    rasterize,
    simulate_at_most_one_collision,
)

tsp = generate_tsp(100, seed=0)
cvrp = generate_cvrp(50, seed=0)

fig, axes = plt.subplots(1, 2, figsize=(9, 4.5))
for ax, inst in zip(axes, (tsp, cvrp)):
    img = rasterize(inst).pixels
    # dilate the single pixels a little so they show up at figure size
    show = np.maximum.reduce([np.roll(np.roll(img, dy, 0), dx, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)])
    ax.imshow(show, origin="upper")
    ax.set_title(f"{inst.kind.upper()}-{inst.n}")
    ax.set_xticks([])
    ax.set_yticks([])
fig.tight_layout()
fig.savefig("rasters.png", dpi=120)

# %%
# The depot pixel of the CVRP image
rows, cols = pixel_index(cvrp.coords)
print("depot pixel", rows[0], cols[0], rasterize(cvrp).pixels[rows[0], cols[0]])

# %%
# Collision estimate against simulation
for n in (20, 50, 100, 200, 500):
    p = at_most_one_collision_prob(n, NUM_PIXELS)
    mc = simulate_at_most_one_collision(n, NUM_PIXELS, trials=100_000, seed=n)
    print(f"n={n:4d}  formula {p:.5f}  simulated {mc:.5f}")
