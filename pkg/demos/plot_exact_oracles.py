r"""
Exact references and classical heuristics
==========================================

Small instances are solved exactly: Held-Karp for TSP up to 16 nodes and an
exhaustive search for CVRP up to 8 customers. Nearest neighbour followed by
2-opt gives a cheap upper bound whose gap we measure here.
"""

import time

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from visroute.oracles import brute_force_cvrp, gap, held_karp_tsp, nearest_neighbor, two_opt
from visroute.problems import generate_cvrp, generate_tsp, tour_cost

sizes = [8, 10, 12, 14, 16]
nn_gap, opt_gap, hk_time = [], [], []
for n in sizes:
    g1, g2, t = [], [], []
    for seed in range(20):
        inst = generate_tsp(n, seed)
        t0 = time.perf_counter()
        _, best = held_karp_tsp(inst)
        t.append(time.perf_counter() - t0)
        nn = nearest_neighbor(inst)
        g1.append(gap(tour_cost(inst, nn), best).gap)
        g2.append(gap(tour_cost(inst, two_opt(inst, nn)), best).gap)
    nn_gap.append(np.mean(g1))
    opt_gap.append(np.mean(g2))
    hk_time.append(np.mean(t))
    print(f"n={n:2d}  NN gap {nn_gap[-1]:.3f}  NN+2opt gap {opt_gap[-1]:.4f}  Held-Karp {hk_time[-1]*1e3:.1f} ms")

plt.plot(sizes, nn_gap, "o-", label="nearest neighbour")
plt.plot(sizes, opt_gap, "s-", label="+ 2-opt")
plt.xlabel("nodes")
plt.ylabel("mean optimality gap")
plt.legend()
plt.savefig("heuristic_gaps.png", dpi=120)

# %%
# CVRP with 8 customers and a tight vehicle
inst = generate_cvrp(8, capacity=15, seed=1)
routes, cost = brute_force_cvrp(inst)
print("demands", inst.demands[1:].tolist(), "capacity", inst.capacity)
for r in routes:
    print("  route", r, "load", int(inst.demands[r].sum()))
print("optimal length", cost)
