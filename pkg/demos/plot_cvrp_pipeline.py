r"""
CVRP end to end
===============

Generate CVRP-8 instances, train a tiny policy for a few steps, decode, and
compare against the exhaustive optimum. The decoder returns to the depot
when nothing else fits, and capacity is tracked in integer demand units so
no route is ever overloaded.
"""

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from visroute.agpo import AGPOConfig, Trainer
from visroute.decoder import ModelConfig, solve_many
from visroute.oracles import brute_force_cvrp
from visroute.problems import generate_cvrp, validate_routes

torch.manual_seed(0)
trainer = Trainer("cvrp", 8, AGPOConfig(batch_size=32), model=ModelConfig.tiny("cvrp"), seed=0,
                  train_instances=[generate_cvrp(8, seed=i) for i in range(256)])
policy = trainer.run(steps=30).policy

test = [generate_cvrp(8, seed=80_000 + i) for i in range(20)]
sols = solve_many(policy, test)
opt = np.array([brute_force_cvrp(inst)[1] for inst in test])
assert all(validate_routes(inst, s.solution).ok for inst, s in zip(test, sols))
print("mean gap", np.mean([s.cost for s in sols] / opt - 1))

inst, sol = test[0], sols[0]
fig, ax = plt.subplots(figsize=(5, 5))
for route in sol.solution:
    xy = inst.coords[route]
    ax.plot(xy[:, 0], xy[:, 1], "-o", ms=4)
ax.plot(*inst.coords[0], "ks", ms=9, label="depot")
for j in inst.customers:
    ax.annotate(str(int(inst.demands[j])), inst.coords[j], textcoords="offset points", xytext=(4, 4))
ax.set_title(f"cost {sol.cost:.3f} (optimum {opt[0]:.3f})")
ax.legend()
fig.savefig("cvrp_routes.png", dpi=120)
