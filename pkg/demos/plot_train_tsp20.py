r"""
Preference training on TSP-20 at desk scale
===========================================

The small preset (D=64, three encoder layers) is trained with AGPO on a fixed
pool of 2,000 TSP-20 instances, and the greedy multi-start gap is tracked on
64 held-out TSP-16 instances whose optimum comes from Held-Karp. A shared-
baseline REINFORCE run with the same architecture and budget is shown for
comparison. Expect a few minutes per hundred steps on one CPU core.
"""

import sys

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import torch

from visroute.agpo import AGPOConfig, InstancePool, Trainer, Validation
from visroute.decoder import ModelConfig, Policy
from visroute.problems import generate_tsp

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 150
model = ModelConfig.small("tsp")
base = Policy(model)
pool = InstancePool(base, [generate_tsp(20, 10_000 + i) for i in range(2000)])
val = Validation.build(base, [generate_tsp(16, 90_000 + i) for i in range(64)])
print("untrained gap", val.mean_gap(base))

curves = {}
for method, every, outer in (("agpo", 5, steps), ("reinforce", 15, 3 * steps)):
    torch.manual_seed(0)
    trainer = Trainer("tsp", 20, AGPOConfig(eval_every=every), model=model, seed=0, method=method,
                      pool=pool, validation=val)
    res = trainer.run(steps=outer)
    curves[method] = [(r["grad_steps"], r["val_gap"]) for r in res.metrics if r["val_gap"] is not None]
    print(method, "final gap", curves[method][-1][1])

for method, pts in curves.items():
    plt.plot(*zip(*pts), label=method)
plt.yscale("log")
plt.xlabel("gradient steps")
plt.ylabel("validation gap")
plt.legend()
plt.savefig("tsp20_training.png", dpi=120)
