r"""
Inference with the eight square symmetries
==========================================

Rotations and reflections of the unit square keep every pairwise distance,
so a solution for a transformed instance is a solution for the original at
the same cost. Decoding all eight variants and keeping the cheapest can only
help. This demo trains briefly, then compares plain and augmented greedy
decoding on TSP-12 against Held-Karp.
"""

import numpy as np
import torch

from visroute.agpo import AGPOConfig, Trainer
from visroute.decoder import ModelConfig, solve_many
from visroute.oracles import held_karp_tsp
from visroute.problems import augment_x8, generate_tsp

torch.manual_seed(0)
trainer = Trainer("tsp", 12, AGPOConfig(batch_size=32), model=ModelConfig.small("tsp"), seed=0,
                  train_instances=[generate_tsp(12, i) for i in range(512)])
policy = trainer.run(steps=60).policy

test = [generate_tsp(12, 50_000 + i) for i in range(100)]
opt = np.array([held_karp_tsp(inst)[1] for inst in test])
plain = np.array([s.cost for s in solve_many(policy, test, augment=False)])
aug = solve_many(policy, test, augment=True)
aug_cost = np.array([s.cost for s in aug])
print(f"plain gap      {np.mean(plain / opt - 1):.4f}")
print(f"augmented gap  {np.mean(aug_cost / opt - 1):.4f}")
print("winning variant counts", np.bincount([s.variant for s in aug], minlength=8))

# %%
# The 8 variants of one instance share every pairwise distance
inst = test[0]
d0 = inst.distances()
print("max distance change", max(np.abs(v.distances() - d0).max() for v in augment_x8(inst)))
