"""Neural construction solvers for TSP and CVRP that fuse a CNN view of the
instance with a transformer encoder, trained by asymmetric group preference
optimisation (AGPO)."""

from .agpo import AGPOConfig, Trainer, agpo_loss, group_delta, select_groups, train, train_baseline_reinforce
from .decoder import ModelConfig, Policy, rollout_multistart, score_trajectory, solve, solve_many
from .oracles import brute_force_cvrp, held_karp_tsp, nearest_neighbor, two_opt
from .problems import (
    CVRPInstance,
    TSPInstance,
    ValidationError,
    augment_x8,
    generate_cvrp,
    generate_tsp,
    routes_cost,
    tour_cost,
    validate_routes,
    validate_tour,
)
from .raster import at_most_one_collision_prob, pixel_collision_prob, rasterize

__version__ = "0.1.0"
