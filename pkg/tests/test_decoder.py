import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from visroute.decoder import (
    ModelConfig,
    Policy,
    _sample,
    default_starts,
    feasibility_mask,
    initial_state,
    rollout_multistart,
    score_trajectory,
    solve,
    solve_many,
    stack_instances,
    trajectory_cost,
)
from visroute.problems import (
    CVRPInstance,
    ValidationError,
    augment_x8,
    generate_cvrp,
    generate_tsp,
    routes_cost,
    tour_cost,
    validate_routes,
    validate_tour,
)


@pytest.fixture(scope="module")
def tsp_policy():
    torch.manual_seed(0)
    return Policy(ModelConfig.tiny("tsp")).eval()


@pytest.fixture(scope="module")
def cvrp_policy():
    torch.manual_seed(0)
    return Policy(ModelConfig.tiny("cvrp")).eval()


class TestMasks:
    def test_tsp_visited(self):
        batch = stack_instances([generate_tsp(5, 0)])
        state = initial_state(batch, torch.tensor([[2]]))
        np.testing.assert_array_equal(feasibility_mask(batch, state)[0, 0].numpy(), [1, 1, 0, 1, 1])

    def test_cvrp_capacity_and_depot(self):
        inst = CVRPInstance([[0.5, 0.5], [0.1, 0.1], [0.2, 0.2], [0.3, 0.3]], [0, 6, 5, 3], capacity=10)
        batch = stack_instances([inst])
        state = initial_state(batch, torch.tensor([[1]]))  # 4 units left
        # node 2 needs 5 > 4; the depot is allowed away from it
        np.testing.assert_array_equal(feasibility_mask(batch, state)[0, 0].numpy(), [1, 0, 0, 1])

    def test_depot_masked_at_depot(self, cvrp_policy):
        inst = CVRPInstance([[0.5, 0.5], [0.1, 0.1], [0.2, 0.2]], [0, 6, 5], capacity=10)
        batch = cvrp_policy.prepare([inst])
        traj = rollout_multistart(cvrp_policy, batch, starts=torch.tensor([[1]]))
        # after 1 the load does not fit 2, so the walk is 1 -> 0 -> 2 -> 0
        assert traj.actions[0, 0].tolist()[:3] == [1, 0, 2]

    def test_probability_zero_on_masked(self, cvrp_policy):
        from visroute.decoder import _decode
        batch = cvrp_policy.prepare([generate_cvrp(10, seed=s) for s in range(3)])
        rec = []
        _decode(cvrp_policy, batch, default_starts(batch), mode="sample", seed=1, record_probs=rec)
        for probs, feasible in rec:
            assert probs[~feasible].abs().max() == 0
            np.testing.assert_allclose(probs.sum(-1).numpy(), 1.0, atol=1e-6)


class TestRollout:
    @pytest.mark.parametrize("mode", ["greedy", "sample"])
    def test_tsp_feasible(self, tsp_policy, mode):
        insts = [generate_tsp(12, s) for s in range(8)]
        traj = rollout_multistart(tsp_policy, tsp_policy.prepare(insts), mode, seed=3)
        assert traj.actions.shape == (8, 12, 12)
        for b, inst in enumerate(insts):
            for p in range(12):
                tour = traj.solution(b, p)
                assert tour[0] == p
                assert validate_tour(inst, tour).ok
                assert float(traj.cost[b, p]) == pytest.approx(tour_cost(inst, tour), abs=1e-12)

    @pytest.mark.parametrize("mode", ["greedy", "sample"])
    def test_cvrp_feasible(self, cvrp_policy, mode):
        insts = [generate_cvrp(10, seed=s) for s in range(8)]
        traj = rollout_multistart(cvrp_policy, cvrp_policy.prepare(insts), mode, seed=3)
        assert traj.actions.shape[:2] == (8, 10)
        for b, inst in enumerate(insts):
            for p in range(10):
                routes = traj.solution(b, p)
                assert routes[0][1] == p + 1
                assert validate_routes(inst, routes).ok
                assert float(traj.cost[b, p]) == pytest.approx(routes_cost(inst, routes), abs=1e-12)

    def test_sampling_reproducible(self, tsp_policy):
        batch = tsp_policy.prepare([generate_tsp(10, s) for s in range(4)])
        a = rollout_multistart(tsp_policy, batch, "sample", seed=5)
        b = rollout_multistart(tsp_policy, batch, "sample", seed=5)
        c = rollout_multistart(tsp_policy, batch, "sample", seed=6)
        assert torch.equal(a.actions, b.actions)
        assert not torch.equal(a.actions, c.actions)

    def test_sample_stream_independent_of_batch(self, tsp_policy):
        insts = [generate_tsp(10, s) for s in range(4)]
        full = rollout_multistart(tsp_policy, tsp_policy.prepare(insts, ids=[7, 8, 9, 10]), "sample", seed=2)
        one = rollout_multistart(tsp_policy, tsp_policy.prepare(insts[2:3], ids=[9]), "sample", seed=2)
        assert torch.equal(full.actions[2], one.actions[0])

    def test_first_move_excluded(self, tsp_policy):
        batch = tsp_policy.prepare([generate_tsp(6, 0)])
        traj = rollout_multistart(tsp_policy, batch)
        assert traj.step_logp.shape == (1, 6, 5)
        # the final step has a single feasible node
        np.testing.assert_allclose(traj.step_logp[..., -1].numpy(), 0.0, atol=1e-6)

    def test_demand_above_capacity(self, cvrp_policy):
        batch = cvrp_policy.prepare([CVRPInstance([[0.5, 0.5], [0.1, 0.1]], [0, 2], capacity=10)])
        batch.demands[0, 1] = 12  # instances reject this, raw batches may not
        with pytest.raises(ValueError, match="capacity"):
            rollout_multistart(cvrp_policy, batch)

    def test_no_vision_config(self):
        pol = Policy(ModelConfig.tiny("tsp", backbone="none"))
        traj = rollout_multistart(pol, pol.prepare([generate_tsp(7, 0)]))
        assert traj.actions.shape == (1, 7, 7)


class TestSampler:
    def test_inverse_cdf(self):
        logp = torch.log(torch.tensor([[0.0, 0.25, 0.75, 0.0]], dtype=torch.float64))
        picks = [int(_sample(logp, torch.tensor([u], dtype=torch.float64))) for u in (0.0, 0.2, 0.25, 0.99)]
        assert picks == [1, 1, 2, 2]

    def test_frequencies(self):
        p = torch.tensor([0.1, 0.0, 0.6, 0.3], dtype=torch.float64)
        u = torch.from_numpy(np.random.default_rng(0).random(200_000))
        counts = np.bincount(_sample(p.log().expand(len(u), -1), u).numpy(), minlength=4) / len(u)
        np.testing.assert_allclose(counts, p.numpy(), atol=0.005)
        assert counts[1] == 0


class TestScoring:
    @pytest.mark.parametrize("problem", ["tsp", "cvrp"])
    def test_replay_matches_rollout(self, tsp_policy, cvrp_policy, problem):
        pol = tsp_policy if problem == "tsp" else cvrp_policy
        insts = [generate_tsp(9, s) for s in range(3)] if problem == "tsp" else \
            [generate_cvrp(8, seed=s) for s in range(3)]
        batch = pol.prepare(insts)
        traj = rollout_multistart(pol, batch, "sample", seed=4)
        with torch.no_grad():
            np.testing.assert_allclose(score_trajectory(pol, batch, traj.actions).numpy(), traj.logp.numpy(),
                                       rtol=0, atol=1e-12)

    def test_infeasible_replay_raises(self, tsp_policy):
        batch = tsp_policy.prepare([generate_tsp(5, 0)])
        with pytest.raises(ValidationError):
            score_trajectory(tsp_policy, batch, torch.tensor([[[0, 1, 1, 3, 4]]]))

    def test_differentiable(self, tsp_policy):
        batch = tsp_policy.prepare([generate_tsp(6, 0)])
        traj = rollout_multistart(tsp_policy, batch)
        tsp_policy.zero_grad()
        score_trajectory(tsp_policy, batch, traj.actions).sum().backward()
        assert tsp_policy.decoder.pointer_k.weight.grad.abs().sum() > 0

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10**6))
    def test_cost_function(self, seed):
        inst = generate_tsp(8, seed)
        batch = stack_instances([inst])
        perm = np.random.default_rng(seed).permutation(8)
        acts = torch.from_numpy(perm)[None, None]
        assert float(trajectory_cost(batch, acts)) == pytest.approx(tour_cost(inst, perm), abs=1e-12)


class TestSolve:
    def test_tsp_solution(self, tsp_policy):
        inst = generate_tsp(10, 3)
        sol = solve(tsp_policy, inst)
        assert validate_tour(inst, sol.solution).ok
        assert sol.cost == pytest.approx(tour_cost(inst, sol.solution))
        assert sol.augmented and sol.wall_time > 0

    def test_cvrp_solution(self, cvrp_policy):
        inst = generate_cvrp(10, seed=3)
        sol = solve(cvrp_policy, inst, augment=False)
        assert validate_routes(inst, sol.solution).ok
        assert set(sol.to_record("cvrp")) == {"cost", "routes", "augmented", "wall_time"}

    def test_augmented_not_worse(self, tsp_policy):
        insts = [generate_tsp(10, s) for s in range(20)]
        aug = solve_many(tsp_policy, insts, augment=True)
        plain = solve_many(tsp_policy, insts, augment=False)
        assert all(a.cost <= p.cost for a, p in zip(aug, plain))

    def test_variant_invariance(self, tsp_policy):
        inst = generate_tsp(10, 5)
        base = solve(tsp_policy, inst).cost
        for v in augment_x8(inst):
            assert solve(tsp_policy, v).cost == pytest.approx(base, abs=1e-9)


class TestTrainableBackbone:
    def test_gradient_reaches_backbone(self):
        torch.manual_seed(0)
        pol = Policy(ModelConfig.tiny("tsp", frozen=False, pretrained=False))
        batch = pol.prepare([generate_tsp(5, 0)])
        assert batch.images is not None and batch.vis is None
        with torch.no_grad():
            pol.fusion.alpha1.fill_(1.0)
        traj = rollout_multistart(pol, batch, grad=True)
        traj.logp.sum().backward()
        assert pol.backbone.trunk[0].weight.grad is not None
