import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from visroute.oracles import (
    SizeError,
    brute_force_cvrp,
    gap,
    held_karp_tsp,
    nearest_neighbor,
    read_gap_csv,
    two_opt,
    write_gap_csv,
)
from visroute.problems import CVRPInstance, TSPInstance, generate_cvrp, generate_tsp, tour_cost, validate_routes


def brute_tsp(inst):
    best = np.inf
    for perm in itertools.permutations(range(1, inst.n)):
        best = min(best, tour_cost(inst, (0,) + perm, check=False))
    return best


def brute_cvrp_walks(inst):
    """Every customer order split by every set of depot returns."""
    cust = list(range(1, inst.n))
    best = np.inf
    for perm in itertools.permutations(cust):
        for cuts in itertools.product([False, True], repeat=len(perm) - 1):
            routes, cur = [], [perm[0]]
            for c, cut in zip(perm[1:], cuts):
                if cut:
                    routes.append(cur)
                    cur = []
                cur.append(c)
            routes.append(cur)
            if any(inst.demands[r].sum() > inst.capacity for r in routes):
                continue
            cost = sum(tour_cost(inst, [0] + r, check=False) for r in routes)
            best = min(best, cost)
    return best


class TestHeldKarp:
    def test_square(self):
        tour, cost = held_karp_tsp(TSPInstance([[0, 0], [1, 1], [1, 0], [0, 1]]))
        assert tour == [0, 2, 1, 3]
        assert cost == pytest.approx(4.0)

    def test_frozen_nine(self):
        # frozen from an exhaustive scalar enumeration of all 8! orders
        assert held_karp_tsp(generate_tsp(9, 0))[1] == pytest.approx(3.273773087016747, abs=1e-12)

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_brute_force(self, seed):
        inst = generate_tsp(8, seed)
        tour, cost = held_karp_tsp(inst)
        assert cost == pytest.approx(brute_tsp(inst), abs=1e-12)
        assert tour_cost(inst, tour) == cost

    def test_canonical_orientation(self):
        tour, _ = held_karp_tsp(generate_tsp(7, 1))
        assert tour[0] == 0 and tour[1] < tour[-1]

    def test_tiny(self):
        assert held_karp_tsp(TSPInstance([[0, 0], [0.3, 0.4]]))[1] == pytest.approx(1.0)

    def test_size_limit(self):
        held_karp_tsp(generate_tsp(16, 0))
        with pytest.raises(SizeError):
            held_karp_tsp(generate_tsp(17, 0))


class TestBruteForceCVRP:
    @pytest.mark.parametrize("seed", range(4))
    def test_matches_walk_enumeration(self, seed):
        inst = generate_cvrp(6, 12, seed=seed)
        routes, cost = brute_force_cvrp(inst)
        assert validate_routes(inst, routes).ok
        assert cost == pytest.approx(brute_cvrp_walks(inst), abs=1e-12)

    def test_single_vehicle_is_tsp(self):
        inst = generate_cvrp(6, 100, seed=1)
        _, cost = brute_force_cvrp(inst)
        assert cost == pytest.approx(held_karp_tsp(TSPInstance(inst.coords))[1], abs=1e-12)

    def test_singletons_when_tight(self):
        inst = CVRPInstance([[0.5, 0.5], [0.1, 0.1], [0.9, 0.9], [0.1, 0.9]], [0, 9, 9, 9], capacity=9)
        routes, _ = brute_force_cvrp(inst)
        assert sorted(len(r) for r in routes) == [3, 3, 3]

    def test_eight_customers(self):
        routes, cost = brute_force_cvrp(generate_cvrp(8, 20, seed=0))
        assert np.isfinite(cost)

    def test_size_limit(self):
        with pytest.raises(SizeError):
            brute_force_cvrp(generate_cvrp(9, 30, seed=0))


class TestHeuristics:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(4, 12), st.integers(0, 10**6))
    def test_dominance(self, n, seed):
        inst = generate_tsp(n, seed)
        opt = held_karp_tsp(inst)[1]
        nn = nearest_neighbor(inst)
        nn_cost = tour_cost(inst, nn)
        improved = two_opt(inst, nn)
        assert nn_cost >= opt - 1e-9
        assert tour_cost(inst, improved) <= nn_cost + 1e-12
        assert tour_cost(inst, improved) >= opt - 1e-9

    def test_nearest_neighbor_line(self):
        inst = TSPInstance([[0, 0], [0.5, 0], [0.1, 0], [0.3, 0]])
        assert nearest_neighbor(inst) == [0, 2, 3, 1]

    def test_two_opt_uncrosses(self):
        inst = TSPInstance([[0, 0], [1, 1], [1, 0], [0, 1]])
        tour = two_opt(inst, [0, 1, 2, 3])
        assert tour_cost(inst, tour) == pytest.approx(4.0)

    def test_two_opt_local_optimum(self):
        inst = generate_tsp(30, 4)
        tour = two_opt(inst, nearest_neighbor(inst))
        base = tour_cost(inst, tour)
        for i, j in itertools.combinations(range(30), 2):
            cand = tour[:i] + tour[i:j + 1][::-1] + tour[j + 1:]
            assert tour_cost(inst, cand) >= base - 1e-9


class TestGap:
    def test_value(self):
        assert gap(1.1, 1.0).gap == pytest.approx(0.1)

    def test_csv_roundtrip(self, tmp_path):
        reps = [gap(1.2345678901234567, 1.1, "a"), gap(3.0, 3.0, "b")]
        write_gap_csv(tmp_path / "g.csv", reps)
        back = read_gap_csv(tmp_path / "g.csv")
        assert [r.method_cost for r in back] == [r.method_cost for r in reps]
        assert back[1].gap == 0.0
