import json
import math
import re

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from visroute.problems import (
    CVRPInstance,
    TSPInstance,
    ValidationError,
    augment_x8,
    default_capacity,
    dumps_instance,
    euclidean_cost,
    generate_cvrp,
    generate_tsp,
    read_instances,
    routes_cost,
    split_routes,
    tour_cost,
    validate_routes,
    validate_tour,
    write_instances,
)

SQUARE = TSPInstance([[0, 0], [1, 0], [1, 1], [0, 1]])


def edge_sum(coords, order, closed=True):
    """Independent scalar re-summation of a walk."""
    total = 0.0
    seq = list(order) + ([order[0]] if closed else [])
    for a, b in zip(seq, seq[1:]):
        total += math.sqrt((coords[a][0] - coords[b][0]) ** 2 + (coords[a][1] - coords[b][1]) ** 2)
    return total


class TestEuclidean:
    def test_unit_segment(self):
        assert euclidean_cost((0, 0), (1, 0)) == 1.0

    def test_345(self):
        assert euclidean_cost((0, 0), (0.6, 0.8)) == pytest.approx(1.0, abs=1e-15)

    def test_extended_precision(self):
        rng = np.random.default_rng(3)
        mpmath.mp.dps = 40
        for _ in range(50):
            a, b = rng.random(2), rng.random(2)
            exact = mpmath.sqrt((mpmath.mpf(a[0]) - mpmath.mpf(b[0])) ** 2 + (mpmath.mpf(a[1]) - mpmath.mpf(b[1])) ** 2)
            assert abs(euclidean_cost(a, b) - float(exact)) < 1e-12

    @given(st.tuples(st.floats(0, 1), st.floats(0, 1)), st.tuples(st.floats(0, 1), st.floats(0, 1)))
    def test_symmetric_and_zero_iff_equal(self, a, b):
        assert euclidean_cost(a, b) == euclidean_cost(b, a)
        assert (euclidean_cost(a, b) == 0) == (a == b)


class TestTourCost:
    def test_square_perimeter(self):
        assert tour_cost(SQUARE, [0, 1, 2, 3]) == pytest.approx(4.0, abs=1e-15)

    def test_two_nodes(self):
        inst = TSPInstance([[0.1, 0.2], [0.4, 0.6]])
        assert tour_cost(inst, [0, 1]) == pytest.approx(2 * 0.5)

    def test_random_seven(self):
        inst = generate_tsp(7, 11)
        order = list(np.random.default_rng(1).permutation(7))
        assert tour_cost(inst, order) == pytest.approx(edge_sum(inst.coords, order), abs=1e-12)

    def test_invalid_names_duplicate(self):
        with pytest.raises(ValidationError, match="node 1"):
            tour_cost(SQUARE, [0, 1, 1, 3])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(3, 30), st.integers(0, 10**6), st.integers(0, 29))
    def test_rotation_reversal_invariance(self, n, seed, shift):
        inst = generate_tsp(n, seed)
        order = list(np.random.default_rng(seed).permutation(n))
        base = tour_cost(inst, order)
        rot = order[shift % n:] + order[:shift % n]
        assert tour_cost(inst, rot) == pytest.approx(base, abs=1e-9)
        assert tour_cost(inst, rot[::-1]) == pytest.approx(base, abs=1e-9)


class TestValidation:
    def test_identity_ok(self):
        assert validate_tour(generate_tsp(5, 0), range(5)).ok

    def test_duplicate_report(self):
        rep = validate_tour(SQUARE, [0, 1, 1, 3])
        dup = [v for v in rep.violations if v.kind == "duplicate"]
        assert len(dup) == 1 and dup[0].node == 1
        assert {v.node for v in rep.violations if v.kind == "missing"} == {2}

    def test_reports_every_violation(self):
        rep = validate_tour(SQUARE, [0, 0, 7])
        assert rep.kinds() == {"length", "duplicate", "out_of_range", "missing"}

    def test_capacity_boundary(self):
        inst = CVRPInstance([[0.5, 0.5], [0.1, 0.1], [0.9, 0.9]], [0, 5, 6], capacity=10)
        rep = validate_routes(inst, [[0, 1, 2, 0]])
        cap = [v for v in rep.violations if v.kind == "capacity"]
        assert len(cap) == 1 and cap[0].route == 0 and cap[0].load == 11
        assert validate_routes(inst, [[0, 1, 0], [0, 2, 0]]).ok

    def test_capacity_error_names_route(self):
        inst = CVRPInstance([[0.5, 0.5], [0.1, 0.1], [0.9, 0.9]], [0, 5, 6], capacity=10)
        with pytest.raises(ValidationError, match="route 0 carries 11"):
            routes_cost(inst, [[0, 1, 2, 0]])

    def test_coverage_error_names_node(self):
        inst = generate_cvrp(3, 30, seed=0)
        with pytest.raises(ValidationError, match="customer 3"):
            routes_cost(inst, [[0, 1, 2, 0]])

    def test_route_endpoints_and_inner_depot(self):
        inst = generate_cvrp(3, 30, seed=0)
        rep = validate_routes(inst, [[1, 2, 0], [0, 3, 0, 0]])
        assert "endpoints" in rep.kinds()
        rep = validate_routes(inst, [[0, 1, 0, 2, 0], [0, 3, 0]])
        assert "depot_inside" in rep.kinds()


class TestRoutesCost:
    def test_single_route(self):
        inst = CVRPInstance([[0, 0], [0.3, 0.4]], [0, 3], capacity=10)
        assert routes_cost(inst, [[0, 1, 0]]) == pytest.approx(1.0)

    def test_two_singletons(self):
        inst = CVRPInstance([[0, 0], [0.3, 0.4], [0, 0.25]], [0, 3, 4], capacity=10)
        assert routes_cost(inst, [[0, 1, 0], [0, 2, 0]]) == pytest.approx(1.0 + 0.5)

    def test_random_six_customers(self):
        inst = generate_cvrp(6, 30, seed=4)
        routes = [[0, 3, 1, 0], [0, 2, 6, 5, 0], [0, 4, 0]]
        expected = sum(edge_sum(inst.coords, r, closed=False) for r in routes)
        assert routes_cost(inst, routes) == pytest.approx(expected, abs=1e-12)

    def test_equals_closed_walk(self):
        inst = generate_cvrp(6, 30, seed=4)
        routes = [[0, 3, 1, 0], [0, 2, 6, 5, 0], [0, 4, 0]]
        walk = [0, 3, 1, 0, 2, 6, 5, 0, 4]
        assert routes_cost(inst, routes) == pytest.approx(tour_cost(inst, walk, check=False), abs=1e-12)

    def test_split_routes(self):
        assert split_routes([3, 1, 0, 2, 0, 0]) == [[0, 3, 1, 0], [0, 2, 0]]


class TestGeneration:
    def test_tsp_deterministic(self):
        a, b = generate_tsp(20, 5), generate_tsp(20, 5)
        assert dumps_instance(a) == dumps_instance(b)

    def test_tsp_rejects_small(self):
        with pytest.raises(ValueError):
            generate_tsp(1, 0)

    def test_tsp_uniform_mean(self):
        coords = np.concatenate([generate_tsp(1000, s).coords for s in range(100)])
        assert np.all(np.abs(coords.mean(0) - 0.5) < 0.01)

    def test_cvrp_deterministic(self):
        assert dumps_instance(generate_cvrp(20, 30, 1)) == dumps_instance(generate_cvrp(20, 30, 1))

    def test_cvrp_demands(self):
        inst = generate_cvrp(50, 40, seed=3)
        nd = inst.normalized_demands
        assert nd[0] == 0
        assert np.all(nd[1:] > 0) and np.all(nd[1:] <= 9 / 40)
        assert np.all(nd == inst.demands / 40)

    def test_cvrp_demand_mean(self):
        d = np.concatenate([generate_cvrp(1000, 50, s).demands[1:] for s in range(100)])
        assert abs(d.mean() - 5.0) < 0.05

    def test_cvrp_capacity_guard(self):
        with pytest.raises(ValueError):
            generate_cvrp(20, 8, 0)

    @pytest.mark.parametrize("n,cap", [(20, 30), (50, 40), (100, 50), (35, 35), (10, 30), (500, 50)])
    def test_default_capacity(self, n, cap):
        assert default_capacity(n) == cap
        assert generate_cvrp(n, seed=0).capacity == cap


class TestAugmentation:
    def test_identity_first(self):
        inst = generate_tsp(10, 0)
        assert np.array_equal(augment_x8(inst)[0].coords, inst.coords)

    def test_reflection(self):
        inst = TSPInstance([[0.2, 0.7], [0.5, 0.5]])
        variants = [v.coords[0].tolist() for v in augment_x8(inst)]
        assert [0.8, 0.7] in [[pytest.approx(x), pytest.approx(y)] for x, y in variants]
        assert len({tuple(np.round(v, 12)) for v in variants}) == 8

    def test_tour_cost_invariant(self):
        for seed in range(20):
            inst = generate_cvrp(12, seed=seed)
            order = list(np.random.default_rng(seed).permutation(inst.n))
            costs = [tour_cost(v, order) for v in augment_x8(inst)]
            assert max(costs) - min(costs) < 1e-9
            for v in augment_x8(inst):
                assert np.array_equal(v.demands, inst.demands) and v.capacity == inst.capacity

    def test_pairwise_distances_preserved(self):
        inst = generate_tsp(30, 9)
        d0 = inst.distances()
        for v in augment_x8(inst):
            assert np.max(np.abs(v.distances() - d0)) < 1e-12


class TestFileFormat:
    def test_roundtrip(self, tmp_path):
        insts = [generate_tsp(5, 1), generate_cvrp(4, 30, 2)]
        path = tmp_path / "inst.jsonl"
        write_instances(path, insts, header="test")
        back = read_instances(path)
        assert np.array_equal(back[0].coords, insts[0].coords)
        assert np.array_equal(back[1].demands, insts[1].demands)
        assert back[1].capacity == 30 and back[1].seed == 2

    def test_coordinate_precision(self):
        inst = generate_tsp(50, 0)
        rec = json.loads(dumps_instance(inst))
        assert np.array_equal(np.array(rec["coords"]), inst.coords)
        body = dumps_instance(inst).split('"coords":')[1]
        tokens = re.findall(r"0\.\d+", body)
        # shortest round-trip repr needs 15-17 significant digits for random doubles
        assert np.median([len(t) - 2 for t in tokens]) >= 15
