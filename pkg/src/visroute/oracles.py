"""Exact and classical solvers used as ground truth."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .problems import CVRPInstance, TSPInstance, routes_cost, tour_cost, validate_tour

HELD_KARP_MAX_N = 16
BRUTE_FORCE_MAX_CUSTOMERS = 8


class SizeError(ValueError):
    pass


def _canonical(tour: list[int]) -> list[int]:
    """Rotate to start at 0 and pick the lexicographically smaller direction."""
    i = tour.index(0)
    fwd = tour[i:] + tour[:i]
    rev = [fwd[0]] + fwd[1:][::-1]
    return min(fwd, rev)


def held_karp_tsp(inst: TSPInstance) -> tuple[list[int], float]:
    """Exact TSP by dynamic programming over subsets (n <= 16).

    dp[S, j]: shortest path from node 0 through subset S of {1..n-1},
    ending at j in S. Ties go to the lowest predecessor index.
    """
    n = inst.n
    if n > HELD_KARP_MAX_N:
        raise SizeError(f"Held-Karp is limited to {HELD_KARP_MAX_N} nodes, got {n}")
    if n <= 3:
        tour = list(range(n))
        return tour, tour_cost(inst, tour)

    d = inst.distances()
    m = n - 1  # nodes 1..n-1 map to bits 0..m-1
    full = 1 << m
    dp = np.full((full, m), np.inf)
    parent = np.full((full, m), -1, dtype=np.int64)
    for j in range(m):
        dp[1 << j, j] = d[0, j + 1]

    masks = np.arange(full)
    popcount = np.array([bin(s).count("1") for s in range(full)])
    dm = d[1:, 1:]
    for size in range(2, m + 1):
        layer = masks[popcount == size]
        for j in range(m):
            sel = layer[(layer >> j) & 1 == 1]
            prev = sel ^ (1 << j)
            cand = dp[prev] + dm[:, j][None, :]  # (|sel|, m) over predecessor i
            best = np.argmin(cand, axis=1)
            dp[sel, j] = cand[np.arange(len(sel)), best]
            parent[sel, j] = best

    closing = dp[full - 1] + d[1:, 0]
    j = int(np.argmin(closing))
    path = []
    mask = full - 1
    while j >= 0:
        path.append(j + 1)
        pj = int(parent[mask, j])
        mask ^= 1 << j
        j = pj
    tour = _canonical([0] + path[::-1])
    return tour, tour_cost(inst, tour)


def brute_force_cvrp(inst: CVRPInstance) -> tuple[list[list[int]], float]:
    """Exact CVRP for up to 8 customers.

    Every capacity-feasible customer subset gets its best route by trying all
    orders; the cheapest partition into such routes is then found over
    subsets (the set containing the lowest remaining customer is chosen
    first, so each partition is enumerated once).
    """
    cust = [int(c) for c in inst.customers]
    k = len(cust)
    if k > BRUTE_FORCE_MAX_CUSTOMERS:
        raise SizeError(f"exhaustive CVRP is limited to {BRUTE_FORCE_MAX_CUSTOMERS} customers, got {k}")
    d = inst.distances()
    dep = inst.depot
    full = 1 << k

    route_cost = np.full(full, np.inf)
    route_order: dict[int, tuple[int, ...]] = {}
    for S in range(1, full):
        members = [cust[i] for i in range(k) if S >> i & 1]
        if sum(int(inst.demands[c]) for c in members) > inst.capacity:
            continue
        best, best_order = np.inf, None
        for perm in itertools.permutations(members):
            if perm[0] > perm[-1] and len(perm) > 1:
                continue  # reversed duplicate
            c = d[dep, perm[0]] + d[perm[-1], dep]
            c += sum(d[a, b] for a, b in zip(perm, perm[1:]))
            if c < best:
                best, best_order = c, perm
        route_cost[S] = best
        route_order[S] = best_order

    f = np.full(full, np.inf)
    choice = np.zeros(full, dtype=np.int64)
    f[0] = 0.0
    for S in range(1, full):
        low = S & -S
        rest = S ^ low
        sub = rest
        while True:
            T = sub | low
            c = route_cost[T] + f[S ^ T]
            if c < f[S]:
                f[S], choice[S] = c, T
            if sub == 0:
                break
            sub = (sub - 1) & rest

    routes = []
    S = full - 1
    while S:
        T = int(choice[S])
        routes.append([dep, *route_order[T], dep])
        S ^= T
    return routes, routes_cost(inst, routes)


def nearest_neighbor(inst) -> list[int]:
    """Greedy closest-unvisited tour from the depot; ties to lowest index."""
    d = inst.distances()
    n = inst.n
    visited = np.zeros(n, dtype=bool)
    cur = inst.depot
    visited[cur] = True
    tour = [cur]
    for _ in range(n - 1):
        row = np.where(visited, np.inf, d[cur])
        cur = int(np.argmin(row))
        visited[cur] = True
        tour.append(cur)
    return tour


def two_opt(inst, tour, tol: float = 1e-10, max_iter: int = 100_000) -> list[int]:
    """Best-improvement 2-opt until no exchange gains more than ``tol``."""
    validate_tour(inst, tour).raise_if_invalid()
    d = inst.distances()
    t = np.array(tour, dtype=np.int64)
    n = len(t)
    if n < 4:
        return t.tolist()
    for _ in range(max_iter):
        a = t
        b = np.roll(t, -1)
        # removing edges (a_i, b_i) and (a_j, b_j), adding (a_i, a_j) and (b_i, b_j)
        delta = d[a[:, None], a[None, :]] + d[b[:, None], b[None, :]] \
            - d[a, b][:, None] - d[a, b][None, :]
        delta = np.triu(delta, k=2)
        delta[0, n - 1] = 0.0  # those edges are adjacent
        i, j = np.unravel_index(np.argmin(delta), delta.shape)
        if delta[i, j] >= -tol:
            break
        t[i + 1:j + 1] = t[i + 1:j + 1][::-1].copy()
    return t.tolist()


@dataclass
class GapReport:
    instance_id: str
    method_cost: float
    oracle_cost: float

    @property
    def gap(self) -> float:
        return (self.method_cost - self.oracle_cost) / self.oracle_cost


def gap(method_cost: float, oracle_cost: float, instance_id: str = "") -> GapReport:
    return GapReport(str(instance_id), float(method_cost), float(oracle_cost))


GAP_CSV_HEADER = ("instance_id", "method_cost", "oracle_cost", "gap")


def write_gap_csv(path, reports: list[GapReport]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(GAP_CSV_HEADER)
        for r in reports:
            w.writerow([r.instance_id, repr(r.method_cost), repr(r.oracle_cost), repr(r.gap)])


def read_gap_csv(path) -> list[GapReport]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [GapReport(r["instance_id"], float(r["method_cost"]), float(r["oracle_cost"])) for r in rows]


def optimal_cost(inst) -> float:
    """Exact optimum via the oracle matching the instance type."""
    if isinstance(inst, CVRPInstance):
        return brute_force_cvrp(inst)[1]
    return held_karp_tsp(inst)[1]
