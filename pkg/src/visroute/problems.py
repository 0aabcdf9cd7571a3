"""TSP / CVRP instances, solution checks, costs, generation and file I/O."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

# cached distance matrices are only kept below this size
DIST_CACHE_MAX_N = 2000

# customer count -> default vehicle capacity
_CAPACITY_ANCHORS = ((20, 30), (50, 40), (100, 50))
MAX_DEMAND = 9


class ValidationError(ValueError):
    """Raised when a solution violates the problem constraints."""

    def __init__(self, report: "ViolationReport"):
        self.report = report
        super().__init__("; ".join(str(v) for v in report.violations))


@dataclass(frozen=True)
class Violation:
    kind: str
    message: str
    node: int | None = None
    position: int | None = None
    route: int | None = None
    load: int | None = None

    def __str__(self):
        return self.message


@dataclass
class ViolationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def kinds(self) -> set[str]:
        return {v.kind for v in self.violations}

    def add(self, kind, message, **kw):
        self.violations.append(Violation(kind, message, **kw))

    def raise_if_invalid(self):
        if self.violations:
            raise ValidationError(self)


def _frozen(arr, dtype):
    arr = np.array(arr, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TSPInstance:
    """Euclidean TSP on points in the unit square."""

    coords: np.ndarray
    depot: int = 0
    seed: int | None = None

    def __post_init__(self):
        coords = _frozen(self.coords, np.float64)
        object.__setattr__(self, "coords", coords)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ValueError(f"coords must have shape (n, 2), got {coords.shape}")
        if coords.shape[0] < 2:
            raise ValueError("an instance needs at least 2 nodes")
        if not np.all(np.isfinite(coords)) or coords.min() < 0 or coords.max() > 1:
            raise ValueError("coordinates must lie in [0, 1]^2")
        if not 0 <= self.depot < coords.shape[0]:
            raise ValueError(f"depot {self.depot} out of range")

    kind = "tsp"

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    def distances(self) -> np.ndarray:
        return _distance_matrix(self)

    def with_coords(self, coords) -> "TSPInstance":
        return TSPInstance(coords, depot=self.depot, seed=self.seed)


@dataclass(frozen=True, eq=False)
class CVRPInstance:
    """Capacitated VRP; ``n`` counts the depot."""

    coords: np.ndarray
    demands: np.ndarray
    capacity: int
    depot: int = 0
    seed: int | None = None

    def __post_init__(self):
        coords = _frozen(self.coords, np.float64)
        demands = _frozen(self.demands, np.int64)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "demands", demands)
        object.__setattr__(self, "capacity", int(self.capacity))
        n = coords.shape[0]
        if coords.ndim != 2 or coords.shape[1] != 2 or n < 2:
            raise ValueError(f"coords must have shape (n>=2, 2), got {coords.shape}")
        if not np.all(np.isfinite(coords)) or coords.min() < 0 or coords.max() > 1:
            raise ValueError("coordinates must lie in [0, 1]^2")
        if demands.shape != (n,):
            raise ValueError(f"expected {n} demands, got {demands.shape}")
        if not 0 <= self.depot < n:
            raise ValueError(f"depot {self.depot} out of range")
        if self.capacity <= 0:
            raise ValueError("capacity must be positive")
        if demands[self.depot] != 0:
            raise ValueError("depot demand must be 0")
        cust = np.delete(demands, self.depot)
        if np.any(cust <= 0) or np.any(cust > self.capacity):
            raise ValueError("customer demands must lie in (0, capacity]")

    kind = "cvrp"

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @property
    def normalized_demands(self) -> np.ndarray:
        return self.demands / self.capacity

    @property
    def customers(self) -> np.ndarray:
        return np.array([i for i in range(self.n) if i != self.depot])

    def distances(self) -> np.ndarray:
        return _distance_matrix(self)

    def with_coords(self, coords) -> "CVRPInstance":
        return CVRPInstance(coords, self.demands, self.capacity, depot=self.depot, seed=self.seed)


Instance = Union[TSPInstance, CVRPInstance]


def _distance_matrix(inst) -> np.ndarray:
    cached = inst.__dict__.get("_dist")
    if cached is not None:
        return cached
    diff = inst.coords[:, None, :] - inst.coords[None, :, :]
    dist = np.sqrt((diff**2).sum(-1))
    dist.setflags(write=False)
    if inst.n <= DIST_CACHE_MAX_N:
        object.__setattr__(inst, "_dist", dist)
    return dist


# ---------------------------------------------------------------- costs


def euclidean_cost(a, b) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def validate_tour(inst: Instance, tour: Sequence[int]) -> ViolationReport:
    report = ViolationReport()
    n = inst.n
    tour = [int(v) for v in tour]
    if len(tour) != n:
        report.add("length", f"tour has {len(tour)} entries, expected {n}")
    seen: dict[int, int] = {}
    for pos, v in enumerate(tour):
        if not 0 <= v < n:
            report.add("out_of_range", f"node {v} at position {pos} is out of range", node=v, position=pos)
            continue
        if v in seen:
            report.add("duplicate", f"node {v} repeated at position {pos} (first at {seen[v]})",
                       node=v, position=pos)
        else:
            seen[v] = pos
    for v in range(n):
        if v not in seen:
            report.add("missing", f"node {v} is never visited", node=v)
    return report


def validate_routes(inst: CVRPInstance, routes: Sequence[Sequence[int]]) -> ViolationReport:
    report = ViolationReport()
    depot, n = inst.depot, inst.n
    seen: dict[int, int] = {}
    for k, route in enumerate(routes):
        route = [int(v) for v in route]
        if len(route) < 2 or route[0] != depot or route[-1] != depot:
            report.add("endpoints", f"route {k} must start and end at the depot", route=k)
        load = 0
        for pos, v in enumerate(route):
            inner = 0 < pos < len(route) - 1
            if not 0 <= v < n:
                report.add("out_of_range", f"node {v} in route {k} is out of range", node=v, route=k, position=pos)
                continue
            if v == depot:
                if inner:
                    report.add("depot_inside", f"route {k} passes the depot at position {pos}",
                               node=v, route=k, position=pos)
                continue
            if v in seen:
                report.add("duplicate", f"customer {v} visited again in route {k} (first in route {seen[v]})",
                           node=v, route=k, position=pos)
            else:
                seen[v] = k
            load += int(inst.demands[v])
        if load > inst.capacity:
            report.add("capacity", f"route {k} carries {load} > capacity {inst.capacity}", route=k, load=load)
    for v in range(n):
        if v != depot and v not in seen:
            report.add("missing", f"customer {v} is never visited", node=v)
    return report


def tour_cost(inst: Instance, tour: Sequence[int], check: bool = True) -> float:
    """Closed-cycle length of ``tour``."""
    if check:
        validate_tour(inst, tour).raise_if_invalid()
    pts = inst.coords[np.asarray(tour, dtype=np.int64)]
    seg = pts - np.roll(pts, -1, axis=0)
    return float(np.sqrt((seg**2).sum(-1)).sum())


def routes_cost(inst: CVRPInstance, routes: Sequence[Sequence[int]], check: bool = True) -> float:
    if check:
        validate_routes(inst, routes).raise_if_invalid()
    total = 0.0
    for route in routes:
        pts = inst.coords[np.asarray(route, dtype=np.int64)]
        total += float(np.sqrt((np.diff(pts, axis=0) ** 2).sum(-1)).sum())
    return total


def split_routes(walk: Iterable[int], depot: int = 0) -> list[list[int]]:
    """Split a depot-punctuated walk into routes; empty routes are dropped."""
    routes, cur = [], []
    for v in walk:
        v = int(v)
        if v == depot:
            if cur:
                routes.append([depot, *cur, depot])
            cur = []
        else:
            cur.append(v)
    if cur:
        routes.append([depot, *cur, depot])
    return routes


def solution_cost(inst: Instance, solution) -> float:
    if isinstance(inst, CVRPInstance):
        return routes_cost(inst, solution)
    return tour_cost(inst, solution)


# ---------------------------------------------------------------- generation


def default_capacity(num_customers: int) -> int:
    xs, ys = zip(*_CAPACITY_ANCHORS)
    return int(round(float(np.interp(num_customers, xs, ys))))


def generate_tsp(n: int, seed: int) -> TSPInstance:
    if n < 2:
        raise ValueError(f"TSP needs n >= 2, got {n}")
    rng = np.random.default_rng(seed)
    return TSPInstance(rng.random((n, 2)), seed=seed)


def generate_cvrp(n: int, capacity: int | None = None, seed: int = 0) -> CVRPInstance:
    """Random CVRP with ``n`` customers plus a depot at index 0.

    Demands are uniform on {1..9}; capacity defaults to 30/40/50 for
    20/50/100 customers, interpolated in between.
    """
    if n < 1:
        raise ValueError(f"CVRP needs at least one customer, got {n}")
    if capacity is None:
        capacity = default_capacity(n)
    if capacity < MAX_DEMAND:
        raise ValueError(f"capacity {capacity} is below the maximum demand {MAX_DEMAND}")
    rng = np.random.default_rng(seed)
    coords = rng.random((n + 1, 2))
    demands = rng.integers(1, MAX_DEMAND + 1, size=n + 1)
    demands[0] = 0
    return CVRPInstance(coords, demands, capacity, seed=seed)


def generate(problem: str, n: int, seed: int, capacity: int | None = None) -> Instance:
    if problem == "tsp":
        return generate_tsp(n, seed)
    if problem == "cvrp":
        return generate_cvrp(n, capacity, seed)
    raise ValueError(f"unknown problem {problem!r}")


# ---------------------------------------------------------------- symmetry

SYMMETRIES = (
    lambda x, y: (x, y),
    lambda x, y: (y, x),
    lambda x, y: (x, 1 - y),
    lambda x, y: (y, 1 - x),
    lambda x, y: (1 - x, y),
    lambda x, y: (1 - y, x),
    lambda x, y: (1 - x, 1 - y),
    lambda x, y: (1 - y, 1 - x),
)


def augment_coords(coords: np.ndarray) -> np.ndarray:
    """All 8 square symmetries of ``coords``; shape (8, n, 2), identity first."""
    x, y = coords[..., 0], coords[..., 1]
    return np.stack([np.stack(t(x, y), axis=-1) for t in SYMMETRIES])


def augment_x8(inst: Instance) -> list[Instance]:
    variants = augment_coords(inst.coords)
    out = [inst]
    out.extend(inst.with_coords(c) for c in variants[1:])
    return out


# ---------------------------------------------------------------- file format


def instance_to_record(inst: Instance) -> dict:
    rec = {"type": inst.kind, "coords": inst.coords.tolist()}
    if isinstance(inst, CVRPInstance):
        rec["demands"] = inst.demands.tolist()
        rec["capacity"] = inst.capacity
    if inst.depot != 0:
        rec["depot"] = inst.depot
    if inst.seed is not None:
        rec["seed"] = inst.seed
    return rec


def instance_from_record(rec: dict) -> Instance:
    kind = rec.get("type")
    depot = rec.get("depot", 0)
    if kind == "tsp":
        return TSPInstance(rec["coords"], depot=depot, seed=rec.get("seed"))
    if kind == "cvrp":
        return CVRPInstance(rec["coords"], rec["demands"], rec["capacity"], depot=depot, seed=rec.get("seed"))
    raise ValueError(f"unknown instance type {kind!r}")


def dumps_instance(inst: Instance) -> str:
    # json writes floats with repr, i.e. shortest round-trip (up to 17 digits)
    return json.dumps(instance_to_record(inst), separators=(",", ":"))


def write_instances(path, instances: Iterable[Instance], header: str | None = None) -> None:
    path = Path(path)
    with path.open("w") as fh:
        if header is not None:
            fh.write(f"# {header}\n")
        for inst in instances:
            fh.write(dumps_instance(inst) + "\n")


def read_instances(path) -> list[Instance]:
    out = []
    with Path(path).open() as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            out.append(instance_from_record(json.loads(line)))
    return out
