"""Policy network and autoregressive solution construction.

Rollouts are batched over instances (B) and multi-start trajectories (P):
all state tensors carry shape (B, P, ...).
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import (
    Backbone,
    CrossModalFusion,
    FeatureCache,
    SequentialEncoder,
    VisualEmbedding,
    extract_feature_maps,
    node_visual_inputs,
)
from .problems import (
    CVRPInstance,
    Instance,
    ValidationError,
    ViolationReport,
    augment_x8,
    routes_cost,
    split_routes,
    tour_cost,
)
from .raster import rasterize


@dataclass
class ModelConfig:
    problem: str = "tsp"
    dim: int = 128
    layers: int = 6
    heads: int = 8
    ff_dim: int = 512
    fusion_heads: int = 8
    backbone: str = "resnet18"  # "none" drops the visual branch
    frozen: bool = True
    pretrained: bool = True
    weights_path: str | None = None
    backbone_seed: int = 0
    glimpse: bool = True
    logit_clip: float = 10.0

    @classmethod
    def small(cls, problem: str = "tsp", **kw) -> "ModelConfig":
        base = dict(problem=problem, dim=64, layers=3, heads=4, ff_dim=256, fusion_heads=4)
        base.update(kw)
        return cls(**base)

    @classmethod
    def tiny(cls, problem: str = "tsp", **kw) -> "ModelConfig":
        base = dict(problem=problem, dim=16, layers=1, heads=2, ff_dim=32, fusion_heads=2)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class InstanceBatch:
    """Same-size instances stacked for the network (depot at index 0)."""

    problem: str
    coords: torch.Tensor  # (B, n, 2) float64
    demands: torch.Tensor | None = None  # (B, n) int64
    capacity: torch.Tensor | None = None  # (B,) int64
    vis: torch.Tensor | None = None  # (B, n, 2C) frozen visual inputs
    images: torch.Tensor | None = None  # (B, 224, 224, 3) when the backbone trains
    ids: np.ndarray | None = None  # per-row stream ids for sampling

    @property
    def size(self) -> int:
        return self.coords.shape[0]

    @property
    def n(self) -> int:
        return self.coords.shape[1]

    def select(self, idx) -> "InstanceBatch":
        idx = torch.as_tensor(idx, dtype=torch.long)
        pick = lambda t: None if t is None else t[idx]
        ids = None if self.ids is None else self.ids[idx.numpy()]
        return InstanceBatch(self.problem, self.coords[idx], pick(self.demands), pick(self.capacity),
                             pick(self.vis), pick(self.images), ids)

    @property
    def norm_demand(self) -> torch.Tensor | None:
        if self.demands is None:
            return None
        return self.demands.double() / self.capacity.double()[:, None]


def stack_instances(instances: list[Instance]) -> InstanceBatch:
    first = instances[0]
    if any(inst.n != first.n or inst.kind != first.kind for inst in instances):
        raise ValueError("a batch needs instances of one type and size")
    if any(inst.depot != 0 for inst in instances):
        raise ValueError("batched decoding expects the depot at index 0")
    coords = torch.from_numpy(np.stack([inst.coords for inst in instances]))
    if first.kind == "cvrp":
        demands = torch.from_numpy(np.stack([inst.demands for inst in instances]))
        cap = torch.tensor([inst.capacity for inst in instances], dtype=torch.long)
        return InstanceBatch("cvrp", coords, demands, cap, ids=np.arange(len(instances)))
    return InstanceBatch("tsp", coords, ids=np.arange(len(instances)))


def concat_batches(batches: list[InstanceBatch]) -> InstanceBatch:
    cat = lambda name: None if getattr(batches[0], name) is None else torch.cat([getattr(b, name) for b in batches])
    ids = None if batches[0].ids is None else np.concatenate([b.ids for b in batches])
    return InstanceBatch(batches[0].problem, cat("coords"), cat("demands"), cat("capacity"),
                         cat("vis"), cat("images"), ids)


class PointerDecoder(nn.Module):
    """Context query -> masked multi-head glimpse -> single-head pointer.

    Context is Linear(mean F ⊕ F_first ⊕ F_current [⊕ remaining load]).
    Logits are clipped with C * tanh(.) before masking.
    """

    def __init__(self, problem: str, dim: int, heads: int, glimpse: bool = True, clip: float = 10.0):
        super().__init__()
        self.problem = problem
        self.dim = dim
        self.heads = heads
        self.clip = clip
        self.glimpse = glimpse
        self.ctx_graph = nn.Linear(dim, dim, bias=False)
        self.ctx_first = nn.Linear(dim, dim, bias=False)
        self.ctx_current = nn.Linear(dim, dim, bias=False)
        if problem == "cvrp":
            self.ctx_load = nn.Linear(1, dim, bias=False)
        if glimpse:
            self.glimpse_kv = nn.Linear(dim, 2 * dim, bias=False)
            self.glimpse_out = nn.Linear(dim, dim)
        self.pointer_k = nn.Linear(dim, dim, bias=False)

    def precompute(self, emb: torch.Tensor) -> dict:
        B, n, D = emb.shape
        cache = {
            "graph": self.ctx_graph(emb.mean(dim=1, keepdim=True)),
            "first": self.ctx_first(emb),
            "current": self.ctx_current(emb),
            "pointer": self.pointer_k(emb),
        }
        if self.glimpse:
            hd = D // self.heads
            k, v = self.glimpse_kv(emb).view(B, n, 2, self.heads, hd).permute(2, 0, 3, 1, 4)
            cache["gk"], cache["gv"] = k, v
        return cache

    def forward(self, cache: dict, first, current, load, feasible) -> torch.Tensor:
        """Log-probabilities (B, P, n); infeasible nodes get -inf."""
        B, P = first.shape
        D = self.dim
        gather = lambda t, idx: t.gather(1, idx[..., None].expand(B, P, D))
        q = cache["graph"] + gather(cache["first"], first) + gather(cache["current"], current)
        if self.problem == "cvrp":
            q = q + self.ctx_load(load[..., None].to(q.dtype))
        if self.glimpse:
            hd = D // self.heads
            qh = q.view(B, P, self.heads, hd).transpose(1, 2)
            g = F.scaled_dot_product_attention(qh, cache["gk"], cache["gv"], attn_mask=feasible[:, None])
            q = self.glimpse_out(g.transpose(1, 2).reshape(B, P, D))
        logits = q @ cache["pointer"].transpose(1, 2) / math.sqrt(D)
        logits = self.clip * torch.tanh(logits)
        logits = logits.masked_fill(~feasible, float("-inf"))
        return torch.log_softmax(logits, dim=-1)


class Policy(nn.Module):
    """Fused visual/sequential encoder with a pointer decoder."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        self.seq = SequentialEncoder(c.problem, c.dim, c.layers, c.heads, c.ff_dim)
        if c.backbone != "none":
            self.backbone = Backbone(c.backbone, c.weights_path, c.pretrained, c.frozen, c.backbone_seed)
            self.visual = VisualEmbedding(self.backbone.out_channels, c.dim)
            self.fusion = CrossModalFusion(c.dim, c.fusion_heads, c.ff_dim)
        else:
            self.backbone = None
        self.decoder = PointerDecoder(c.problem, c.dim, c.heads, c.glimpse, c.logit_clip)
        self.feature_cache = FeatureCache()

    @property
    def dtype(self):
        return self.decoder.pointer_k.weight.dtype

    @property
    def has_vision(self) -> bool:
        return self.backbone is not None

    def prepare(self, instances: list[Instance], ids=None, use_cache: bool = True) -> InstanceBatch:
        """Stack instances and attach what the visual branch needs."""
        batch = stack_instances(instances)
        batch.ids = np.arange(len(instances)) if ids is None else np.asarray(ids)
        if not self.has_vision:
            return batch
        pixels = [rasterize(inst).pixels for inst in instances]
        if self.backbone.frozen:
            G = extract_feature_maps(self.backbone, pixels, self.feature_cache if use_cache else None)
            batch.vis = node_visual_inputs(G.float(), batch.coords.float())
        else:
            batch.images = torch.from_numpy(np.stack(pixels))
        return batch

    def encode(self, batch: InstanceBatch) -> torch.Tensor:
        """Fused node embeddings (B, n, D)."""
        dt = self.dtype
        coords = batch.coords.to(dt)
        demand = None if batch.demands is None else batch.norm_demand.to(dt)
        T = self.seq(coords, demand)
        if not self.has_vision:
            return T
        vis = batch.vis
        if vis is None:
            G = self.backbone(batch.images)
            vis = node_visual_inputs(G, coords)
        V = self.visual(vis.to(dt), coords)
        return self.fusion(T, V)

    def visual_embedding(self, batch: InstanceBatch) -> torch.Tensor:
        dt = self.dtype
        return self.visual(batch.vis.to(dt), batch.coords.to(dt))


# ---------------------------------------------------------------- decoding


@dataclass
class DecodeState:
    current: torch.Tensor  # (B, P) node index
    first: torch.Tensor  # (B, P) forced first node
    visited: torch.Tensor  # (B, P, n) bool; the depot is never marked
    remaining: torch.Tensor | None  # (B, P) int capacity units left (CVRP)
    capacity: torch.Tensor | None  # (B, 1)
    step: int = 0
    done: torch.Tensor | None = None  # (B, P) bool

    @property
    def load(self) -> torch.Tensor | None:
        """Remaining capacity as a fraction of Q."""
        if self.remaining is None:
            return None
        return self.remaining.double() / self.capacity.double()


def initial_state(batch: InstanceBatch, starts: torch.Tensor) -> DecodeState:
    """State after the forced first move to ``starts`` (B, P)."""
    B, P = starts.shape
    visited = torch.zeros(B, P, batch.n, dtype=torch.bool)
    visited.scatter_(2, starts[..., None], True)
    if batch.problem == "cvrp":
        cap = batch.capacity[:, None]
        first_demand = batch.demands.gather(1, starts)
        return DecodeState(starts.clone(), starts.clone(), visited, cap - first_demand, cap,
                           step=1, done=torch.zeros(B, P, dtype=torch.bool))
    return DecodeState(starts.clone(), starts.clone(), visited, None, None,
                       step=1, done=torch.zeros(B, P, dtype=torch.bool))


def feasibility_mask(batch: InstanceBatch, state: DecodeState) -> torch.Tensor:
    """Boolean (B, P, n): True where a node may be chosen next."""
    if batch.problem == "tsp":
        return ~state.visited
    demand = batch.demands[:, None, :]
    cust = ~state.visited & (demand <= state.remaining[..., None])
    cust[..., 0] = False
    at_depot = state.current == 0
    depot_ok = ~(at_depot & cust.any(-1))
    cust[..., 0] = depot_ok
    return cust


def _advance(batch: InstanceBatch, state: DecodeState, action: torch.Tensor) -> DecodeState:
    visited = state.visited.clone()
    visited.scatter_(2, action[..., None], True)
    if batch.problem == "tsp":
        done = visited.all(-1)
        return replace(state, current=action, visited=visited, step=state.step + 1, done=done)
    visited[..., 0] = False
    at_depot = action == 0
    demand = batch.demands.gather(1, action)
    remaining = torch.where(at_depot, state.capacity.expand_as(action), state.remaining - demand)
    done = visited[..., 1:].all(-1) & at_depot
    return replace(state, current=action, visited=visited, remaining=remaining,
                   step=state.step + 1, done=done)


def _max_steps(problem: str, n: int) -> int:
    # CVRP worst case: depot return after every customer
    return n if problem == "tsp" else 2 * (n - 1)


def default_starts(batch: InstanceBatch) -> torch.Tensor:
    """One forced first node per trajectory: every node (TSP) or every customer (CVRP)."""
    first = 0 if batch.problem == "tsp" else 1
    starts = torch.arange(first, batch.n)
    return starts[None].expand(batch.size, -1).contiguous()


def _uniforms(seed: int, ids: np.ndarray, starts: torch.Tensor, length: int) -> torch.Tensor:
    """One seeded stream per (seed, instance id, start node)."""
    B, P = starts.shape
    out = np.empty((B, P, length))
    st = starts.numpy()
    for b in range(B):
        for p in range(P):
            out[b, p] = np.random.default_rng([seed, int(ids[b]), int(st[b, p])]).random(length)
    return torch.from_numpy(out)


def _sample(logp: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    probs = logp.detach().double().exp()
    cdf = probs.cumsum(-1)
    target = u[..., None] * cdf[..., -1:]
    return (cdf <= target).sum(-1).clamp(max=logp.shape[-1] - 1)


@dataclass
class TrajectoryBatch:
    """Multi-start rollout results.

    ``actions[..., 0]`` is the forced first node; later entries are the
    chosen nodes (CVRP walks are padded with the depot after completion).
    """

    problem: str
    actions: torch.Tensor  # (B, P, L)
    step_logp: torch.Tensor  # (B, P, L-1), zero after completion
    cost: torch.Tensor  # (B, P) float64

    @property
    def logp(self) -> torch.Tensor:
        return self.step_logp.sum(-1)

    @property
    def reward(self) -> torch.Tensor:
        return -self.cost

    @property
    def starts(self) -> torch.Tensor:
        return self.actions[..., 0]

    def solution(self, b: int, p: int):
        seq = self.actions[b, p].tolist()
        if self.problem == "tsp":
            return seq
        return split_routes(seq, depot=0)


def trajectory_cost(batch: InstanceBatch, actions: torch.Tensor) -> torch.Tensor:
    coords = batch.coords.double()
    B, P, L = actions.shape
    idx = actions.reshape(B, P * L, 1).expand(-1, -1, 2)
    pts = coords.gather(1, idx).view(B, P, L, 2)
    if batch.problem == "tsp":
        seg = pts - pts.roll(-1, dims=2)
        return seg.norm(dim=-1).sum(-1)
    depot = coords[:, :1, None, :].expand(B, P, 1, 2)
    walk = torch.cat([depot, pts, depot], dim=2)
    return (walk[:, :, 1:] - walk[:, :, :-1]).norm(dim=-1).sum(-1)


def _decode(policy: Policy, batch: InstanceBatch, starts: torch.Tensor, mode: str = "greedy",
            seed: int = 0, forced: torch.Tensor | None = None, record_probs: list | None = None):
    emb = policy.encode(batch)
    cache = policy.decoder.precompute(emb)
    state = initial_state(batch, starts)
    max_steps = _max_steps(batch.problem, batch.n)
    u = _uniforms(seed, batch.ids, starts, max_steps) if mode == "sample" else None

    actions = [starts]
    step_logp = []
    for t in range(max_steps):
        if bool(state.done.all()):
            break
        feasible = feasibility_mask(batch, state)
        if not bool(feasible.any(-1).all()):
            raise RuntimeError("decoder reached a state with no feasible node")
        load = state.load
        logp = policy.decoder(cache, state.first, state.current,
                              None if load is None else load.to(emb.dtype), feasible)
        if record_probs is not None:
            record_probs.append((logp.detach().exp(), feasible))
        if forced is not None:
            if t + 1 < forced.shape[-1]:
                a = forced[..., t + 1]
            else:
                a = torch.zeros_like(starts)
            ok = feasible.gather(2, a[..., None]).squeeze(-1) | state.done
            if not bool(ok.all()):
                b, p = map(int, (~ok).nonzero()[0])
                report = ViolationReport()
                report.add("infeasible_step", f"trajectory ({b}, {p}) takes infeasible node {int(a[b, p])} "
                           f"at step {t + 1}", node=int(a[b, p]), position=t + 1)
                raise ValidationError(report)
        elif mode == "greedy":
            a = logp.argmax(-1)
        elif mode == "sample":
            a = _sample(logp, u[..., t])
        else:
            raise ValueError(f"unknown decode mode {mode!r}")
        if batch.problem == "cvrp":
            a = torch.where(state.done, torch.zeros_like(a), a)
        chosen = logp.gather(2, a[..., None]).squeeze(-1)
        step_logp.append(torch.where(state.done, torch.zeros_like(chosen), chosen))
        actions.append(a)
        state = _advance(batch, state, a)
    if not bool(state.done.all()):
        report = ViolationReport()
        report.add("incomplete", "trajectory does not complete the instance")
        raise ValidationError(report)
    acts = torch.stack(actions, dim=-1)
    if step_logp:
        slp = torch.stack(step_logp, dim=-1)
    else:
        slp = torch.zeros(*starts.shape, 0, dtype=emb.dtype)
    return acts, slp


def rollout_multistart(policy: Policy, batch: InstanceBatch, mode: str = "greedy", seed: int = 0,
                       starts: torch.Tensor | None = None, grad: bool = False) -> TrajectoryBatch:
    """N trajectories per instance, one per forced first node."""
    if batch.problem == "cvrp" and bool((batch.demands > batch.capacity[:, None]).any()):
        raise ValueError("instance has a customer demand above capacity")
    if starts is None:
        starts = default_starts(batch)
    with torch.set_grad_enabled(grad):
        acts, slp = _decode(policy, batch, starts, mode=mode, seed=seed)
    return TrajectoryBatch(batch.problem, acts, slp, trajectory_cost(batch, acts))


def score_trajectory(policy: Policy, batch: InstanceBatch, actions: torch.Tensor,
                     per_step: bool = False) -> torch.Tensor:
    """Teacher-forced log pi(tau | instance) for ``actions`` (B, P, L).

    Differentiable in the policy parameters; raises ValidationError when a
    recorded choice is infeasible.
    """
    _, slp = _decode(policy, batch, actions[..., 0], forced=actions)
    return slp if per_step else slp.sum(-1)


def decode_step_distribution(policy: Policy, batch: InstanceBatch, state: DecodeState) -> torch.Tensor:
    """Probability of each next node (B, P, n) for a given state."""
    emb = policy.encode(batch)
    cache = policy.decoder.precompute(emb)
    feasible = feasibility_mask(batch, state)
    load = state.load
    logp = policy.decoder(cache, state.first, state.current,
                          None if load is None else load.to(emb.dtype), feasible)
    return logp.exp()


# ---------------------------------------------------------------- inference


@dataclass
class Solution:
    solution: list
    cost: float
    augmented: bool
    wall_time: float
    variant: int = 0
    start: int = 0

    def to_record(self, problem: str) -> dict:
        key = "tour" if problem == "tsp" else "routes"
        return {"cost": self.cost, key: self.solution, "augmented": self.augmented,
                "wall_time": self.wall_time}


def _exact_cost(inst: Instance, sol) -> float:
    if isinstance(inst, CVRPInstance):
        return routes_cost(inst, sol)
    return tour_cost(inst, sol)


def solve_many(policy: Policy, instances: list[Instance], augment: bool = True,
               batch_size: int = 64, tie_tol: float = 1e-9) -> list[Solution]:
    """Greedy multi-start decoding, optionally over the 8 symmetric variants;
    the cheapest feasible solution (costed on the original coordinates) wins."""
    policy.eval()
    n_var = 8 if augment else 1
    out: list[Solution] = []
    per_chunk = max(1, batch_size // n_var)
    for s in range(0, len(instances), per_chunk):
        t0 = time.perf_counter()
        chunk = instances[s:s + per_chunk]
        variants = []
        for inst in chunk:
            variants.extend(augment_x8(inst) if augment else [inst])
        batch = policy.prepare(variants)
        with torch.no_grad():
            traj = rollout_multistart(policy, batch, mode="greedy")
        elapsed = (time.perf_counter() - t0) / len(chunk)
        costs = traj.cost.view(len(chunk), n_var * traj.cost.shape[1])
        P = traj.cost.shape[1]
        for i, inst in enumerate(chunk):
            # variants are isometric, so costs compare directly; near-ties are
            # settled by the exact cost on the original coordinates
            near = (costs[i] <= costs[i].min() + tie_tol).nonzero().squeeze(1).tolist()
            best = None
            for flat in near:
                v, p = divmod(flat, P)
                sol = traj.solution(i * n_var + v, p)
                c = _exact_cost(inst, sol)
                if best is None or c < best[0]:
                    best = (c, sol, v, p)
            c, sol, v, p = best
            out.append(Solution(sol, c, augment, elapsed, v, int(traj.starts[i * n_var + v, p])))
    return out


def solve(policy: Policy, inst: Instance, augment: bool = True) -> Solution:
    return solve_many(policy, [inst], augment)[0]
