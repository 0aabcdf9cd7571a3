"""Asymmetric group preference optimisation and the shared training harness.

One outer step collects multi-start rollouts, splits each instance's
trajectories into a top-k (preferred) and bottom-k (non-preferred) group, and
then takes ``inner_iters`` gradient steps on

    softplus(-(beta_w * delta_pref - beta_l * delta_nonpref))

where each delta sums log pi_theta(tau) - log pi_ref(tau) over its group.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .decoder import InstanceBatch, ModelConfig, Policy, TrajectoryBatch, concat_batches, rollout_multistart, \
    score_trajectory
from .oracles import optimal_cost
from .problems import Instance, generate

logger = logging.getLogger(__name__)


@dataclass
class AGPOConfig:
    beta_w: float = 0.5
    beta_l: float = 0.1
    top_k: int = 10
    inner_iters: int = 3
    steps: int = 1000
    batch_size: int = 64
    lr: float = 1e-4
    weight_decay: float = 1e-6
    epoch_size: int = 100_000
    reference_mode: str = "sample"  # how reference rollouts are decoded
    inner_mode: str = "rescore"  # or "resample": fresh rollouts every inner iteration
    ref_refresh: int = 1  # outer steps between reference-policy snapshots
    eval_every: int = 10

    def __post_init__(self):
        if not (self.beta_w > self.beta_l > 0):
            warnings.warn(f"expected beta_w > beta_l > 0, got {self.beta_w}, {self.beta_l}", stacklevel=2)
        if self.reference_mode not in ("sample", "greedy"):
            raise ValueError(f"reference_mode must be sample or greedy, not {self.reference_mode!r}")
        if self.inner_mode not in ("rescore", "resample"):
            raise ValueError(f"inner_mode must be rescore or resample, not {self.inner_mode!r}")

    def group_size(self, n_starts: int) -> int:
        return max(1, min(self.top_k, n_starts // 2))

    @classmethod
    def from_dict(cls, d: dict) -> "AGPOConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------- loss pieces


@dataclass
class PreferenceGroups:
    preferred: torch.Tensor  # (B, k) trajectory indices, best first
    nonpreferred: torch.Tensor  # (B, k), worst last
    ref_preferred: torch.Tensor  # (B, k) reference log-probs
    ref_nonpreferred: torch.Tensor
    rewards: torch.Tensor  # (B, N)

    @property
    def k(self) -> int:
        return self.preferred.shape[1]

    def informative(self) -> torch.Tensor:
        """Instances whose N rewards are not all equal."""
        return self.rewards.max(1).values > self.rewards.min(1).values


def select_groups(rewards, k: int, ref_logp=None) -> PreferenceGroups:
    """Top-k / bottom-k trajectories per instance by reward.

    ``rewards`` is (B, N); ties keep the lower trajectory index first.
    """
    rewards = torch.as_tensor(rewards, dtype=torch.float64)
    if rewards.ndim == 1:
        rewards = rewards[None]
    N = rewards.shape[1]
    if N < 2:
        raise ValueError("grouping needs at least two trajectories per instance")
    k = max(1, min(k, N // 2))
    order = torch.sort(-rewards, dim=1, stable=True).indices
    pref, nonpref = order[:, :k], order[:, N - k:]
    if ref_logp is None:
        ref_logp = torch.zeros_like(rewards)
    ref_logp = torch.as_tensor(ref_logp).detach()
    return PreferenceGroups(pref, nonpref, ref_logp.gather(1, pref), ref_logp.gather(1, nonpref), rewards)


def group_delta_from_logps(current: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
    """Sum over a group of log pi_theta - log pi_ref: (B, k) -> (B,)."""
    return (current - reference).sum(-1)


def group_delta(policy: Policy, batch: InstanceBatch, actions: torch.Tensor,
                ref_logp: torch.Tensor) -> torch.Tensor:
    """Delta for trajectories ``actions`` (B, k, L) under the current policy."""
    return group_delta_from_logps(score_trajectory(policy, batch, actions), ref_logp)


def agpo_loss(delta_pref, delta_nonpref, beta_w: float = 0.5, beta_l: float = 0.1) -> torch.Tensor:
    """Mean of -log sigmoid(beta_w * delta_pref - beta_l * delta_nonpref)."""
    dp = torch.as_tensor(delta_pref, dtype=torch.float64) if not torch.is_tensor(delta_pref) else delta_pref
    dn = torch.as_tensor(delta_nonpref, dtype=torch.float64) if not torch.is_tensor(delta_nonpref) else delta_nonpref
    return F.softplus(-(beta_w * dp - beta_l * dn)).mean()


def reinforce_loss(reward: torch.Tensor, logp: torch.Tensor) -> torch.Tensor:
    """Shared-baseline policy gradient: advantage = reward - mean over starts."""
    adv = reward - reward.mean(dim=1, keepdim=True)
    return -(adv.to(logp.dtype).detach() * logp).mean()


# ---------------------------------------------------------------- data


class InstancePool:
    """Training instances with their frozen visual inputs precomputed."""

    def __init__(self, policy: Policy, instances: list[Instance], chunk: int = 256):
        self.instances = instances
        parts = [policy.prepare(instances[s:s + chunk], ids=np.arange(s, min(s + chunk, len(instances))),
                                use_cache=False)
                 for s in range(0, len(instances), chunk)]
        self.batch = concat_batches(parts)

    def __len__(self):
        return len(self.instances)

    def get(self, idx) -> InstanceBatch:
        return self.batch.select(idx)


class _FreshSource:
    """New random instances every step (full-scale mode)."""

    def __init__(self, policy, problem, n, seed):
        self.policy, self.problem, self.n, self.seed = policy, problem, n, seed
        self.counter = 0

    def next(self, size: int) -> InstanceBatch:
        ids = np.arange(self.counter, self.counter + size)
        self.counter += size
        insts = [generate(self.problem, self.n, int(np.random.SeedSequence([self.seed, int(i)]).generate_state(1)[0]))
                 for i in ids]
        return self.policy.prepare(insts, ids=ids, use_cache=False)


class _PoolSource:
    def __init__(self, pool: InstancePool, seed: int):
        self.pool = pool
        self.rng = np.random.default_rng([seed, 1])
        self.order = np.empty(0, dtype=np.int64)

    def next(self, size: int) -> InstanceBatch:
        while len(self.order) < size:
            self.order = np.concatenate([self.order, self.rng.permutation(len(self.pool))])
        idx, self.order = self.order[:size], self.order[size:]
        return self.pool.get(idx)


@dataclass
class Validation:
    """Fixed held-out set with reference (optimal) costs."""

    batch: InstanceBatch
    reference: np.ndarray

    @classmethod
    def build(cls, policy: Policy, instances: list[Instance], reference=None) -> "Validation":
        if reference is None:
            reference = [optimal_cost(inst) for inst in instances]
        return cls(policy.prepare(instances, use_cache=False), np.asarray(reference, dtype=np.float64))

    def gaps(self, policy: Policy, chunk: int = 128) -> np.ndarray:
        """Per-instance greedy multi-start gap (best of the N starts)."""
        was_training = policy.training
        policy.eval()
        best = []
        with torch.no_grad():
            for s in range(0, self.batch.size, chunk):
                sub = self.batch.select(np.arange(s, min(s + chunk, self.batch.size)))
                best.append(rollout_multistart(policy, sub, "greedy").cost.min(1).values.numpy())
        policy.train(was_training)
        return np.concatenate(best) / self.reference - 1.0

    def mean_gap(self, policy: Policy) -> float:
        return float(self.gaps(policy).mean())


# ---------------------------------------------------------------- checkpoints


def backbone_digest(policy: Policy) -> str | None:
    if not policy.has_vision:
        return None
    h = hashlib.sha256()
    for name, t in sorted(policy.backbone.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def trainable_state(policy: Policy) -> dict:
    """State dict without a frozen backbone (it is rebuilt from config)."""
    state = policy.state_dict()
    if policy.has_vision and policy.backbone.frozen:
        state = {k: v for k, v in state.items() if not k.startswith("backbone.")}
    return state


def save_checkpoint(path, policy: Policy, agpo: AGPOConfig | None = None, optimizer=None,
                    step: int = 0, extra: dict | None = None) -> None:
    torch.save({
        "model_config": policy.config.to_dict(),
        "agpo_config": None if agpo is None else asdict(agpo),
        "state_dict": trainable_state(policy),
        "backbone_digest": backbone_digest(policy),
        "optimizer": None if optimizer is None else optimizer.state_dict(),
        "step": step,
        "extra": extra or {},
    }, Path(path))


def load_checkpoint(path) -> tuple[Policy, dict]:
    ckpt = torch.load(Path(path), map_location="cpu", weights_only=False)
    policy = Policy(ModelConfig(**ckpt["model_config"]))
    missing, unexpected = policy.load_state_dict(ckpt["state_dict"], strict=False)
    if unexpected or any(not k.startswith("backbone.") for k in missing):
        raise ValueError(f"checkpoint does not match the model: missing={missing} unexpected={unexpected}")
    digest = backbone_digest(policy)
    if ckpt.get("backbone_digest") is not None and digest != ckpt["backbone_digest"]:
        raise ValueError("backbone weights differ from the ones used in training")
    policy.eval()
    return policy, ckpt


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    policy: Policy
    metrics: list[dict] = field(default_factory=list)
    grad_steps: int = 0


def _step_seed(seed: int, step: int, inner: int = 0) -> int:
    return int(np.random.SeedSequence([seed, step, inner]).generate_state(1)[0])


class Trainer:
    """Harness shared by the preference optimiser and the policy-gradient baseline."""

    def __init__(self, problem: str, n: int, config: AGPOConfig | None = None,
                 model: ModelConfig | None = None, seed: int = 0, method: str = "agpo",
                 train_instances: list[Instance] | None = None, pool: InstancePool | None = None,
                 validation: Validation | None = None, policy: Policy | None = None,
                 metrics_path=None, checkpoint_path=None):
        if method not in ("agpo", "reinforce"):
            raise ValueError(f"unknown method {method!r}")
        self.problem, self.n, self.seed, self.method = problem, n, seed, method
        self.config = config or AGPOConfig()
        if policy is None:
            torch.manual_seed(seed)
            policy = Policy(model or ModelConfig(problem=problem))
        self.policy = policy
        self.optimizer = torch.optim.Adam(policy.parameters(), lr=self.config.lr,
                                          weight_decay=self.config.weight_decay)
        if pool is None and train_instances is not None:
            pool = InstancePool(policy, train_instances)
        self.source = _PoolSource(pool, seed) if pool is not None else _FreshSource(policy, problem, n, seed)
        self.validation = validation
        self.metrics_path = None if metrics_path is None else Path(metrics_path)
        self.checkpoint_path = None if checkpoint_path is None else Path(checkpoint_path)
        self.step = 0
        self.grad_steps = 0
        self.metrics: list[dict] = []
        self._reference = None
        if self.metrics_path is not None:
            self.metrics_path.write_text("")

    # -- updates

    def _apply(self, loss: torch.Tensor) -> None:
        if not torch.isfinite(loss):
            self._diverged(loss)
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        self.grad_steps += 1

    def _diverged(self, loss):
        loss = loss.detach()
        if self.checkpoint_path is not None:
            diag = self.checkpoint_path.with_suffix(".diverged.pt")
            save_checkpoint(diag, self.policy, self.config, self.optimizer, self.step,
                            extra={"loss": float(loss)})
            raise TrainingDiverged(f"loss became {float(loss)} at step {self.step}; state saved to {diag}")
        raise TrainingDiverged(f"loss became {float(loss)} at step {self.step}")

    def _reference_policy(self) -> Policy | None:
        cfg = self.config
        if cfg.ref_refresh <= 1 and cfg.inner_mode == "rescore":
            return None  # the rollout log-probs already are the reference
        if self._reference is None or self.step % cfg.ref_refresh == 0:
            self._reference = copy.deepcopy(self.policy)
            self._reference.eval()
        return self._reference

    def _groups(self, batch, seed, reference):
        cfg = self.config
        with torch.no_grad():
            traj = rollout_multistart(self.policy, batch, cfg.reference_mode, seed=seed)
            ref_logp = traj.logp if reference is None else score_trajectory(reference, batch, traj.actions)
        groups = select_groups(traj.reward, cfg.group_size(traj.actions.shape[1]), ref_logp)
        return traj, groups

    def agpo_step(self, batch: InstanceBatch) -> tuple[float, float]:
        cfg = self.config
        reference = self._reference_policy()
        traj, groups = self._groups(batch, _step_seed(self.seed, self.step), reference)
        mean_reward = float(traj.reward.mean())
        losses = []
        for it in range(cfg.inner_iters):
            if it > 0 and cfg.inner_mode == "resample":
                traj, groups = self._groups(batch, _step_seed(self.seed, self.step, it), reference)
            keep = groups.informative()
            if not bool(keep.any()):
                continue
            idx = keep.nonzero().squeeze(1)
            sub = batch.select(idx)
            k = groups.k
            picked = torch.cat([groups.preferred[idx], groups.nonpreferred[idx]], dim=1)
            acts = traj.actions[idx].gather(1, picked[..., None].expand(-1, -1, traj.actions.shape[-1]))
            cur = score_trajectory(self.policy, sub, acts)
            d_pref = group_delta_from_logps(cur[:, :k], groups.ref_preferred[idx].to(cur.dtype))
            d_non = group_delta_from_logps(cur[:, k:], groups.ref_nonpreferred[idx].to(cur.dtype))
            loss = agpo_loss(d_pref, d_non, cfg.beta_w, cfg.beta_l)
            self._apply(loss)
            losses.append(loss.item())
        return (float(np.mean(losses)) if losses else 0.0), mean_reward

    def reinforce_step(self, batch: InstanceBatch) -> tuple[float, float]:
        traj = rollout_multistart(self.policy, batch, "sample", seed=_step_seed(self.seed, self.step), grad=True)
        loss = reinforce_loss(traj.reward, traj.logp)
        self._apply(loss)
        return loss.item(), float(traj.reward.mean())

    # -- loop

    def run(self, steps: int | None = None, callback=None) -> TrainResult:
        steps = self.config.steps if steps is None else steps
        self.policy.train()
        for _ in range(steps):
            t0 = time.perf_counter()
            batch = self.source.next(self.config.batch_size)
            if self.method == "agpo":
                loss, mean_reward = self.agpo_step(batch)
            else:
                loss, mean_reward = self.reinforce_step(batch)
            self.step += 1
            record = {"step": self.step, "grad_steps": self.grad_steps, "loss": loss,
                      "mean_reward": mean_reward, "val_gap": None,
                      "wall_time": time.perf_counter() - t0}
            if self.validation is not None and (self.step % self.config.eval_every == 0 or self.step == steps):
                record["val_gap"] = self.validation.mean_gap(self.policy)
            self._log(record)
            if callback is not None and callback(self, record):
                break
        if self.checkpoint_path is not None:
            self.save(self.checkpoint_path)
        return TrainResult(self.policy, self.metrics, self.grad_steps)

    def _log(self, record):
        self.metrics.append(record)
        logger.info("step %d loss %.5f reward %.4f gap %s", record["step"], record["loss"],
                    record["mean_reward"], record["val_gap"])
        if self.metrics_path is not None:
            with self.metrics_path.open("a") as fh:
                fh.write(json.dumps(record) + "\n")

    def save(self, path):
        save_checkpoint(path, self.policy, self.config, self.optimizer, self.step,
                        extra={"method": self.method, "problem": self.problem, "n": self.n,
                               "seed": self.seed, "grad_steps": self.grad_steps})


def train(config: AGPOConfig, problem: str, n: int, seed: int = 0, **kw) -> TrainResult:
    """AGPO training loop; see :class:`Trainer` for keyword arguments."""
    return Trainer(problem, n, config, seed=seed, method="agpo", **kw).run()


def train_baseline_reinforce(config: AGPOConfig, problem: str, n: int, seed: int = 0, **kw) -> TrainResult:
    """Same harness with the shared-baseline REINFORCE loss."""
    return Trainer(problem, n, config, seed=seed, method="reinforce", **kw).run()


def read_metrics(path) -> list[dict]:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]
