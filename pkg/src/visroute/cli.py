"""Command line entry point: ``visroute <command> [options]``.

Settings resolve as: command-line flags > ``VISROUTE_*`` environment
variables > ``--config`` JSON file > built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from . import oracles
from .agpo import AGPOConfig, Trainer, Validation, load_checkpoint, read_metrics
from .decoder import ModelConfig, solve_many
from .problems import CVRPInstance, generate, read_instances, tour_cost, write_instances
from .raster import NUM_PIXELS, at_most_one_collision_prob, pixel_collision_prob, rasterize, save_raster

ENV_PREFIX = "VISROUTE_"

log = logging.getLogger("visroute")


@dataclass
class RunConfig:
    problem: str = "tsp"
    n: int = 20
    preset: str = "default"  # default | small | tiny
    # model overrides; None keeps the preset value
    dim: int | None = None
    layers: int | None = None
    heads: int | None = None
    backbone: str = "resnet18"
    frozen: bool = True
    weights_path: str | None = None
    backbone_seed: int = 0
    # optimisation
    optimizer: str = "agpo"  # agpo | reinforce
    beta_w: float = 0.5
    beta_l: float = 0.1
    top_k: int = 10
    inner_iters: int = 3
    steps: int = 1000
    batch_size: int = 64
    lr: float = 1e-4
    weight_decay: float = 1e-6
    epoch_size: int = 100_000
    reference_mode: str = "sample"
    inner_mode: str = "rescore"
    ref_refresh: int = 1
    eval_every: int = 10
    train_size: int = 0  # 0 = fresh instances every step
    val_size: int = 64
    val_n: int | None = None  # validation instance size (defaults to min(n, 16))
    seed: int = 0
    jobs: int = 1
    device: str = "cpu"
    out: str = "runs/latest"

    def model_config(self) -> ModelConfig:
        factory = {"default": ModelConfig, "small": ModelConfig.small, "tiny": ModelConfig.tiny}[self.preset]
        kw = dict(backbone=self.backbone, frozen=self.frozen, weights_path=self.weights_path,
                  backbone_seed=self.backbone_seed)
        for name in ("dim", "layers", "heads"):
            if getattr(self, name) is not None:
                kw[name] = getattr(self, name)
        if factory is ModelConfig:
            return ModelConfig(problem=self.problem, **kw)
        return factory(self.problem, **kw)

    def agpo_config(self) -> AGPOConfig:
        return AGPOConfig.from_dict(asdict(self))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def _coerce(field_type, raw: str):
    t = str(field_type)
    if raw.lower() in ("none", "null") and "None" in t:
        return None
    if t.startswith("bool"):
        return raw.lower() in ("1", "true", "yes", "on")
    if t.startswith("int"):
        return int(raw)
    if t.startswith("float"):
        return float(raw)
    return raw


def resolve_config(args: argparse.Namespace, environ=os.environ) -> RunConfig:
    values = asdict(RunConfig())
    if getattr(args, "config", None):
        values.update(json.loads(Path(args.config).read_text()))
    for f in fields(RunConfig):
        raw = environ.get(ENV_PREFIX + f.name.upper())
        if raw is not None:
            values[f.name] = _coerce(f.type, raw)
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    return RunConfig.from_dict(values)


# ---------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    cfg = resolve_config(args)
    rng_seeds = np.random.SeedSequence(cfg.seed).generate_state(args.count) if args.count else []
    insts = [generate(cfg.problem, cfg.n, int(s), capacity=args.capacity) for s in rng_seeds]
    write_instances(args.out, insts,
                    header=f"visroute instances problem={cfg.problem} n={cfg.n} count={args.count} seed={cfg.seed}")
    print(f"wrote {len(insts)} instances to {args.out}")
    return 0


def _oracle_reference(inst):
    """Exact optimum when an oracle applies, else 2-opt on nearest neighbour (TSP) or None."""
    if isinstance(inst, CVRPInstance):
        if len(inst.customers) <= oracles.BRUTE_FORCE_MAX_CUSTOMERS:
            return oracles.brute_force_cvrp(inst)[1]
        return None
    if inst.n <= oracles.HELD_KARP_MAX_N:
        return oracles.held_karp_tsp(inst)[1]
    return tour_cost(inst, oracles.two_opt(inst, oracles.nearest_neighbor(inst)))


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    if cfg.device != "cpu":
        raise ValueError(f"device {cfg.device!r} is not supported by this build")
    torch.set_num_threads(max(1, cfg.jobs))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())

    torch.manual_seed(cfg.seed)
    from .decoder import Policy
    policy = Policy(cfg.model_config())
    train_insts = None
    if cfg.train_size:
        seeds = np.random.SeedSequence([cfg.seed, 7]).generate_state(cfg.train_size)
        train_insts = [generate(cfg.problem, cfg.n, int(s)) for s in seeds]
    validation = None
    if cfg.val_size:
        val_n = cfg.val_n or min(cfg.n, 16 if cfg.problem == "tsp" else 8)
        seeds = np.random.SeedSequence([cfg.seed, 11]).generate_state(cfg.val_size)
        val = [generate(cfg.problem, val_n, int(s)) for s in seeds]
        validation = Validation.build(policy, val, [_oracle_reference(i) for i in val])
    trainer = Trainer(cfg.problem, cfg.n, cfg.agpo_config(), seed=cfg.seed, method=cfg.optimizer,
                      train_instances=train_insts, validation=validation, policy=policy,
                      metrics_path=out / "metrics.jsonl", checkpoint_path=out / "checkpoint.pt")
    result = trainer.run()
    last = result.metrics[-1] if result.metrics else {}
    print(f"trained {len(result.metrics)} steps ({result.grad_steps} gradient steps); "
          f"final val_gap={last.get('val_gap')}; checkpoint {out / 'checkpoint.pt'}")
    return 0


def _solver(checkpoint: str):
    """Return a function instances -> list of (solution, cost)."""
    if checkpoint == "oracle":
        def run(instances, augment):
            out = []
            for inst in instances:
                t0 = time.perf_counter()
                if isinstance(inst, CVRPInstance):
                    sol, cost = oracles.brute_force_cvrp(inst)
                else:
                    sol, cost = oracles.held_karp_tsp(inst)
                out.append({"solution": sol, "cost": cost, "wall_time": time.perf_counter() - t0})
            return out
        return run

    policy, _ = load_checkpoint(checkpoint)

    def run(instances, augment):
        # group by size so each batch stacks cleanly
        results = [None] * len(instances)
        by_size: dict[int, list[int]] = {}
        for i, inst in enumerate(instances):
            by_size.setdefault(inst.n, []).append(i)
        for idx in by_size.values():
            sols = solve_many(policy, [instances[i] for i in idx], augment=augment)
            for i, s in zip(idx, sols):
                results[i] = {"solution": s.solution, "cost": s.cost, "wall_time": s.wall_time}
        return results
    return run


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    torch.set_num_threads(max(1, cfg.jobs))
    instances = read_instances(args.instances)
    if args.limit:
        instances = instances[:args.limit]
    if not instances:
        raise ValueError(f"no instances in {args.instances}")
    t0 = time.perf_counter()
    results = _solver(args.checkpoint)(instances, args.augment)
    wall = time.perf_counter() - t0
    reports = []
    for i, (inst, res) in enumerate(zip(instances, results)):
        ref = _oracle_reference(inst)
        reports.append(oracles.gap(res["cost"], ref if ref is not None else float("nan"), instance_id=str(i)))
    out = Path(args.out) if args.out else None
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        oracles.write_gap_csv(out, reports)
    summary = {
        "instances": len(reports),
        "mean_cost": float(np.mean([r.method_cost for r in reports])),
        "mean_gap": float(np.mean([r.gap for r in reports])),
        "wall_time": wall,
        "augmented": bool(args.augment),
    }
    print(json.dumps(summary))
    return 0


def cmd_solve(args) -> int:
    cfg = resolve_config(args)
    torch.set_num_threads(max(1, cfg.jobs))
    instances = read_instances(args.instances)
    if not 0 <= args.index < len(instances):
        raise ValueError(f"instance index {args.index} out of range (file has {len(instances)})")
    inst = instances[args.index]
    res = _solver(args.checkpoint)([inst], args.augment)[0]
    key = "routes" if isinstance(inst, CVRPInstance) else "tour"
    text = json.dumps({"cost": res["cost"], key: res["solution"], "augmented": bool(args.augment),
                       "wall_time": res["wall_time"]})
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_rasterize(args) -> int:
    instances = read_instances(args.instances)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, inst in enumerate(instances):
        img = rasterize(inst)
        save_raster(img, out / f"{i:05d}.tiff")
        stats = {
            "index": i,
            "n": inst.n,
            "nonzero_pixels": int(np.count_nonzero(img.pixels[:, :, 0])),
            "pixel_collision_prob": pixel_collision_prob(inst.n, NUM_PIXELS),
            "at_most_one_collision_prob": at_most_one_collision_prob(inst.n, NUM_PIXELS),
        }
        print(json.dumps(stats))
    return 0


def plot_metrics(paths, out, key: str = "mean_reward"):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for p in paths:
        rows = read_metrics(p)
        if not rows:
            plt.close(fig)
            raise ValueError(f"metrics file {p} is empty")
        xs = [r["grad_steps"] for r in rows]
        ys = [r[key] if r.get(key) is not None else float("nan") for r in rows]
        ax.plot(xs, ys, label=Path(p).parent.name or Path(p).stem)
    ax.set_xlabel("gradient steps")
    ax.set_ylabel(key.replace("_", " "))
    ax.legend()
    fig.tight_layout()
    fig.savefig(out)
    return fig


def cmd_plot(args) -> int:
    import matplotlib.pyplot as plt

    fig = plot_metrics(args.metrics, args.out, key=args.key)
    plt.close(fig)
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------- parser


def _add_shared(p):
    p.add_argument("--config", help="JSON file with RunConfig keys")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="visroute", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write random instances")
    _add_shared(p)
    p.add_argument("--problem", choices=["tsp", "cvrp"])
    p.add_argument("--n", type=int, help="nodes (TSP) or customers (CVRP)")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--capacity", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a policy")
    _add_shared(p)
    p.add_argument("--problem", choices=["tsp", "cvrp"])
    p.add_argument("--n", type=int)
    p.add_argument("--preset", choices=["default", "small", "tiny"])
    p.add_argument("--dim", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--backbone", help="resnet18, resnet50 or none")
    p.add_argument("--unfreeze", dest="frozen", action="store_const", const=False)
    p.add_argument("--weights-path", dest="weights_path")
    p.add_argument("--optimizer", choices=["agpo", "reinforce"])
    p.add_argument("--beta-w", dest="beta_w", type=float)
    p.add_argument("--beta-l", dest="beta_l", type=float)
    p.add_argument("--top-k", dest="top_k", type=int)
    p.add_argument("--inner-iters", dest="inner_iters", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--reference-mode", dest="reference_mode", choices=["sample", "greedy"])
    p.add_argument("--inner-mode", dest="inner_mode", choices=["rescore", "resample"])
    p.add_argument("--ref-refresh", dest="ref_refresh", type=int)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--train-size", dest="train_size", type=int)
    p.add_argument("--val-size", dest="val_size", type=int)
    p.add_argument("--val-n", dest="val_n", type=int)
    p.add_argument("--device")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="gap report over an instance file")
    _add_shared(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint path or 'oracle'")
    p.add_argument("--instances", required=True)
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--limit", type=int)
    p.add_argument("--out", help="CSV gap report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("solve", help="solve one instance and print it")
    _add_shared(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint path or 'oracle'")
    p.add_argument("--instances", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--out", help="also write the JSON record here")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("rasterize", help="export instance images and collision statistics")
    _add_shared(p)
    p.add_argument("--instances", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rasterize)

    p = sub.add_parser("plot", help="training curves from metrics files")
    _add_shared(p)
    p.add_argument("metrics", nargs="+")
    p.add_argument("--key", default="mean_reward", help="metrics column to plot")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:
        print(f"visroute {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
