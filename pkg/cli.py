#!/usr/bin/env python3
"""
Command-line entry point: gen-demos, train, eval, ablate, grad-check.

    python cli.py gen-demos --config configs/desk.json --out runs/desk
    python cli.py train     --config configs/desk.json --out runs/desk
    python cli.py eval      --config configs/desk.json --out runs/desk
    python cli.py ablate    --config configs/desk.json --out runs/desk
    python cli.py grad-check

Exit codes: 0 ok, 2 config error, 3 numeric failure, 4 missing inputs.
"""

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

import config
import diffcore as dc
import evidence_logger
import leaderboard
from costs import CostKind, init_params, temporal_scalar
from env import (GOAL_CENTER, SpeedClass, Task, TaskKind, expert_demo, rollout_positions, sample_tasks)
from errors import EXIT_CODES, ConfigError, MissingInputError, TivcError, TrainingError
from evaluation import (EvalReport, ablation_grid, epochs_to_within, run_expert_oracle,
                        run_meta_test, train_task_report)
from trainer import IRLTrainer, irl_loss_var

logger = logging.getLogger(__name__)

FAST_DURATION = 3.0
SLOW_DURATION = 5.0
DURATION_JITTER = 0.2
CONTEXT_GOAL_RADIUS = 1.0
FIRST_ORDER_TOLERANCE = 1e-5
BILEVEL_TOLERANCE = 1e-4


def _banner(title: str):
    print("\n" + "=" * 60)
    print(title)
    print("=" * 60)


# ============================================================================
# DEMOS
# ============================================================================


def context_demos(env_kind: TaskKind, context: str, n: int, seed: int) -> list:
    """Expert demonstrations for one meta-train context.

    a: 3 s, goals within 1 cm. b: fixed goal, half fast (2.8-3.2 s) and half
    slow (4.8-5.2 s). c: both variations.
    """
    if context not in config.CONTEXTS:
        raise ConfigError(f"Unknown context {context!r}")
    if context == "b":
        goals = [GOAL_CENTER] * n
    else:
        goals = [t.goal for t in sample_tasks(GOAL_CENTER, CONTEXT_GOAL_RADIUS, n, [FAST_DURATION],
                                              seed, kind=env_kind)]
    n_fast = n - n // 2
    demos = []
    for i, goal in enumerate(goals):
        demo_seed = seed * 1000 + i
        if context == "a":
            task = Task(goal=goal, duration=FAST_DURATION, kind=env_kind)
            demos.append(expert_demo(task, 0.0, demo_seed, speed_class=SpeedClass.ALIGNED))
            continue
        fast = i < n_fast
        task = Task(goal=goal, duration=FAST_DURATION if fast else SLOW_DURATION, kind=env_kind)
        demos.append(expert_demo(task, DURATION_JITTER, demo_seed,
                                 speed_class=SpeedClass.FAST if fast else SpeedClass.SLOW))
    return demos


def ablation_demos(env_kind: TaskKind, n: int, seed: int) -> list:
    """Fixed-speed (3 s) demos towards n goals within 1 cm."""
    tasks = sample_tasks(GOAL_CENTER, CONTEXT_GOAL_RADIUS, n, [FAST_DURATION], seed, kind=env_kind)
    return [expert_demo(t, 0.0, seed * 1000 + i) for i, t in enumerate(tasks)]


def demo_path(cfg: config.ExperimentConfig) -> Path:
    return cfg.out_dir / "demos" / f"{cfg.stem}.jsonl"


def checkpoint_path(cfg: config.ExperimentConfig, kind: CostKind, seed: int,
                    root: Optional[Path] = None) -> Path:
    return (root or cfg.out_dir / "checkpoints") / f"{cfg.stem}_{kind.value}_seed{seed}.json"


def history_path(cfg: config.ExperimentConfig, kind: CostKind, seed: int) -> Path:
    return cfg.out_dir / "histories" / f"{cfg.stem}_{kind.value}_seed{seed}.csv"


# ============================================================================
# COMMANDS
# ============================================================================


def cmd_gen_demos(cfg: config.ExperimentConfig) -> List[Path]:
    manifest = evidence_logger.RunManifest("gen-demos", cfg.to_dict())
    demos = context_demos(cfg.env_kind, cfg.context, cfg.demos, cfg.demo_seed)
    path = evidence_logger.write_demos(demo_path(cfg), demos)
    manifest.add_artifact(path, cfg.out_dir)
    manifest.write(cfg.out_dir)

    _banner("📦 DEMONSTRATIONS")
    counts = {}
    for d in demos:
        counts[d.speed_class.value] = counts.get(d.speed_class.value, 0) + 1
    print(f"  {cfg.env_kind.value} context {cfg.context}: {len(demos)} demos {counts}")
    print(f"  → {path}")
    return [path]


def _train_one(cfg: config.ExperimentConfig, demos, kind: CostKind, seed: int):
    hist = evidence_logger.start_history(history_path(cfg, kind, seed))
    trainer = IRLTrainer(cfg.train_config(kind, seed), demos,
                         history_sink=lambda rows: evidence_logger.append_history(hist, rows))
    params, history = trainer.run()
    ckpt = evidence_logger.write_checkpoint(checkpoint_path(cfg, kind, seed), params, seed, cfg.epochs)
    return kind, seed, ckpt, hist, history


def cmd_train(cfg: config.ExperimentConfig) -> List[Path]:
    source = demo_path(cfg)
    demos = evidence_logger.read_demos(source)
    manifest = evidence_logger.RunManifest("train", cfg.to_dict())
    manifest.add_input(source, cfg.out_dir)

    jobs = [(k, s) for k in cfg.cost_kinds for s in cfg.seeds]
    finished = []
    with ThreadPoolExecutor(max_workers=cfg.threads) as executor:
        futures = [executor.submit(_train_one, cfg, demos, k, s) for k, s in jobs]
        for future in as_completed(futures):
            finished.append(future.result())
    finished.sort(key=lambda item: (cfg.cost_kinds.index(item[0]), item[1]))

    curve_rows = []
    for kind, seed, ckpt, hist, history in finished:
        losses, speed_errors = history.epoch_losses(), history.epoch_speed_errors()
        for epoch, (loss, err) in enumerate(zip(losses, speed_errors)):
            curve_rows.append({"env": cfg.env_kind.short, "context": cfg.context, "kind": kind.value,
                               "seed": seed, "epoch": epoch + 1, "irl_loss": loss, "speed_error": err})
    fig3 = evidence_logger.write_csv(cfg.out_dir / "train" / "fig3.csv", curve_rows,
                                     ["env", "context", "kind", "seed", "epoch", "irl_loss", "speed_error"])

    artifacts = [p for _, _, ckpt, hist, _ in finished for p in (ckpt, hist)] + [fig3]
    for p in artifacts:
        manifest.add_artifact(p, cfg.out_dir)
    manifest.write(cfg.out_dir)

    _banner("🧠 TRAINING SUMMARY")
    for kind, seed, ckpt, _, history in finished:
        losses = history.epoch_losses()
        final = f"{losses[-1]:.4f}" if losses else "n/a"
        print(f"  ✅ {kind.label:6s} seed {seed}: final IRL loss {final}  → {ckpt.name}")
    return artifacts


def _load_checkpoints(cfg: config.ExperimentConfig, kind: CostKind, root: Path) -> list:
    missing = [str(checkpoint_path(cfg, kind, s, root)) for s in cfg.seeds
               if not checkpoint_path(cfg, kind, s, root).exists()]
    if missing:
        raise MissingInputError(
            f"Missing checkpoints for {kind.value}: {', '.join(missing)}", missing=missing)
    loaded = []
    for s in cfg.seeds:
        seed, params = evidence_logger.read_checkpoint(checkpoint_path(cfg, kind, s, root))
        if params.kind is not kind:
            raise ConfigError(f"Checkpoint {checkpoint_path(cfg, kind, s, root)} holds a {params.kind.value} cost")
        loaded.append((seed, params))
    return loaded


def cmd_eval(cfg: config.ExperimentConfig, checkpoint_dir: Optional[Path] = None,
             expert_oracle: bool = False) -> List[Path]:
    root = Path(checkpoint_dir) if checkpoint_dir else cfg.out_dir / "checkpoints"
    manifest = evidence_logger.RunManifest("eval", {**cfg.to_dict(), "expert_oracle": expert_oracle})
    test, train_time = EvalReport(), EvalReport()
    grid = dict(bins=cfg.bins, goals_per_bin=cfg.goals_per_bin, speeds=cfg.speeds, task_seed=cfg.task_seed,
                threads=cfg.threads)

    if expert_oracle:
        test.extend(run_expert_oracle(cfg.env_kind, seeds=cfg.seeds, **grid))
    else:
        demos = evidence_logger.read_demos(demo_path(cfg))
        manifest.add_input(demo_path(cfg), cfg.out_dir)
        for kind in cfg.cost_kinds:
            checkpoints = _load_checkpoints(cfg, kind, root)
            for s in cfg.seeds:
                manifest.add_input(checkpoint_path(cfg, kind, s, root), cfg.out_dir)
            test.extend(run_meta_test(checkpoints, cfg.env_kind, inner_steps=cfg.test_updates,
                                      alpha=cfg.inner_rate, **grid))
            train_time.extend(train_task_report(checkpoints, demos, cfg.env_kind, inner_steps=cfg.test_updates,
                                                alpha=cfg.inner_rate, threads=cfg.threads))

    out = cfg.out_dir / "eval"
    units = {"final_distance": "cm", "insertion": "%", "speed_mse": leaderboard.SPEED_MSE_UNITS}
    paths = [
        evidence_logger.write_results(out / "results.csv", test.results + train_time.results),
        evidence_logger.write_json(out / "table1.json", {"units": units, "table": test.headline()}),
        evidence_logger.write_json(out / "table2.json", {"units": units, "table": test.bin_table()}),
        evidence_logger.write_csv(out / "fig4.csv", test.speed_rows(),
                                  ["env", "bin", "kind", "speed_mse_mean", "speed_mse_std"]),
        evidence_logger.write_csv(out / "fig6.csv", test.duration_rows(),
                                  ["env", "bin", "duration", "kind", "speed_mse_mean", "speed_mse_std"]),
    ]
    if train_time.results:
        paths += [
            evidence_logger.write_json(out / "table3.json",
                                       {"units": units, "table": leaderboard.headline_table(train_time.results)}),
            evidence_logger.write_csv(out / "fig2.csv", leaderboard.speed_by_seed(train_time.results),
                                      ["env", "kind", "seed", "speed_mse"]),
        ]
    for p in paths:
        manifest.add_artifact(p, cfg.out_dir)
    manifest.write(cfg.out_dir)

    rankings = leaderboard.compute_rankings(test.results)
    leaderboard.print_rankings(rankings)
    return paths


def cmd_ablate(cfg: config.ExperimentConfig) -> List[Path]:
    manifest = evidence_logger.RunManifest("ablate", cfg.to_dict())
    demos = ablation_demos(cfg.env_kind, max(cfg.ablation_demos), cfg.demo_seed)
    demos_file = evidence_logger.write_demos(cfg.out_dir / "ablation" / "demos.jsonl", demos)
    base = cfg.train_config(CostKind(cfg.ablation_costs[0]), cfg.seeds[0])
    curves = ablation_grid(demos, replace(base, epochs=cfg.ablation_epochs),
                           inner_steps_set=cfg.ablation_inner_steps, demo_counts=cfg.ablation_demos,
                           kinds=[CostKind(k) for k in cfg.ablation_costs], seeds=cfg.seeds,
                           threads=cfg.threads)
    rows = [row for c in curves for row in c.rows()]
    fig5 = evidence_logger.write_csv(cfg.out_dir / "ablation" / "fig5.csv", rows,
                                     ["epoch", "loss", "inner_steps", "demos", "kind", "seed"])
    summary = evidence_logger.write_json(cfg.out_dir / "ablation" / "summary.json", [
        {"kind": c.kind, "inner_steps": c.inner_steps, "demos": c.demos, "seed": c.seed,
         "final_loss": c.final_loss if c.losses else None,
         "epochs_to_within_10pct": epochs_to_within(c.losses) if c.losses else None}
        for c in curves
    ])
    for p in (demos_file, fig5, summary):
        manifest.add_artifact(p, cfg.out_dir)
    manifest.write(cfg.out_dir)

    _banner("🔬 ABLATION")
    print(f"  {len(curves)} curves → {fig5}")
    return [demos_file, fig5, summary]


# ============================================================================
# GRADIENT CHECKS
# ============================================================================


@dataclass(frozen=True)
class GradientCase:
    kind: str
    mode: str
    instance: int
    report: dc.GradientReport
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.report.passed(self.tolerance)


def _grad_instance(kind: CostKind, rng: np.random.Generator, horizon: int):
    """Small random (φ, start, goal, λ); base timeline matches the horizon.

    Every φ entry has magnitude 0.5-1 and start and goal sit 1-2 cm apart on
    each axis, so no gradient entry lands near the finite-difference noise floor.
    """
    dt = 0.2
    params = init_params(kind, int(rng.integers(1 << 30)), num_centers=3, base_duration=horizon * dt)
    signs = rng.choice([-1.0, 1.0], size=params.size)
    params = params.with_flat(signs * rng.uniform(0.5, 1.0, size=params.size))
    start = rng.uniform(-1.0, -0.5, size=3)
    goal = start + rng.choice([-1.0, 1.0], size=3) * rng.uniform(1.0, 2.0, size=3)
    lam = temporal_scalar(horizon, int(rng.integers(max(horizon - 2, 1), horizon + 3)))
    return params, start, goal, lam, dt


def run_gradient_suite(first_order: int = 20, bilevel: int = 10, seed: int = 0,
                       kinds: Sequence[CostKind] = tuple(CostKind), inner_steps: int = 2,
                       alpha: float = 0.2) -> List[GradientCase]:
    """Tape gradients against central differences for every cost kind.

    First order: ∇_u of the planning objective at random (φ, u), T ≤ 10. Bi-level: ∇_φ of the IRL loss
    after `inner_steps` unrolled action updates, T = 5.
    """
    rng = np.random.default_rng(seed)
    cases = []
    for kind in kinds:
        for i in range(first_order):
            horizon = int(rng.integers(3, 11))
            params, start, goal, lam, dt = _grad_instance(kind, rng, horizon)
            def fn(u, p=params, s=start, g=goal, l=lam):
                return p.objective(dc.const(p.flat), rollout_positions(s, u, dt), g, l, dt)

            report = dc.check_gradient(fn, rng.uniform(-1.0, 1.0, size=(horizon, 3)))
            cases.append(GradientCase(kind.value, "first-order", i, report, FIRST_ORDER_TOLERANCE))
        for i in range(bilevel):
            horizon = 5
            params, start, goal, lam, dt = _grad_instance(kind, rng, horizon)
            demo_positions = rng.uniform(-1.0, 1.0, size=(horizon + 1, 3))

            def cost(phi_var, u, p=params, s=start, g=goal, l=lam):
                return p.objective(phi_var, rollout_positions(s, u, dt), g, l, dt)

            inner = dc.InnerLoop(cost=cost, u0=np.zeros((horizon, 3)), alpha=alpha, steps=inner_steps)

            def outer(phi_var, inner=inner, s=start, demo=demo_positions):
                return irl_loss_var(rollout_positions(s, inner.run(phi_var), dt), demo)

            report = dc.check_gradient(outer, params.flat)
            cases.append(GradientCase(kind.value, "bi-level", i, report, BILEVEL_TOLERANCE))
    return cases


def cmd_grad_check(first_order: int = 20, bilevel: int = 10) -> int:
    cases = run_gradient_suite(first_order, bilevel)
    _banner("📐 GRADIENT REPORT")
    print(f"  {'kind':6s} {'mode':12s} {'cases':>5s} {'max rel err':>12s}  status")
    failed = 0
    for kind in CostKind:
        for mode in ("first-order", "bi-level"):
            group = [c for c in cases if c.kind == kind.value and c.mode == mode]
            if not group:
                continue
            worst = max(c.report.max_rel_error for c in group)
            bad = sum(not c.passed for c in group)
            failed += bad
            status = "✅" if bad == 0 else f"❌ {bad} failed"
            print(f"  {kind.value:6s} {mode:12s} {len(group):5d} {worst:12.3e}  {status}")
    return EXIT_CODES["ok"] if failed == 0 else EXIT_CODES["numeric"]


# ============================================================================
# ENTRY POINT
# ============================================================================


def _seeds(text: str) -> List[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed list must be comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Time-invariant cost learning from misaligned demonstrations")
    sub = parser.add_subparsers(dest="command", required=True)

    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", type=str, help="Experiment JSON file")
    shared.add_argument("--out", type=str, help="Output directory (default: $TIVC_OUT_DIR or runs)")
    shared.add_argument("--seeds", type=_seeds, help="Comma-separated seeds, e.g. 0,1,2")
    shared.add_argument("--cost", choices=[k.value for k in CostKind], action="append",
                        help="Cost kind to use (repeatable)")
    shared.add_argument("--context", choices=list(config.CONTEXTS))
    shared.add_argument("--env", choices=["placement", "peg"])
    shared.add_argument("--inner-steps", type=int)
    shared.add_argument("--test-updates", type=int, choices=[1, 5])
    shared.add_argument("--epochs", type=int)
    shared.add_argument("--demos", type=int)
    shared.add_argument("--lambda-gain", action="store_true", default=None,
                        help="Scale every action objective by λ")
    shared.add_argument("-v", "--verbose", action="store_true")

    sub.add_parser("gen-demos", parents=[shared], help="Write expert demonstrations")
    sub.add_parser("train", parents=[shared], help="Train one cost per kind × seed")
    ev = sub.add_parser("eval", parents=[shared], help="Meta-test learned costs")
    ev.add_argument("--checkpoints", type=str, help="Checkpoint directory (default: <out>/checkpoints)")
    ev.add_argument("--expert-oracle", action="store_true", help="Evaluate the expert instead")
    sub.add_parser("ablate", parents=[shared], help="Inner steps × demo count ablation")
    gc = sub.add_parser("grad-check", help="Verify tape gradients against finite differences")
    gc.add_argument("--first-order", type=int, default=20)
    gc.add_argument("--bilevel", type=int, default=10)
    gc.add_argument("-v", "--verbose", action="store_true")
    return parser


def _experiment(args) -> config.ExperimentConfig:
    cfg = config.ExperimentConfig.load(args.config) if args.config else config.ExperimentConfig()
    return cfg.with_overrides(
        out=args.out, seeds=args.seeds, costs=args.cost, context=args.context, env=args.env,
        inner_steps=args.inner_steps, test_updates=args.test_updates, epochs=args.epochs,
        demos=args.demos, lambda_gain=args.lambda_gain,
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CODES["ok"] if e.code == 0 else EXIT_CODES["config"]
    config.configure_logging("DEBUG" if args.verbose else None)

    try:
        if args.command == "grad-check":
            return cmd_grad_check(args.first_order, args.bilevel)
        cfg = _experiment(args)
        if args.command == "gen-demos":
            cmd_gen_demos(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoints, args.expert_oracle)
        elif args.command == "ablate":
            cmd_ablate(cfg)
    except TrainingError as e:
        logger.error("training failed: %s (partial history kept)", e)
        print(f"❌ {e}")
        return e.exit_code
    except TivcError as e:
        logger.error("%s", e)
        print(f"❌ {e}")
        return e.exit_code
    except OSError as e:
        logger.error("I/O failure: %s", e)
        print(f"❌ {e}")
        return EXIT_CODES["config"]
    return EXIT_CODES["ok"]


if __name__ == "__main__":
    sys.exit(main())
