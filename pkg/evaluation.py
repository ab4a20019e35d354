"""
Meta-test protocol: policy extraction from a learned cost, per-task metrics,
the goal-bin × speed grid, the expert upper bound and the inner-step / demo
count ablation.
"""

import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

import leaderboard
from costs import CostKind, CostParams, temporal_scalar
from env import (GOAL_CENTER, START_POSITION, Demonstration, State, Task, TaskKind, Trajectory,
                 evaluate_outcome, expert_demo, rollout, sample_tasks)
from errors import ConfigError
from trainer import TrainConfig, optimize_actions, train

logger = logging.getLogger(__name__)

DEFAULT_BINS = (1.0, 3.0, 5.0)
DEFAULT_SPEEDS = (2.0, 3.0, 4.0, 5.0, 6.0)
GOALS_PER_BIN = 10
TEST_TASK_SEED = 1000
EXPERT_LABEL = "expert"

Checkpoint = Tuple[int, CostParams]  # (training seed, learned params)


@dataclass(frozen=True)
class EvalTaskResult:
    env: str
    cost_kind: str
    seed: int
    task_id: int
    bin_cm: float
    duration: float
    goal_x: float
    goal_y: float
    goal_z: float
    achieved_speed: float
    target_speed: float
    final_distance: float
    inserted: bool
    strategy_violation: bool
    split: str = "test"

    def __post_init__(self):
        if self.achieved_speed < 0 or self.target_speed < 0:
            raise ValueError("speeds must be non-negative")
        if self.bin_cm not in DEFAULT_BINS:
            raise ValueError(f"goal bin must be one of {DEFAULT_BINS}, got {self.bin_cm}")

    @property
    def speed_error(self) -> float:
        return self.achieved_speed - self.target_speed

    def to_row(self) -> dict:
        return asdict(self)

    @classmethod
    def from_row(cls, row: dict) -> "EvalTaskResult":
        def flag(v):
            return v if isinstance(v, bool) else str(v) == "True"
        return cls(
            env=row["env"], cost_kind=row["cost_kind"], seed=int(row["seed"]), task_id=int(row["task_id"]),
            bin_cm=float(row["bin_cm"]), duration=float(row["duration"]),
            goal_x=float(row["goal_x"]), goal_y=float(row["goal_y"]), goal_z=float(row["goal_z"]),
            achieved_speed=float(row["achieved_speed"]), target_speed=float(row["target_speed"]),
            final_distance=float(row["final_distance"]), inserted=flag(row["inserted"]),
            strategy_violation=flag(row["strategy_violation"]), split=row.get("split", "test"),
        )


RESULT_FIELDS = list(EvalTaskResult.__dataclass_fields__)


@dataclass
class EvalReport:
    results: List[EvalTaskResult] = field(default_factory=list)

    def extend(self, other: "EvalReport"):
        self.results.extend(other.results)

    def headline(self) -> dict:
        return leaderboard.headline_table(self.results)

    def bin_table(self) -> dict:
        return leaderboard.bin_table(self.results)

    def speed_rows(self) -> List[dict]:
        return leaderboard.speed_by_bin(self.results)

    def duration_rows(self) -> List[dict]:
        return leaderboard.speed_by_duration(self.results)

    def to_dict(self) -> dict:
        return {"headline": self.headline(), "bins": self.bin_table()}


# ============================================================================
# METRICS
# ============================================================================


def achieved_speed(traj: Trajectory) -> float:
    """Path length over duration, cm/s."""
    return traj.average_speed


def speed_mse(results: Sequence[EvalTaskResult]) -> float:
    if not results:
        raise ValueError("speed MSE of an empty result set")
    return float(np.mean([r.speed_error ** 2 for r in results]))


def extract_policy(phi: CostParams, task: Task, inner_steps: int = 5, alpha: float = 0.01,
                   start=START_POSITION, base_steps: Optional[int] = None) -> Trajectory:
    """Optimise zero-initialised actions for the task's horizon, then roll out."""
    if inner_steps < 0:
        raise ConfigError(f"inner_steps must be >= 0, got {inner_steps}")
    if base_steps is None:
        base_steps = int(round(phi.base_duration * task.frequency))
    lam = temporal_scalar(base_steps, task.horizon)
    s0 = State(start)
    u = optimize_actions(phi, task.goal_array, task.horizon, lam, s0, task.dt, inner_steps, alpha)
    return rollout(s0, u, task.dt)


def expert_policy(task: Task, start=START_POSITION) -> Trajectory:
    return expert_demo(task, start=start).trajectory


# ============================================================================
# TASK GRID
# ============================================================================


def meta_test_tasks(env_kind: TaskKind, bins: Sequence[float] = DEFAULT_BINS,
                    goals_per_bin: int = GOALS_PER_BIN, speeds: Sequence[float] = DEFAULT_SPEEDS,
                    task_seed: int = TEST_TASK_SEED) -> List[Tuple[int, float, Task]]:
    """(task_id, bin, task) triples; identical for every seed and cost kind."""
    grid = []
    for b, radius in enumerate(bins):
        for task in sample_tasks(GOAL_CENTER, radius, goals_per_bin, speeds, task_seed + b, kind=env_kind):
            grid.append((len(grid), float(radius), task))
    return grid


def _result(env_kind: TaskKind, label: str, seed: int, task_id: int, bin_cm: float, task: Task,
            traj: Trajectory, split: str, start) -> EvalTaskResult:
    outcome = evaluate_outcome(traj, task)
    return EvalTaskResult(
        env=env_kind.short, cost_kind=label, seed=seed, task_id=task_id, bin_cm=bin_cm,
        duration=task.duration, goal_x=task.goal[0], goal_y=task.goal[1], goal_z=task.goal[2],
        achieved_speed=outcome.achieved_speed, target_speed=expert_policy(task, start).average_speed,
        final_distance=outcome.final_distance, inserted=outcome.inserted,
        strategy_violation=outcome.strategy_violation, split=split,
    )


def _evaluate(policy: Callable[[Task], Trajectory], grid, env_kind: TaskKind, label: str, seed: int,
              split: str, start, threads: int) -> List[EvalTaskResult]:
    def one(entry):
        task_id, bin_cm, task = entry
        return _result(env_kind, label, seed, task_id, bin_cm, task, policy(task), split, start)

    if threads <= 1:
        results = [one(entry) for entry in grid]
    else:
        results = []
        with ThreadPoolExecutor(max_workers=threads) as executor:
            futures = [executor.submit(one, entry) for entry in grid]
            for future in as_completed(futures):
                results.append(future.result())
    return sorted(results, key=lambda r: r.task_id)


def _check_checkpoints(checkpoints: Sequence[Checkpoint]) -> CostParams:
    if not checkpoints:
        raise ConfigError("No checkpoints supplied for evaluation")
    first = checkpoints[0][1]
    for seed, params in checkpoints:
        if params.kind is not first.kind or params.base_duration != first.base_duration:
            raise ConfigError(f"Checkpoint for seed {seed} disagrees on cost kind or base duration")
    seeds = [s for s, _ in checkpoints]
    if len(set(seeds)) != len(seeds):
        raise ConfigError(f"Duplicate checkpoint seeds: {seeds}")
    return first


def run_meta_test(checkpoints: Sequence[Checkpoint], env_kind: TaskKind,
                  bins: Sequence[float] = DEFAULT_BINS, goals_per_bin: int = GOALS_PER_BIN,
                  speeds: Sequence[float] = DEFAULT_SPEEDS, inner_steps: int = 5, alpha: float = 0.01,
                  task_seed: int = TEST_TASK_SEED, start=START_POSITION, threads: int = 1) -> EvalReport:
    first = _check_checkpoints(checkpoints)
    grid = meta_test_tasks(env_kind, bins, goals_per_bin, speeds, task_seed)
    report = EvalReport()
    for seed, params in checkpoints:
        logger.info("meta-test %s seed=%d on %d tasks", params.kind.value, seed, len(grid))
        policy = lambda task, p=params: extract_policy(p, task, inner_steps, alpha, start)
        report.results.extend(_evaluate(policy, grid, env_kind, first.kind.value, seed, "test", start, threads))
    return report


def run_expert_oracle(env_kind: TaskKind, seeds: Sequence[int] = (0, 1, 2),
                      bins: Sequence[float] = DEFAULT_BINS, goals_per_bin: int = GOALS_PER_BIN,
                      speeds: Sequence[float] = DEFAULT_SPEEDS, task_seed: int = TEST_TASK_SEED,
                      start=START_POSITION, threads: int = 1) -> EvalReport:
    """Same grid as run_meta_test with the expert standing in for the learned policy."""
    grid = meta_test_tasks(env_kind, bins, goals_per_bin, speeds, task_seed)
    report = EvalReport()
    for seed in seeds:
        policy = lambda task: expert_policy(task, start)
        report.results.extend(_evaluate(policy, grid, env_kind, EXPERT_LABEL, seed, "test", start, threads))
    return report


def train_task_report(checkpoints: Sequence[Checkpoint], demos: Sequence[Demonstration], env_kind: TaskKind,
                      inner_steps: int = 5, alpha: float = 0.01, bin_cm: float = DEFAULT_BINS[0],
                      start=START_POSITION, threads: int = 1) -> EvalReport:
    """Evaluate each checkpoint on the goals and durations of its own training demos."""
    first = _check_checkpoints(checkpoints)
    grid = []
    for i, demo in enumerate(demos):
        task = Task(goal=tuple(demo.goal), duration=demo.horizon / round(1.0 / demo.trajectory.dt),
                    frequency=int(round(1.0 / demo.trajectory.dt)), kind=env_kind)
        grid.append((i, bin_cm, task))
    report = EvalReport()
    for seed, params in checkpoints:
        policy = lambda task, p=params: extract_policy(p, task, inner_steps, alpha, start)
        report.results.extend(_evaluate(policy, grid, env_kind, first.kind.value, seed, "train", start, threads))
    return report


# ============================================================================
# ABLATION
# ============================================================================


@dataclass(frozen=True)
class AblationCurve:
    kind: str
    inner_steps: int
    demos: int
    seed: int
    losses: Tuple[float, ...]

    @property
    def final_loss(self) -> float:
        return self.losses[-1]

    def rows(self) -> List[dict]:
        return [{"epoch": e + 1, "loss": loss, "inner_steps": self.inner_steps, "demos": self.demos,
                 "kind": self.kind, "seed": self.seed} for e, loss in enumerate(self.losses)]


def epochs_to_within(losses: Sequence[float], fraction: float = 0.1) -> int:
    """Epochs needed before the loss stays within `fraction` of its final value."""
    if not losses:
        raise ValueError("empty loss curve")
    final = losses[-1]
    tolerance = fraction * abs(final)
    count = len(losses)
    for e in range(len(losses) - 1, -1, -1):
        if abs(losses[e] - final) > tolerance:
            break
        count = e + 1
    return count


def ablation_grid(demos: Sequence[Demonstration], base_cfg: TrainConfig,
                  inner_steps_set: Sequence[int] = (1, 3, 5, 10), demo_counts: Sequence[int] = (3, 6, 12),
                  kinds: Sequence[CostKind] = (CostKind.LRBF, CostKind.LMLP), seeds: Sequence[int] = (0,),
                  start=START_POSITION, threads: int = 1) -> List[AblationCurve]:
    """Training-loss curves over inner steps × demo count × cost kind × seed.

    Run with n demos uses the first n of `demos`.
    """
    if max(demo_counts) > len(demos):
        raise ConfigError(f"ablation needs {max(demo_counts)} demos, only {len(demos)} supplied")
    cells = [(CostKind(k), n_steps, n_demos, seed)
             for k in kinds for n_steps in inner_steps_set for n_demos in demo_counts for seed in seeds]

    def one(cell) -> AblationCurve:
        kind, n_steps, n_demos, seed = cell
        cfg = replace(base_cfg, kind=kind, inner_steps=n_steps, rng_seed=seed)
        _, history = train(cfg, demos[:n_demos], start)
        logger.info("ablation %s N=%d demos=%d seed=%d done", kind.value, n_steps, n_demos, seed)
        return AblationCurve(kind.value, n_steps, n_demos, seed, tuple(history.epoch_losses()))

    if threads <= 1:
        return [one(c) for c in cells]
    with ThreadPoolExecutor(max_workers=threads) as executor:
        return list(executor.map(one, cells))
