"""
Point-mass desk tasks: dynamics, task sampling, expert demonstrations and
the outcome predicates for placement and peg-in-hole.

Units are centimetres and seconds. The end effector is a velocity-commanded
point mass: position' = position + u·dt, velocity' = u.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence

import numpy as np

import diffcore as dc
from errors import InvariantError, NumericDomainError, TaskDefinitionError

logger = logging.getLogger(__name__)

# ============================================================================
# GEOMETRY
# ============================================================================

START_POSITION = (0.0, 0.0, 10.0)
GOAL_CENTER = (0.0, 10.0, 0.0)
TABLE_HEIGHT = 0.0
TABLE_EDGE_OFFSET = 2.0     # edge plane sits this far in front of the goal (y)
CORNER_CLEARANCE = 3.0      # held object needs this much height in front of the edge
HOLE_RADIUS = 0.5
HOLE_TOP = 1.0
DEFAULT_FREQUENCY = 5
FORWARD_FRACTION = 0.6


class TaskKind(str, Enum):
    PLACEMENT = "placement"
    PEG_IN_HOLE = "peg-in-hole"

    @classmethod
    def parse(cls, tag: str) -> "TaskKind":
        aliases = {"placement": cls.PLACEMENT, "peg": cls.PEG_IN_HOLE, "peg-in-hole": cls.PEG_IN_HOLE}
        if tag not in aliases:
            raise TaskDefinitionError(f"Unknown environment kind: {tag!r}")
        return aliases[tag]

    @property
    def short(self) -> str:
        return "placement" if self is TaskKind.PLACEMENT else "peg"


class SpeedClass(str, Enum):
    FAST = "fast"
    SLOW = "slow"
    ALIGNED = "aligned"


# ============================================================================
# TYPES
# ============================================================================


@dataclass(frozen=True, eq=False)
class State:
    position: np.ndarray
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64).reshape(3))
        object.__setattr__(self, "velocity", np.asarray(self.velocity, dtype=np.float64).reshape(3))
        if not (np.all(np.isfinite(self.position)) and np.all(np.isfinite(self.velocity))):
            raise NumericDomainError("state is not finite")


@dataclass(frozen=True, eq=False)
class Trajectory:
    """T+1 states sampled every `dt` seconds, starting at t = 0."""

    positions: np.ndarray
    velocities: np.ndarray
    dt: float

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=np.float64)
        velocities = np.asarray(self.velocities, dtype=np.float64)
        if positions.ndim != 2 or positions.shape[1] != 3 or positions.shape[0] < 2:
            raise InvariantError(f"trajectory needs at least two 3-d states, got shape {positions.shape}")
        if velocities.shape != positions.shape:
            raise InvariantError("positions and velocities differ in shape")
        if not self.dt > 0:
            raise InvariantError(f"dt must be positive, got {self.dt}")
        for values in (positions, velocities):
            bad = np.flatnonzero(~np.isfinite(values))
            if bad.size:
                raise NumericDomainError("trajectory state is not finite", int(bad[0]))
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "velocities", velocities)
        object.__setattr__(self, "dt", float(self.dt))

    @classmethod
    def from_states(cls, states: Sequence[State], dt: float) -> "Trajectory":
        return cls(np.array([s.position for s in states]), np.array([s.velocity for s in states]), dt)

    @property
    def horizon(self) -> int:
        return self.positions.shape[0] - 1

    @property
    def duration(self) -> float:
        return self.horizon * self.dt

    @property
    def timestamps(self) -> np.ndarray:
        return np.arange(self.horizon + 1) * self.dt

    @property
    def states(self) -> List[State]:
        return [State(p, v) for p, v in zip(self.positions, self.velocities)]

    @property
    def final_position(self) -> np.ndarray:
        return self.positions[-1]

    @property
    def path_length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.positions, axis=0), axis=1)))

    @property
    def average_speed(self) -> float:
        return self.path_length / self.duration


@dataclass(frozen=True)
class Task:
    goal: tuple
    duration: float
    frequency: int = DEFAULT_FREQUENCY
    kind: TaskKind = TaskKind.PLACEMENT
    table_edge_y: Optional[float] = None

    def __post_init__(self):
        goal = tuple(float(g) for g in self.goal)
        if len(goal) != 3 or not all(np.isfinite(goal)):
            raise TaskDefinitionError(f"goal must be a finite 3-vector, got {self.goal}")
        object.__setattr__(self, "goal", goal)
        object.__setattr__(self, "kind", TaskKind(self.kind))
        if self.frequency <= 0 or self.duration <= 0:
            raise TaskDefinitionError("duration and frequency must be positive")
        steps = self.duration * self.frequency
        if round(steps) < 1 or abs(steps - round(steps)) > 1e-9:
            raise TaskDefinitionError(
                f"duration {self.duration}s at {self.frequency}Hz is not a whole number of steps")
        if self.table_edge_y is None:
            object.__setattr__(self, "table_edge_y", goal[1] - TABLE_EDGE_OFFSET)

    @property
    def horizon(self) -> int:
        return int(round(self.duration * self.frequency))

    @property
    def dt(self) -> float:
        return 1.0 / self.frequency

    @property
    def goal_array(self) -> np.ndarray:
        return np.array(self.goal)


@dataclass(frozen=True, eq=False)
class Demonstration:
    trajectory: Trajectory
    goal: np.ndarray
    speed_class: SpeedClass
    seed: int
    kind: TaskKind = TaskKind.PLACEMENT

    def __post_init__(self):
        goal = np.asarray(self.goal, dtype=np.float64).reshape(3)
        if not np.array_equal(goal, self.trajectory.final_position):
            raise InvariantError("demonstration goal must equal its final position")
        object.__setattr__(self, "goal", goal)
        object.__setattr__(self, "speed_class", SpeedClass(self.speed_class))
        object.__setattr__(self, "kind", TaskKind(self.kind))

    @property
    def horizon(self) -> int:
        return self.trajectory.horizon

    @property
    def duration(self) -> float:
        return self.trajectory.duration

    def to_record(self) -> dict:
        states = np.hstack([self.trajectory.positions, self.trajectory.velocities])
        return {
            "seed": int(self.seed),
            "dt": self.trajectory.dt,
            "goal": [float(g) for g in self.goal],
            "speed_class": self.speed_class.value,
            "kind": self.kind.value,
            "states": [[float(v) for v in row] for row in states],
        }

    @classmethod
    def from_record(cls, record: dict) -> "Demonstration":
        states = np.array(record["states"], dtype=np.float64)
        if states.ndim != 2 or states.shape[1] != 6:
            raise InvariantError("demo record states must be rows of [x, y, z, vx, vy, vz]")
        trajectory = Trajectory(states[:, :3], states[:, 3:], record["dt"])
        return cls(
            trajectory=trajectory,
            goal=np.array(record["goal"], dtype=np.float64),
            speed_class=SpeedClass(record["speed_class"]),
            seed=int(record["seed"]),
            kind=TaskKind(record.get("kind", TaskKind.PLACEMENT.value)),
        )


@dataclass(frozen=True)
class Outcome:
    final_distance: float
    strategy_violation: bool
    inserted: bool
    achieved_speed: float

    def __post_init__(self):
        if not self.final_distance >= 0:
            raise InvariantError("final distance must be non-negative")


# ============================================================================
# DYNAMICS
# ============================================================================


def dyn_step(s: State, u, dt: float) -> State:
    u = np.asarray(u, dtype=np.float64).reshape(3)
    return State(s.position + u * dt, u.copy())


def rollout(s0: State, actions, dt: float) -> Trajectory:
    actions = np.asarray(actions, dtype=np.float64).reshape(-1, 3)
    if actions.shape[0] < 1:
        raise InvariantError("rollout needs at least one action")
    states = [s0]
    for u in actions:
        states.append(dyn_step(states[-1], u, dt))
    return Trajectory.from_states(states, dt)


def rollout_positions(start, actions: dc.Var, dt: float) -> dc.Var:
    """Differentiable positions (T+1)×3 for an action Var of shape T×3."""
    horizon = actions.shape[0]
    steps = dc.embed(actions * dt, (slice(1, None),), (horizon + 1, 3))
    return dc.cumsum(steps, axis=0) + np.asarray(start, dtype=np.float64).reshape(1, 3)


# ============================================================================
# TASKS AND EXPERT
# ============================================================================


def sample_durations(low: float, high: float, n: int, rng: np.random.Generator) -> np.ndarray:
    if high < low or n < 0:
        raise TaskDefinitionError(f"bad duration range [{low}, {high}] x {n}")
    return rng.uniform(low, high, size=n)


def sample_tasks(center, radius_cm: float, n: int, speed_set: Sequence[float], rng_seed: int,
                 kind: TaskKind = TaskKind.PLACEMENT,
                 frequency: int = DEFAULT_FREQUENCY) -> List[Task]:
    """n goals uniform in the horizontal disc around `center`, crossed with `speed_set`.

    Ordering is goal-major: all durations of goal 0, then goal 1, ...
    """
    if radius_cm <= 0 or n <= 0:
        raise TaskDefinitionError(f"radius and goal count must be positive, got {radius_cm}, {n}")
    center = np.asarray(center, dtype=np.float64).reshape(3)
    rng = np.random.default_rng(rng_seed)
    r = radius_cm * np.sqrt(rng.uniform(size=n))
    theta = 2.0 * np.pi * rng.uniform(size=n)
    tasks = []
    for i in range(n):
        goal = (center[0] + r[i] * np.cos(theta[i]), center[1] + r[i] * np.sin(theta[i]), center[2])
        for duration in speed_set:
            tasks.append(Task(goal=goal, duration=float(duration), frequency=frequency, kind=kind))
    return tasks


def expert_demo(task: Task, duration_jitter: float = 0.0, rng_seed: int = 0,
                start=START_POSITION, speed_class: SpeedClass = SpeedClass.ALIGNED) -> Demonstration:
    """Forward along the start height to above the goal, then straight down.

    The first 60% of the steps cover the horizontal segment, the rest the
    descent, both at constant velocity. `duration_jitter` perturbs the task
    duration uniformly within ±jitter before rounding to whole steps.
    """
    start = np.asarray(start, dtype=np.float64).reshape(3)
    goal = task.goal_array
    if goal[2] > start[2]:
        raise TaskDefinitionError(f"goal height {goal[2]} is above the start height {start[2]}")

    duration = task.duration
    if duration_jitter > 0:
        rng = np.random.default_rng(rng_seed)
        duration = float(sample_durations(duration - duration_jitter, duration + duration_jitter, 1, rng)[0])
    horizon = int(round(duration * task.frequency))
    if horizon < 2:
        raise TaskDefinitionError(f"horizon {horizon} is too short for a two-phase demonstration")

    dt = task.dt
    n_forward = min(max(int(round(FORWARD_FRACTION * horizon)), 1), horizon - 1)
    n_down = horizon - n_forward
    waypoint = np.array([goal[0], goal[1], start[2]])

    positions = np.empty((horizon + 1, 3))
    velocities = np.zeros((horizon + 1, 3))
    for t in range(n_forward + 1):
        positions[t] = start + (t / n_forward) * (waypoint - start)
    for t in range(n_forward + 1, horizon + 1):
        positions[t] = waypoint + ((t - n_forward) / n_down) * (goal - waypoint)
    positions[-1] = goal
    velocities[1:n_forward + 1] = (waypoint - start) / (n_forward * dt)
    velocities[n_forward + 1:] = (goal - waypoint) / (n_down * dt)

    return Demonstration(Trajectory(positions, velocities, dt), goal.copy(), speed_class, rng_seed, task.kind)


# ============================================================================
# OUTCOMES
# ============================================================================


def _final_distance(traj: Trajectory, task: Task) -> float:
    return float(np.linalg.norm(traj.final_position - task.goal_array))


def placement_outcome(traj: Trajectory, task: Task) -> Outcome:
    if task.kind is not TaskKind.PLACEMENT:
        raise TaskDefinitionError(f"placement outcome requested for a {task.kind.value} task")
    y = traj.positions[:, 1]
    z = traj.positions[:, 2]
    in_front = y < task.table_edge_y
    too_low = z < TABLE_HEIGHT + CORNER_CLEARANCE
    return Outcome(
        final_distance=_final_distance(traj, task),
        strategy_violation=bool(np.any(in_front & too_low)),
        inserted=False,
        achieved_speed=traj.average_speed,
    )


def _hole_distance(position: np.ndarray, task: Task) -> float:
    """Distance to the hole's axis segment, from the goal (hole bottom) up to the hole top."""
    goal = task.goal_array
    nearest = np.array([goal[0], goal[1], np.clip(position[2], goal[2], HOLE_TOP)])
    return float(np.linalg.norm(position - nearest))


def _inserted(traj: Trajectory, task: Task) -> bool:
    axis = task.goal_array[:2]
    positions = traj.positions
    radial = np.linalg.norm(positions[:, :2] - axis, axis=1)
    if _hole_distance(positions[-1], task) > HOLE_RADIUS:
        return False
    for t in range(traj.horizon):
        z0, z1 = positions[t, 2], positions[t + 1, 2]
        if not (z0 > HOLE_TOP >= z1):
            continue
        w = (z0 - HOLE_TOP) / (z0 - z1)
        crossing = (1.0 - w) * positions[t, :2] + w * positions[t + 1, :2]
        after = slice(t + 1, None)
        if (np.linalg.norm(crossing - axis) <= HOLE_RADIUS and np.all(radial[after] <= HOLE_RADIUS)
                and np.all(positions[after, 2] <= HOLE_TOP)):
            return True
    return False


def insertion_success(traj: Trajectory, task: Task) -> Outcome:
    """Inserted iff the peg crosses the hole top on-axis and stays inside the hole afterwards.

    The peg need not be seated at the goal: final_distance is measured to the
    hole (its axis between bottom and top), so an inserted peg is always
    within the hole radius of it.
    """
    if task.kind is not TaskKind.PEG_IN_HOLE:
        raise TaskDefinitionError(f"insertion outcome requested for a {task.kind.value} task")
    return Outcome(
        final_distance=_hole_distance(traj.final_position, task),
        strategy_violation=False,
        inserted=_inserted(traj, task),
        achieved_speed=traj.average_speed,
    )


def evaluate_outcome(traj: Trajectory, task: Task) -> Outcome:
    if task.kind is TaskKind.PLACEMENT:
        return placement_outcome(traj, task)
    return insertion_success(traj, task)
