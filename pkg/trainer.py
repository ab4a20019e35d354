"""
Gradient-based model-based IRL with temporal scaling.

For each demonstration (seed-shuffled every epoch):
  1. λ = base_steps / T_demo, goal = final demo position, u = 0.
  2. N gradient steps on u against the current cost, each on a fresh rollout.
  3. One gradient step on φ against the IRL loss between the resulting
     rollout and the demo, differentiated through all N inner steps.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

import diffcore as dc
from costs import CostKind, CostParams, LambdaScalar, init_params, temporal_scalar
from env import START_POSITION, Demonstration, State, Trajectory, rollout, rollout_positions
from errors import ConfigError, InvariantError, NumericDomainError, TrainingError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    kind: CostKind = CostKind.LRBF
    outer_rate: float = 0.001
    inner_rate: float = 0.01
    inner_steps: int = 5
    epochs: int = 100
    base_steps: int = 15
    rng_seed: int = 0
    num_centers: int = 10
    lambda_gain: bool = False
    truncate_inner: Optional[int] = None
    frequency: int = 5

    def __post_init__(self):
        object.__setattr__(self, "kind", CostKind(self.kind))
        # zero rates are allowed: they are the degenerate no-op cases
        if self.outer_rate < 0 or self.inner_rate < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.inner_steps < 1:
            raise ConfigError(f"inner_steps must be >= 1, got {self.inner_steps}")
        if self.base_steps < 2:
            raise ConfigError(f"base_steps must be >= 2, got {self.base_steps}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.num_centers < 2:
            raise ConfigError(f"num_centers must be >= 2, got {self.num_centers}")
        if self.truncate_inner is not None and self.truncate_inner < 1:
            raise ConfigError("truncate_inner must be >= 1 or unset")
        if self.frequency <= 0:
            raise ConfigError("frequency must be positive")

    @property
    def base_duration(self) -> float:
        return self.base_steps / self.frequency

    def initial_params(self) -> CostParams:
        return init_params(self.kind, self.rng_seed, num_centers=self.num_centers,
                           base_duration=self.base_duration, lambda_gain=self.lambda_gain)


@dataclass(frozen=True)
class HistoryRow:
    epoch: int
    demo_index: int
    irl_loss: float
    speed_error: float
    seconds_elapsed: float


@dataclass
class TrainHistory:
    rows: List[HistoryRow] = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def append(self, row: HistoryRow):
        self.rows.append(row)

    def epoch_losses(self) -> List[float]:
        """Mean IRL loss per completed epoch."""
        by_epoch = {}
        for r in self.rows:
            by_epoch.setdefault(r.epoch, []).append(r.irl_loss)
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]

    def epoch_speed_errors(self) -> List[float]:
        by_epoch = {}
        for r in self.rows:
            by_epoch.setdefault(r.epoch, []).append(r.speed_error)
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


# ============================================================================
# LOSS AND INNER LOOP
# ============================================================================


def irl_loss_var(positions: dc.Var, demo_positions: np.ndarray) -> dc.Var:
    if positions.shape != demo_positions.shape:
        raise InvariantError(f"rollout has shape {positions.shape}, demo has {demo_positions.shape}")
    diff = positions - demo_positions
    return dc.vsum(diff * diff) * (1.0 / positions.shape[0])


def irl_loss(rollout_traj: Trajectory, demo: Trajectory) -> float:
    """Mean over steps of the squared position distance, cm^2."""
    return irl_loss_var(dc.const(rollout_traj.positions), demo.positions).item()


def _action_cost(phi: CostParams, goal, lam: LambdaScalar, s0: State, dt: float) -> dc.ParametricFunction:
    def cost(phi_var: dc.Var, u: dc.Var) -> dc.Var:
        return phi.objective(phi_var, rollout_positions(s0.position, u, dt), goal, lam, dt)
    return cost


def inner_optimize(phi: CostParams, demo: Demonstration, lam: LambdaScalar, s0: State, cfg: TrainConfig,
                   epoch: Optional[int] = None, demo_index: Optional[int] = None) -> np.ndarray:
    """u after cfg.inner_steps gradient steps from zero; shape (T_demo, 3)."""
    return optimize_actions(phi, demo.goal, demo.horizon, lam, s0, demo.trajectory.dt,
                            cfg.inner_steps, cfg.inner_rate, epoch=epoch, demo_index=demo_index)


def optimize_actions(phi: CostParams, goal, horizon: int, lam: LambdaScalar, s0: State, dt: float,
                     steps: int, alpha: float, epoch: Optional[int] = None,
                     demo_index: Optional[int] = None) -> np.ndarray:
    cost = _action_cost(phi, goal, lam, s0, dt)
    phi_const = dc.const(phi.flat)
    u = np.zeros((horizon, 3))
    for step in range(steps):
        try:
            g = dc.grad_wrt_actions(lambda u_var: cost(phi_const, u_var), u)
        except NumericDomainError as e:
            logger.error("action gradient failed at inner step %d: %s", step, e)
            raise TrainingError(f"inner step {step}: {e}", epoch=epoch, demo_index=demo_index) from e
        u = u - alpha * g
    return u


def _inner_loop(phi: CostParams, demo: Demonstration, lam: LambdaScalar, s0: State,
                cfg: TrainConfig) -> dc.InnerLoop:
    return dc.InnerLoop(
        cost=_action_cost(phi, demo.goal, lam, s0, demo.trajectory.dt),
        u0=np.zeros((demo.horizon, 3)),
        alpha=cfg.inner_rate,
        steps=cfg.inner_steps,
        truncate=cfg.truncate_inner,
    )


def _outer_loss(demo: Demonstration, s0: State) -> dc.ScalarFunction:
    dt = demo.trajectory.dt
    demo_positions = demo.trajectory.positions

    def outer_loss(u: dc.Var) -> dc.Var:
        return irl_loss_var(rollout_positions(s0.position, u, dt), demo_positions)
    return outer_loss


def bilevel_loss(phi: CostParams, demo: Demonstration, cfg: TrainConfig,
                 s0: Optional[State] = None) -> dc.ScalarFunction:
    """φ ↦ L_IRL(rollout(u_N(φ)), demo) as one differentiable function of the flat φ."""
    s0 = s0 if s0 is not None else State(START_POSITION)
    inner = _inner_loop(phi, demo, temporal_scalar(cfg.base_steps, demo.horizon), s0, cfg)
    outer_loss = _outer_loss(demo, s0)
    return lambda phi_var: outer_loss(inner.run(phi_var))


def outer_step(phi: CostParams, demo: Demonstration, cfg: TrainConfig, s0: Optional[State] = None,
               epoch: Optional[int] = None,
               demo_index: Optional[int] = None) -> Tuple[CostParams, float, Trajectory]:
    """One φ update; returns (new params, IRL loss before the update, rollout used)."""
    s0 = s0 if s0 is not None else State(START_POSITION)
    lam = temporal_scalar(cfg.base_steps, demo.horizon)
    dt = demo.trajectory.dt

    try:
        loss, grad, u = dc.unrolled_value_and_grad(phi.flat, _inner_loop(phi, demo, lam, s0, cfg),
                                                   _outer_loss(demo, s0))
    except NumericDomainError as e:
        logger.error("outer update failed (epoch=%s, demo=%s): %s", epoch, demo_index, e)
        raise TrainingError(str(e), epoch=epoch, demo_index=demo_index) from e

    return phi.with_flat(phi.flat - cfg.outer_rate * grad), loss, rollout(s0, u, dt)


def outer_update(phi: CostParams, demo: Demonstration, cfg: TrainConfig, s0: Optional[State] = None) -> CostParams:
    return outer_step(phi, demo, cfg, s0)[0]


# ============================================================================
# TRAINING LOOP
# ============================================================================

EpochCallback = Callable[[int, CostParams, List[HistoryRow]], None]


def _check_demos(cfg: TrainConfig, demos: Sequence[Demonstration]):
    if not demos:
        raise ConfigError("training needs at least one demonstration")
    dts = {d.trajectory.dt for d in demos}
    if len(dts) != 1:
        raise ConfigError(f"demonstrations disagree on dt: {sorted(dts)}")
    dt = dts.pop()
    if abs(dt * cfg.frequency - 1.0) > 1e-9:
        raise ConfigError(f"demo dt {dt} does not match the {cfg.frequency} Hz control rate")


def train(cfg: TrainConfig, demos: Sequence[Demonstration], start=START_POSITION,
          on_epoch: Optional[EpochCallback] = None) -> Tuple[CostParams, TrainHistory]:
    _check_demos(cfg, demos)
    s0 = State(start)
    params = cfg.initial_params()
    history = TrainHistory()
    rng = np.random.default_rng(cfg.rng_seed)
    t0 = time.perf_counter()

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(demos))
        epoch_rows = []
        for i in order:
            demo = demos[int(i)]
            try:
                params, loss, traj = outer_step(params, demo, cfg, s0, epoch=epoch, demo_index=int(i))
            except TrainingError as e:
                e.history = history
                raise
            row = HistoryRow(
                epoch=epoch,
                demo_index=int(i),
                irl_loss=loss,
                speed_error=(traj.average_speed - demo.trajectory.average_speed) ** 2,
                seconds_elapsed=time.perf_counter() - t0,
            )
            history.append(row)
            epoch_rows.append(row)
        logger.info("%s seed=%d epoch %d/%d loss=%.6f", cfg.kind.value, cfg.rng_seed, epoch + 1,
                    cfg.epochs, float(np.mean([r.irl_loss for r in epoch_rows])))
        if on_epoch is not None:
            on_epoch(epoch, params, epoch_rows)

    return params, history


class IRLTrainer:
    """One training run with per-epoch hooks (used by the CLI to stream history)."""

    def __init__(self, cfg: TrainConfig, demos: Sequence[Demonstration], start=START_POSITION,
                 history_sink: Optional[Callable[[List[HistoryRow]], None]] = None):
        self.cfg = cfg
        self.demos = list(demos)
        self.start = start
        self.history_sink = history_sink
        self.params: Optional[CostParams] = None
        self.history: Optional[TrainHistory] = None
        self.epochs_done = 0

    def _on_epoch(self, epoch: int, params: CostParams, rows: List[HistoryRow]):
        self.params = params
        self.epochs_done = epoch + 1
        if self.history_sink is not None:
            self.history_sink(rows)

    def run(self) -> Tuple[CostParams, TrainHistory]:
        try:
            self.params, self.history = train(self.cfg, self.demos, self.start, on_epoch=self._on_epoch)
        except TrainingError as e:
            self.history = e.history
            raise
        return self.params, self.history
