"""
Learnable trajectory costs C_φ(λ, τ, g) and the temporal scalar λ.

Five kinds share one flat parameter vector φ:

    poly   per-dimension polynomial distance weights (3 × 4)
    rbf    Gaussian kernels on wall-clock time, weights ω (K × 3)
    lrbf   same kernels evaluated at λ-scaled timestamps
    mlp    16-unit sigmoid MLP over per-dimension squared goal errors (in dm^2)
    lmlp   same network with the λ-scaled timestamp as a fourth input

Every cost is the mean over the T+1 states of a per-state term. Each cost is
written once against diffcore Vars; the eval_* functions run the same code
on constants.
"""

import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Union

import numpy as np

import diffcore as dc
from errors import ConfigError

logger = logging.getLogger(__name__)

HIDDEN_SIZE = 16
STATE_DIMS = 3
POLY_DEGREE = 3
DEFAULT_CENTERS = 10
DEFAULT_BASE_DURATION = 3.0
INIT_WEIGHT = 0.1
MLP_INIT_RANGE = 0.5
# squared goal errors enter the MLP in units of this many cm^2; desk errors are
# ~100 cm^2 and would otherwise pin every sigmoid at 0 or 1
MLP_FEATURE_SCALE = 100.0

LambdaScalar = float


class CostKind(str, Enum):
    POLY = "poly"
    RBF = "rbf"
    LRBF = "lrbf"
    MLP = "mlp"
    LMLP = "lmlp"

    @property
    def uses_lambda(self) -> bool:
        return self in (CostKind.LRBF, CostKind.LMLP)

    @property
    def is_rbf(self) -> bool:
        return self in (CostKind.RBF, CostKind.LRBF)

    @property
    def is_mlp(self) -> bool:
        return self in (CostKind.MLP, CostKind.LMLP)

    @property
    def label(self) -> str:
        return {"poly": "Poly", "rbf": "RBF", "lrbf": "λ-RBF", "mlp": "MLP", "lmlp": "λ-MLP"}[self.value]


# ============================================================================
# TEMPORAL SCALING
# ============================================================================


def temporal_scalar(base_steps: int, current_steps: int) -> LambdaScalar:
    """λ = |τ_base| / |τ̂|; below 1 for executions slower than the base."""
    if base_steps <= 0 or current_steps <= 0:
        raise ValueError(f"step counts must be positive, got {base_steps} and {current_steps}")
    return base_steps / current_steps


def rbf_centers(K: int, base_duration: float) -> np.ndarray:
    if K < 2:
        raise ValueError(f"need at least two kernel centres, got {K}")
    if base_duration <= 0:
        raise ValueError(f"base duration must be positive, got {base_duration}")
    return np.arange(K) * base_duration / (K - 1)


def default_bandwidth(K: int, base_duration: float) -> float:
    return 2.0 * (K - 1) ** 2 / base_duration ** 2


def kernel_matrix(centers: np.ndarray, bandwidth: float, lam: float, timestamps: np.ndarray) -> np.ndarray:
    """(len(timestamps), K) matrix of exp(-b(λx - μ)^2)."""
    shifted = lam * np.asarray(timestamps, dtype=np.float64)[:, None] - np.asarray(centers)[None, :]
    return np.exp(-bandwidth * shifted ** 2)


# ============================================================================
# PARAMETER TYPES
# ============================================================================


@dataclass(frozen=True, eq=False)
class PolyParams:
    weights: np.ndarray  # (3, 4): row k = state dim, column d = power

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (STATE_DIMS, POLY_DEGREE + 1):
            raise ValueError(f"poly weights must be 3x4, got {w.shape}")
        object.__setattr__(self, "weights", w)


@dataclass(frozen=True, eq=False)
class RbfParams:
    weights: np.ndarray  # (K, 3)
    centers: np.ndarray
    bandwidth: float
    base_duration: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        centers = np.asarray(self.centers, dtype=np.float64)
        if centers.ndim != 1 or centers.size < 2:
            raise ValueError("need at least two kernel centres")
        if w.shape != (centers.size, STATE_DIMS):
            raise ValueError(f"rbf weights must be {centers.size}x3, got {w.shape}")
        if not self.bandwidth > 0:
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "centers", centers)

    @property
    def K(self) -> int:
        return self.centers.size


@dataclass(frozen=True, eq=False)
class MlpParams:
    hidden_weights: np.ndarray  # (16, input_dim)
    hidden_bias: np.ndarray     # (16,)
    output_weights: np.ndarray  # (1, 16)
    output_bias: float
    uses_lambda_input: bool

    def __post_init__(self):
        hw = np.asarray(self.hidden_weights, dtype=np.float64)
        if hw.shape != (HIDDEN_SIZE, self.input_dim):
            raise ValueError(f"hidden weights must be {HIDDEN_SIZE}x{self.input_dim}, got {hw.shape}")
        object.__setattr__(self, "hidden_weights", hw)
        object.__setattr__(self, "hidden_bias", np.asarray(self.hidden_bias, dtype=np.float64).reshape(HIDDEN_SIZE))
        object.__setattr__(self, "output_weights",
                           np.asarray(self.output_weights, dtype=np.float64).reshape(1, HIDDEN_SIZE))
        object.__setattr__(self, "output_bias", float(self.output_bias))

    @property
    def input_dim(self) -> int:
        return STATE_DIMS + 1 if self.uses_lambda_input else STATE_DIMS


Structure = Union[PolyParams, RbfParams, MlpParams]


def _flatten(structure: Structure) -> np.ndarray:
    if isinstance(structure, PolyParams):
        return structure.weights.reshape(-1).copy()
    if isinstance(structure, RbfParams):
        return structure.weights.reshape(-1).copy()
    return np.concatenate([
        structure.hidden_weights.reshape(-1),
        structure.hidden_bias,
        structure.output_weights.reshape(-1),
        [structure.output_bias],
    ])


def _mlp_sizes(input_dim: int) -> tuple:
    a = HIDDEN_SIZE * input_dim
    return a, a + HIDDEN_SIZE, a + 2 * HIDDEN_SIZE, a + 2 * HIDDEN_SIZE + 1


@dataclass(frozen=True, eq=False)
class CostParams:
    """Tagged cost parameters; `flat` is the φ vector of the IRL outer loop.

    `lambda_gain` multiplies the action objective of every kind by λ, so slow
    demos take proportionally smaller planning steps whether or not the cost
    itself sees λ. MLP objectives are also multiplied by MLP_FEATURE_SCALE to
    undo the feature scaling in cm^2. Cost values reported by eval_* are
    unaffected by either factor.
    """

    kind: CostKind
    structure: Structure
    base_duration: float = DEFAULT_BASE_DURATION
    lambda_gain: bool = False

    def __post_init__(self):
        kind = CostKind(self.kind)
        object.__setattr__(self, "kind", kind)
        expected = PolyParams if kind is CostKind.POLY else RbfParams if kind.is_rbf else MlpParams
        if not isinstance(self.structure, expected):
            raise ValueError(f"{kind.value} cost needs {expected.__name__}")
        if isinstance(self.structure, MlpParams) and self.structure.uses_lambda_input != (kind is CostKind.LMLP):
            raise ValueError("only the λ-MLP takes the timestamp input")

    @property
    def flat(self) -> np.ndarray:
        return _flatten(self.structure)

    @property
    def size(self) -> int:
        return self.flat.size

    def with_flat(self, flat) -> "CostParams":
        flat = np.asarray(flat, dtype=np.float64).reshape(-1)
        if flat.size != self.size:
            raise ValueError(f"expected {self.size} parameters, got {flat.size}")
        s = self.structure
        if isinstance(s, PolyParams):
            structure = PolyParams(flat.reshape(s.weights.shape).copy())
        elif isinstance(s, RbfParams):
            structure = replace(s, weights=flat.reshape(s.weights.shape).copy())
        else:
            a, b, c, _ = _mlp_sizes(s.input_dim)
            structure = MlpParams(flat[:a].reshape(HIDDEN_SIZE, s.input_dim).copy(), flat[a:b].copy(),
                                  flat[b:c].reshape(1, HIDDEN_SIZE).copy(), float(flat[c]),
                                  s.uses_lambda_input)
        return replace(self, structure=structure)

    def effective_lambda(self, lam: LambdaScalar) -> float:
        return float(lam) if self.kind.uses_lambda else 1.0

    def cost_var(self, phi: dc.Var, positions: dc.Var, goal, lam: LambdaScalar, dt: float) -> dc.Var:
        """C_φ on a (T+1)×3 position Var, differentiable in both φ and positions."""
        goal = np.asarray(goal, dtype=np.float64).reshape(1, STATE_DIMS)
        timestamps = np.arange(positions.shape[0]) * dt
        s = self.structure
        if isinstance(s, PolyParams):
            return _poly_cost(dc.reshape(phi, s.weights.shape), positions, goal)
        if isinstance(s, RbfParams):
            kernels = kernel_matrix(s.centers, s.bandwidth, self.effective_lambda(lam), timestamps)
            return _rbf_cost(dc.reshape(phi, s.weights.shape), kernels, positions, goal)
        a, b, c, d = _mlp_sizes(s.input_dim)
        lam_x = self.effective_lambda(lam) * timestamps if s.uses_lambda_input else None
        return _mlp_cost(dc.reshape(phi[0:a], (HIDDEN_SIZE, s.input_dim)), phi[a:b],
                         dc.reshape(phi[b:c], (1, HIDDEN_SIZE)), phi[c:d], positions, goal, lam_x)

    def objective(self, phi: dc.Var, positions: dc.Var, goal, lam: LambdaScalar, dt: float) -> dc.Var:
        """Quantity minimised over the actions (the cost, λ-gained if enabled)."""
        cost = self.cost_var(phi, positions, goal, lam, dt)
        gain = MLP_FEATURE_SCALE if self.kind.is_mlp else 1.0
        if self.lambda_gain:
            gain *= float(lam)
        return cost if gain == 1.0 else cost * gain

    def evaluate(self, traj, goal, lam: LambdaScalar = 1.0) -> float:
        return self.cost_var(dc.const(self.flat), dc.const(traj.positions), goal, lam, traj.dt).item()

    def to_checkpoint(self, seed: int, epoch: int) -> dict:
        rbf = self.structure if isinstance(self.structure, RbfParams) else None
        return {
            "kind": self.kind.value,
            "K": rbf.K if rbf else None,
            "base_duration": self.base_duration,
            "bandwidth": rbf.bandwidth if rbf else None,
            "flat_params": [float(v) for v in self.flat],
            "seed": int(seed),
            "epoch": int(epoch),
            "lambda_gain": bool(self.lambda_gain),
        }

    @classmethod
    def from_checkpoint(cls, record: dict) -> "CostParams":
        try:
            kind = CostKind(record["kind"])
            base = float(record["base_duration"])
            template = init_params(kind, 0, num_centers=record.get("K") or DEFAULT_CENTERS,
                                   base_duration=base, lambda_gain=bool(record.get("lambda_gain", False)))
            if kind.is_rbf:
                template = replace(template, structure=replace(template.structure,
                                                               bandwidth=float(record["bandwidth"])))
            return template.with_flat(record["flat_params"])
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"Malformed checkpoint: {e}") from e


# ============================================================================
# COST BODIES
# ============================================================================


def _poly_cost(weights: dc.Var, positions: dc.Var, goal: np.ndarray) -> dc.Var:
    total = None
    for d in range(1, POLY_DEGREE + 1):
        diff = positions ** d - goal ** d
        term = dc.vsum(diff * diff * weights[:, d])
        total = term if total is None else total + term
    return total * (1.0 / positions.shape[0])


def _rbf_cost(weights: dc.Var, kernels: np.ndarray, positions: dc.Var, goal: np.ndarray) -> dc.Var:
    diff = positions - goal
    weighted = dc.matmul(kernels, weights)  # (T+1, 3) per-state, per-dim weights
    return dc.vsum(weighted * (diff * diff)) * (1.0 / positions.shape[0])


def _mlp_cost(hidden_w: dc.Var, hidden_b: dc.Var, out_w: dc.Var, out_b: dc.Var,
              positions: dc.Var, goal: np.ndarray, lam_x: Optional[np.ndarray]) -> dc.Var:
    diff = positions - goal
    features = diff * diff * (1.0 / MLP_FEATURE_SCALE)
    if lam_x is not None:
        n = positions.shape[0]
        features = dc.embed(features, (slice(None), slice(0, STATE_DIMS)), (n, STATE_DIMS + 1))
        column = np.zeros((n, STATE_DIMS + 1))
        column[:, STATE_DIMS] = lam_x
        features = features + column
    hidden = dc.sigmoid(dc.matmul(features, dc.transpose(hidden_w)) + hidden_b)
    out = dc.matmul(hidden, dc.transpose(out_w)) + out_b
    return dc.mean(out)


def eval_poly_cost(p: PolyParams, traj, goal) -> float:
    goal = np.asarray(goal, dtype=np.float64).reshape(1, STATE_DIMS)
    return _poly_cost(dc.const(p.weights), dc.const(traj.positions), goal).item()


def eval_rbf_cost(p: RbfParams, lam: LambdaScalar, traj, goal) -> float:
    if not lam > 0:
        raise ValueError(f"λ must be positive, got {lam}")
    goal = np.asarray(goal, dtype=np.float64).reshape(1, STATE_DIMS)
    kernels = kernel_matrix(p.centers, p.bandwidth, lam, traj.timestamps)
    return _rbf_cost(dc.const(p.weights), kernels, dc.const(traj.positions), goal).item()


def eval_mlp_cost(p: MlpParams, lam: LambdaScalar, traj, goal) -> float:
    goal = np.asarray(goal, dtype=np.float64).reshape(1, STATE_DIMS)
    lam_x = lam * traj.timestamps if p.uses_lambda_input else None
    return _mlp_cost(dc.const(p.hidden_weights), dc.const(p.hidden_bias), dc.const(p.output_weights),
                     dc.const([p.output_bias]), dc.const(traj.positions), goal, lam_x).item()


def kernel_activations(p: RbfParams, lam: LambdaScalar, n_states: int, dt: float) -> np.ndarray:
    return kernel_matrix(p.centers, p.bandwidth, lam, np.arange(n_states) * dt)


# ============================================================================
# INITIALISATION
# ============================================================================


def init_params(kind, rng_seed: int = 0, num_centers: int = DEFAULT_CENTERS,
                base_duration: float = DEFAULT_BASE_DURATION, lambda_gain: bool = False) -> CostParams:
    kind = CostKind(kind)
    if kind is CostKind.POLY:
        structure = PolyParams(np.full((STATE_DIMS, POLY_DEGREE + 1), INIT_WEIGHT))
    elif kind.is_rbf:
        structure = RbfParams(
            weights=np.full((num_centers, STATE_DIMS), INIT_WEIGHT),
            centers=rbf_centers(num_centers, base_duration),
            bandwidth=default_bandwidth(num_centers, base_duration),
            base_duration=base_duration,
        )
    else:
        uses_lambda = kind is CostKind.LMLP
        input_dim = STATE_DIMS + 1 if uses_lambda else STATE_DIMS
        rng = np.random.default_rng(rng_seed)
        structure = MlpParams(
            hidden_weights=rng.uniform(-MLP_INIT_RANGE, MLP_INIT_RANGE, size=(HIDDEN_SIZE, input_dim)),
            hidden_bias=np.zeros(HIDDEN_SIZE),
            output_weights=rng.uniform(-MLP_INIT_RANGE, MLP_INIT_RANGE, size=(1, HIDDEN_SIZE)),
            output_bias=0.0,
            uses_lambda_input=uses_lambda,
        )
    return CostParams(kind=kind, structure=structure, base_duration=base_duration, lambda_gain=lambda_gain)
