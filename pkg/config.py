"""
Experiment configuration: environment defaults plus one JSON file per run.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

from costs import CostKind
from env import TaskKind
from errors import ConfigError, MissingInputError
from evaluation import DEFAULT_BINS
from trainer import TrainConfig

load_dotenv()

# ============================================================================
# CONFIG
# ============================================================================

THREADS = int(os.getenv("TIVC_THREADS", "1"))
LOG_LEVEL = os.getenv("TIVC_LOG_LEVEL", "INFO").strip().upper()
OUT_DIR = os.getenv("TIVC_OUT_DIR", "runs")

CONTEXTS = ("a", "b", "c")


def configure_logging(level: Optional[str] = None):
    logging.basicConfig(
        level=getattr(logging, (level or LOG_LEVEL), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


@dataclass
class ExperimentConfig:
    env: str = "placement"
    context: str = "c"
    costs: List[str] = field(default_factory=lambda: ["rbf", "lrbf", "mlp", "lmlp"])
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    demos: int = 12
    demo_seed: int = 0

    # trainer
    epochs: int = 100
    outer_rate: float = 0.001
    inner_rate: float = 0.01
    inner_steps: int = 5
    base_steps: int = 15
    num_centers: int = 10
    lambda_gain: bool = False
    truncate_inner: Optional[int] = None

    # meta-test
    test_updates: int = 5
    bins: List[float] = field(default_factory=lambda: [1.0, 3.0, 5.0])
    speeds: List[float] = field(default_factory=lambda: [2.0, 3.0, 4.0, 5.0, 6.0])
    goals_per_bin: int = 10
    task_seed: int = 1000

    # ablation
    ablation_inner_steps: List[int] = field(default_factory=lambda: [1, 3, 5, 10])
    ablation_demos: List[int] = field(default_factory=lambda: [3, 6, 12])
    ablation_costs: List[str] = field(default_factory=lambda: ["lrbf", "lmlp"])
    ablation_epochs: int = 50

    out: str = OUT_DIR
    threads: int = THREADS

    def __post_init__(self):
        self.validate()

    @property
    def env_kind(self) -> TaskKind:
        return TaskKind.parse(self.env)

    @property
    def cost_kinds(self) -> List[CostKind]:
        return [CostKind(c) for c in self.costs]

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    @property
    def stem(self) -> str:
        return f"{self.env_kind.short}_{self.context}"

    def validate(self):
        try:
            TaskKind.parse(self.env)
            for c in list(self.costs) + list(self.ablation_costs):
                CostKind(c)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if self.context not in CONTEXTS:
            raise ConfigError(f"context must be one of {CONTEXTS}, got {self.context!r}")
        if not self.seeds:
            raise ConfigError("seed list must not be empty")
        if not self.costs:
            raise ConfigError("at least one cost kind is required")
        for name in ("demos", "goals_per_bin", "threads"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.epochs < 0 or self.ablation_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.test_updates < 0:
            raise ConfigError("test_updates must be non-negative")
        if not self.bins or not self.speeds:
            raise ConfigError("bins and speeds must not be empty")
        unknown = [b for b in self.bins if b not in DEFAULT_BINS]
        if unknown:
            raise ConfigError(f"goal bins must be drawn from {list(DEFAULT_BINS)}, got {unknown}")
        self.train_config(self.cost_kinds[0], self.seeds[0])

    def train_config(self, kind: CostKind, seed: int) -> TrainConfig:
        return TrainConfig(
            kind=kind, outer_rate=self.outer_rate, inner_rate=self.inner_rate,
            inner_steps=self.inner_steps, epochs=self.epochs, base_steps=self.base_steps,
            rng_seed=seed, num_centers=self.num_centers, lambda_gain=self.lambda_gain,
            truncate_inner=self.truncate_inner,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        """Copy with every non-None override applied (CLI flags)."""
        changes = {k: v for k, v in overrides.items() if v is not None}
        unknown = set(changes) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"Unknown config fields: {sorted(unknown)}")
        return replace(self, **changes)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise MissingInputError(f"Config file not found: {path}", missing=[str(path)])
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError(f"{path}: {e}") from e
