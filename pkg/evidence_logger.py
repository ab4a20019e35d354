"""
Evidence files for experiment runs.

Demos and checkpoints as JSONL/JSON, training histories and evaluation
results as CSV, and one manifest per stage listing SHA-256 digests of every
input and artifact. Floats are written with Python's shortest round-trip
repr, so every value reads back bit-for-bit.
"""

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

from costs import CostParams
from env import Demonstration
from errors import ConfigError, InvariantError, MissingInputError
from evaluation import RESULT_FIELDS, EvalTaskResult
from trainer import HistoryRow

logger = logging.getLogger(__name__)

TOOL_VERSION = "0.3.0"
HISTORY_FIELDS = ["epoch", "demo_index", "irl_loss", "speed_error", "seconds_elapsed"]


def _ensure_parent(path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)


def _require(path: Path):
    if not path.exists():
        raise MissingInputError(f"Missing input file: {path}", missing=[str(path)])


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


# ============================================================================
# DEMOS
# ============================================================================


def write_demos(path, demos: Sequence[Demonstration]) -> Path:
    """One JSON line per demonstration (overwrites)."""
    path = Path(path)
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8") as f:
        for demo in demos:
            f.write(json.dumps(demo.to_record(), ensure_ascii=False) + "\n")
    return path


def read_demos(path) -> List[Demonstration]:
    path = Path(path)
    _require(path)
    demos = []
    with open(path, "r", encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                demos.append(Demonstration.from_record(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, InvariantError) as e:
                raise ConfigError(f"{path}:{n}: malformed demo record ({e})") from e
    if not demos:
        raise ConfigError(f"{path} holds no demonstrations")
    return demos


# ============================================================================
# CHECKPOINTS
# ============================================================================


def write_checkpoint(path, params: CostParams, seed: int, epoch: int) -> Path:
    path = Path(path)
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(params.to_checkpoint(seed, epoch), f, indent=2)
        f.write("\n")
    return path


def read_checkpoint(path) -> Tuple[int, CostParams]:
    path = Path(path)
    _require(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            record = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: malformed checkpoint ({e})") from e
    return int(record.get("seed", 0)), CostParams.from_checkpoint(record)


# ============================================================================
# CSV
# ============================================================================


def write_csv(path, rows: Iterable[dict], fieldnames: List[str]) -> Path:
    path = Path(path)
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return path


def start_history(path) -> Path:
    return write_csv(path, [], HISTORY_FIELDS)


def append_history(path, rows: Iterable[HistoryRow]):
    """Append finished rows; the file stays valid if the run dies mid-way."""
    with open(path, "a", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=HISTORY_FIELDS)
        for row in rows:
            writer.writerow(asdict(row))


def read_history(path) -> List[HistoryRow]:
    path = Path(path)
    _require(path)
    with open(path, "r", encoding="utf-8", newline="") as f:
        return [HistoryRow(int(r["epoch"]), int(r["demo_index"]), float(r["irl_loss"]),
                           float(r["speed_error"]), float(r["seconds_elapsed"])) for r in csv.DictReader(f)]


def write_results(path, results: Sequence[EvalTaskResult]) -> Path:
    return write_csv(path, (r.to_row() for r in results), RESULT_FIELDS)


def read_results(path) -> List[EvalTaskResult]:
    path = Path(path)
    _require(path)
    with open(path, "r", encoding="utf-8", newline="") as f:
        return [EvalTaskResult.from_row(row) for row in csv.DictReader(f)]


def write_json(path, payload) -> Path:
    path = Path(path)
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, ensure_ascii=False)
        f.write("\n")
    return path


# ============================================================================
# MANIFEST
# ============================================================================


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    stage: str
    config: dict
    started_at: str = field(default_factory=utc_now)
    finished_at: Optional[str] = None
    inputs: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    tool_version: str = TOOL_VERSION

    def add_input(self, path, root: Path):
        self.inputs[_relative(path, root)] = file_digest(path)

    def add_artifact(self, path, root: Path):
        self.artifacts[_relative(path, root)] = file_digest(path)

    def write(self, out_dir) -> Path:
        """Stamp the finish time and write manifest_<stage>.json (always last)."""
        self.finished_at = utc_now()
        return write_json(Path(out_dir) / f"manifest_{self.stage}.json", asdict(self))


def _relative(path, root: Path) -> str:
    path = Path(path)
    try:
        return path.resolve().relative_to(Path(root).resolve()).as_posix()
    except ValueError:
        return path.as_posix()


def verify_manifest(path) -> List[str]:
    """Paths whose current digest differs from the manifest (empty when intact)."""
    path = Path(path)
    _require(path)
    with open(path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    root = path.parent
    changed = []
    for rel, digest in manifest.get("artifacts", {}).items():
        target = root / rel
        if not target.exists() or file_digest(target) != digest:
            changed.append(rel)
    return changed
