"""
Exception hierarchy shared by every stage of the pipeline.

The CLI maps each family onto an exit code (see EXIT_CODES).
"""

from typing import Optional


class TivcError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(TivcError):
    """Invalid experiment configuration or inconsistent inputs."""

    exit_code = 2


class MissingInputError(ConfigError):
    """A file another stage should have produced is absent."""

    exit_code = 4

    def __init__(self, message: str, missing: Optional[list] = None):
        super().__init__(message)
        self.missing = list(missing or [])


class TaskDefinitionError(TivcError, ValueError):
    """Task geometry or horizon cannot be realised."""

    exit_code = 2


class NumericDomainError(TivcError, ArithmeticError):
    """A cost, gradient or state became non-finite.

    `index` points at the first offending entry of the flat vector that was
    being evaluated, or is None when no single entry can be blamed.
    """

    exit_code = 3

    def __init__(self, message: str, index: Optional[int] = None):
        super().__init__(message if index is None else f"{message} (index {index})")
        self.index = index


class DivergenceError(NumericDomainError):
    """The unrolled inner loop produced non-finite actions."""

    def __init__(self, message: str, step: Optional[int] = None, index: Optional[int] = None):
        super().__init__(message if step is None else f"{message} at inner step {step}", index)
        self.step = step


class TrainingError(NumericDomainError):
    """Numeric failure inside the training loop, with epoch/demo context."""

    def __init__(self, message: str, epoch: Optional[int] = None,
                 demo_index: Optional[int] = None, history=None):
        super().__init__(f"{message} [epoch={epoch}, demo={demo_index}]")
        self.epoch = epoch
        self.demo_index = demo_index
        self.history = history


class InvariantError(TivcError, AssertionError):
    """Internal invariant violated; always a bug in the caller."""

    exit_code = 3


EXIT_CODES = {
    "ok": 0,
    "config": ConfigError.exit_code,
    "numeric": NumericDomainError.exit_code,
    "missing": MissingInputError.exit_code,
}
