"""
Exception hierarchy shared by the lab.
Each category maps to a CLI exit code.
"""
from typing import Optional


class LabError(Exception):
    """Base class for every error raised on purpose by the lab."""
    exit_code = 1


class ParameterError(LabError, ValueError):
    """An argument violates an operation's precondition."""
    exit_code = 2


class ConfigError(LabError):
    """A configuration file or preset is invalid."""
    exit_code = 2


class ModelError(LabError):
    """A score model or checkpoint could not be built or evaluated."""
    exit_code = 3


class TrainingError(ModelError):
    """Training diverged."""

    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


class NumericError(LabError):
    """A NaN/Inf showed up in the optimization loop."""
    exit_code = 4

    def __init__(self, message: str, dump_path: Optional[str] = None):
        if dump_path:
            message = f"{message}; diagnostics written to {dump_path}"
        super().__init__(message)
        self.dump_path = dump_path


class ArtifactError(LabError):
    """Reading or writing an artifact failed."""
    exit_code = 5
