"""
Error Types
Structured exceptions shared by the numerical core, the simulators and the harness
"""

from typing import Optional, Sequence


class FnopeError(Exception):
    """Base class for every error raised by this package"""


class ShapeError(FnopeError, ValueError):
    """Two operands have incompatible shapes"""

    def __init__(self, op: str, shape_a: Sequence[int], shape_b: Sequence[int], detail: str = ""):
        self.op = op
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b)
        message = f"{op}: incompatible shapes {self.shape_a} and {self.shape_b}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)


class DomainError(FnopeError, ValueError):
    """An argument lies outside the domain an operation accepts"""


class NonUniformGridError(DomainError):
    """A uniform-grid transform received irregular positions"""


class FactorizationError(FnopeError, RuntimeError):
    """Cholesky factorization failed even after jitter escalation"""

    def __init__(self, message: str, jitter: Optional[float] = None):
        self.jitter = jitter
        super().__init__(message)


class NonFiniteError(FnopeError, FloatingPointError):
    """NaN or Inf appeared in a forward pass or an integration"""

    def __init__(self, message: str, location: Optional[str] = None, step: Optional[int] = None):
        self.location = location
        self.step = step
        super().__init__(message)


class SolverError(FnopeError, RuntimeError):
    """An iterative solver or ODE integrator could not produce a valid state"""

    def __init__(self, message: str, residual: Optional[float] = None):
        self.residual = residual
        super().__init__(message)


class TrainingDivergedError(FnopeError, RuntimeError):
    """Training produced a non-finite loss; carries the last good parameters"""

    def __init__(self, message: str, checkpoint: Optional[dict] = None, epoch: Optional[int] = None):
        self.checkpoint = checkpoint
        self.epoch = epoch
        super().__init__(message)


class SamplerError(FnopeError, RuntimeError):
    """Posterior sampling failed for a specific test record"""

    def __init__(self, message: str, record_index: int):
        self.record_index = record_index
        super().__init__(f"record {record_index}: {message}")


class ConfigError(FnopeError, ValueError):
    """A configuration file or section is malformed"""


class UnknownNameError(FnopeError, KeyError):
    """A task or method name is not registered"""

    def __init__(self, kind: str, name: str, known: Sequence[str]):
        self.kind = kind
        self.name = name
        super().__init__(f"unknown {kind} '{name}'; registered: {', '.join(sorted(known))}")

    def __str__(self) -> str:
        return self.args[0]


class ArchiveError(FnopeError, IOError):
    """An archive on disk cannot be read"""


class ArchiveChecksumError(ArchiveError):
    """An array file does not match its manifest entry"""

    def __init__(self, array_name: str, detail: str):
        self.array_name = array_name
        super().__init__(f"array '{array_name}': {detail}")


class ArchiveVersionError(ArchiveError):
    """The manifest declares a schema version this code cannot read"""
