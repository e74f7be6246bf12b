"""Exception hierarchy shared by every service and command."""

from typing import Any, Dict, Optional, Sequence, Tuple


class PPFEError(Exception):
    """Base class for all library errors"""

    def to_dict(self) -> Dict[str, Any]:
        return {"error": type(self).__name__, "message": str(self)}


class DimensionMismatchError(PPFEError, ValueError):
    def __init__(self, operation: str, *shapes: Sequence[int]):
        self.operation = operation
        self.shapes: Tuple[Tuple[int, ...], ...] = tuple(tuple(s) for s in shapes)
        rendered = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{operation}: incompatible shapes {rendered}")


class NonFiniteError(PPFEError, ValueError):
    pass


class ConvergenceError(PPFEError, RuntimeError):
    def __init__(self, iterations: int, off_diagonal: float):
        self.iterations = iterations
        self.off_diagonal = off_diagonal
        super().__init__(
            f"Jacobi SVD did not converge after {iterations} sweeps "
            f"(largest relative off-diagonal {off_diagonal:.3e})"
        )


class RankError(PPFEError, ValueError):
    pass


class StaleCacheError(PPFEError, RuntimeError):
    pass


class TrainingDivergedError(PPFEError, RuntimeError):
    def __init__(self, client_id: int, round_index: int, epoch: int, loss: float):
        self.client_id = client_id
        self.round_index = round_index
        super().__init__(
            f"Non-finite training loss {loss} on client {client_id} "
            f"(round {round_index}, epoch {epoch})"
        )


class AggregationError(PPFEError, ValueError):
    pass


class DatasetError(PPFEError, ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)

    def to_dict(self) -> Dict[str, Any]:
        payload = super().to_dict()
        payload["line"] = self.line
        return payload


class EmptyDatasetError(DatasetError):
    def __init__(self, path: str):
        super().__init__(f"empty dataset: {path}")


class PartitionError(PPFEError, ValueError):
    pass


class SingularSystemError(PPFEError, ArithmeticError):
    pass


class CheckpointError(PPFEError, ValueError):
    pass


class ConfigError(PPFEError, ValueError):
    def __init__(self, pointer: str, message: str):
        self.pointer = pointer or "/"
        super().__init__(f"{self.pointer}: {message}")

    def to_dict(self) -> Dict[str, Any]:
        payload = super().to_dict()
        payload["pointer"] = self.pointer
        return payload
