"""Shared exception types.

Contract violations raise rather than returning sentinel values so the CLI
can map them to nonzero exit codes.
"""


class ContractError(ValueError):
    """A documented precondition or invariant was violated by the caller."""


class ShapeError(ContractError):
    """Operand shapes do not conform to a primitive's contract."""

    def __init__(self, primitive: str, detail: str):
        super().__init__(f"{primitive}: {detail}")
        self.primitive = primitive


class DomainError(ValueError):
    """A numeric operation was applied outside its documented domain."""


class TrainingFailure(RuntimeError):
    """Model pretraining finished below the required accuracy floor."""

    def __init__(self, accuracy: float, floor: float):
        super().__init__(
            f"pretraining reached held-out accuracy {accuracy:.4f}, below the "
            f"required floor {floor:.2f}"
        )
        self.accuracy = accuracy
        self.floor = floor
