"""Exception types shared across the package."""


class ContractError(ValueError):
    """A caller violated a documented precondition."""


class NoRelevantPoints(ContractError):
    """Average precision was requested for a query with an empty relevant set."""


class EmptySide(ContractError):
    """A query decomposition has no positives or no negatives."""


class EmptyGradient(ContractError):
    """No query in the batch has a non-empty positive set."""


class DataFormatError(ValueError):
    """A dataset or checkpoint file does not match its documented format."""


class PlacementFailed(RuntimeError):
    """Synthetic class means could not be placed at the requested separation."""


class Diverged(RuntimeError):
    """Training produced a non-finite weight. Carries the offending step index."""

    def __init__(self, step: int):
        super().__init__(f"non-finite weights after update step {step}")
        self.step = step
