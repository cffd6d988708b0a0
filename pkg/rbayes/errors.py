class RBayesError(Exception):
    """Base class for every error raised by rbayes."""


class DomainError(RBayesError, ValueError):
    """A value falls outside the domain of the requested operation."""


class ConfigError(RBayesError, ValueError):
    """Invalid user configuration (bad flags, unknown ids, malformed files)."""


class UnsupportedMomentError(DomainError):
    pass


class InvalidExperimentError(DomainError):
    pass


class GroupTooLargeError(RBayesError):
    pass


class GroupStructureError(RBayesError):
    """Gate set is not a group (missing product, identity or inverse)."""


class ConsistencyError(RBayesError):
    """Internal numerical result violates a hard invariant."""


class EnumerationCapError(RBayesError):
    pass


class DegenerateLeakageError(DomainError):
    pass


class ConstraintInfeasibleError(RBayesError):
    pass


class InitializationError(RBayesError):
    pass


class FitError(RBayesError):
    def __init__(self, message: str, trace: list[str] | None = None) -> None:
        self.trace = trace or []
        detail = "\n".join(self.trace)
        super().__init__(f"{message}\n{detail}" if detail else message)
