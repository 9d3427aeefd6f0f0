"""Exception hierarchy shared across the package."""


class DbnError(Exception):
    """Base class for all errors raised by dbnmon."""


class ModelValidationError(DbnError, ValueError):
    """A model violates one or more structural invariants."""

    def __init__(self, violations):
        self.violations = list(violations)
        lines = "\n".join(f"  - {v}" for v in self.violations)
        super().__init__(f"invalid model ({len(self.violations)} violation(s)):\n{lines}")


class ModelFormatError(DbnError, ValueError):
    """A model, trajectory or clustering file could not be parsed."""


class InferenceError(DbnError, RuntimeError):
    """Base class for runtime failures of a filter."""


class ImpossibleEvidenceError(InferenceError):
    """The observations have zero probability under the current belief."""


class ParticleDepletionError(InferenceError):
    """Every particle received zero weight."""


class JoinBlowupError(InferenceError):
    """An equijoin would produce more rows than the configured cap."""


class EmptyJoinError(InferenceError):
    """Sample-join preprocessing pruned every row of some cluster."""


class JointTooLargeError(InferenceError):
    """A dense joint distribution exceeds the enumeration cap."""
