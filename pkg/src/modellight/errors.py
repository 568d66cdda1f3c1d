"""Exception types shared across the package."""


class ScenarioError(ValueError):
    """Raised when a scenario definition or file violates its constraints."""


class InvalidActionError(ValueError):
    """Raised when a policy emits an action outside the phase table."""


class NonFiniteError(ArithmeticError):
    """Raised when a numeric kernel produces NaN or Inf."""


class ModelDivergenceError(NonFiniteError):
    """Raised when a learned intersection model emits non-finite predictions."""


class CheckpointError(ValueError):
    """Raised when a parameter checkpoint cannot be read or is incompatible."""
