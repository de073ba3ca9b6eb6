"""Exception types raised across the package."""


class NonFiniteValueError(FloatingPointError):
    """A simulated quantity became NaN or infinite."""

    def __init__(self, step: int, node: int, message: str = ""):
        self.step = step
        self.node = node
        super().__init__(message or f"non-finite forward rate at step {step}, maturity node {node}")


class InsufficientTruncationError(ValueError):
    """Too few factors retained to expose the requested number of indices."""


class NonInjectiveError(ValueError):
    """Gamma has a (numerically) trivial kernel direction at the current truncation."""

    def __init__(self, message: str, directions=None, step: int | None = None):
        self.directions = directions
        self.step = step
        super().__init__(message)


class ConfigError(ValueError):
    """Aggregated configuration problems; ``issues`` holds one string per problem."""

    def __init__(self, issues: list[str]):
        self.issues = list(issues)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.issues))
