"""Shared exception types."""


class ContractViolation(ValueError):
    """An operation was called with arguments that violate its contract."""


class ConfigurationError(ValueError):
    """A configuration value is invalid or inconsistent."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite parameter value.

    Carries the local step index at which the divergence was detected.
    """

    def __init__(self, step: int, detail: str = ""):
        self.step = step
        msg = f"non-finite parameters at local step {step}"
        if detail:
            msg = f"{msg}: {detail}"
        super().__init__(msg)
