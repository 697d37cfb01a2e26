class RetouchError(Exception):
    pass


class ContractViolation(RetouchError, ValueError):
    """Tensor shape or range does not match what the configuration implies."""


class ConfigError(RetouchError, ValueError):
    pass


class CheckpointError(RetouchError):
    def __init__(self, message, problems=None):
        self.problems = dict(problems or {})
        if self.problems:
            details = "\n".join(f"  {name}: {why}" for name, why in sorted(self.problems.items()))
            message = f"{message}\n{details}"
        super().__init__(message)


class NumericError(RetouchError, FloatingPointError):
    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}
