"""Exception types shared across the package.

Each carries the CLI exit code it maps to.
"""


class AcofiError(Exception):
    exit_code = 1
    kind = "Error"


class ConfigError(AcofiError, ValueError):
    exit_code = 2
    kind = "ConfigError"


class HeaderMismatch(AcofiError, ValueError):
    exit_code = 2
    kind = "HeaderMismatch"


class NonConvergence(AcofiError, RuntimeError):
    exit_code = 3
    kind = "NonConvergence"

    def __init__(self, residual: float, iterations: int):
        super().__init__(f"residual {residual:.3e} after {iterations} iterations")
        self.residual = residual
        self.iterations = iterations


class TheoremCheckFailed(AcofiError):
    exit_code = 4
    kind = "TheoremCheckFailed"


class MalformedTrace(AcofiError, ValueError):
    exit_code = 5
    kind = "MalformedTrace"


class EmptyInput(AcofiError, ValueError):
    kind = "EmptyInput"
