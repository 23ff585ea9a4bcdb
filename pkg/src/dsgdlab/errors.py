"""Exception hierarchy shared by every module.

Each class carries the exit code the CLI maps it to.
"""


class DsgdLabError(Exception):
    exit_code = 1


class ContractError(DsgdLabError, ValueError):
    """A precondition or invariant of an operation was violated."""


class TopologyError(DsgdLabError, ValueError):
    """Invalid graph or weight configuration (too small, disconnected, ...)."""


class TopologyGenerationError(TopologyError):
    def __init__(self, message, attempts):
        super().__init__(message)
        self.attempts = attempts


class ConfigError(DsgdLabError, ValueError):
    """Problem or experiment configuration cannot be satisfied."""


class GenerationError(DsgdLabError, RuntimeError):
    """Random data generation exhausted its retry budget."""


class SolverError(DsgdLabError, RuntimeError):
    def __init__(self, message, grad_norm):
        super().__init__(message)
        self.grad_norm = grad_norm


class NumericalError(DsgdLabError, RuntimeError):
    """An iterative numerical routine failed to converge."""


class AssumptionError(DsgdLabError, ValueError):
    """A modelling assumption (e.g. positive definiteness) does not hold."""


class DivergenceError(DsgdLabError, RuntimeError):
    exit_code = 2

    def __init__(self, message, iteration, norm):
        super().__init__(message)
        self.iteration = iteration
        self.norm = norm


class FitError(DsgdLabError, ValueError):
    """A regression fit was refused (bad or missing data points)."""


class DegenerateReferenceError(DsgdLabError, ValueError):
    """The centralized reference curve is zero where a ratio is needed."""
