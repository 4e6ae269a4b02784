"""Exception hierarchy.

Every error raised by the library derives from :class:`BridgeError`. The two
branches map onto the CLI exit codes: :class:`ValidationError` (bad input,
exit 1) and :class:`SolverError` (numerical failure, exit 2).
"""


class BridgeError(Exception):
    """Base class. ``stage`` names the pipeline step that failed, if known."""

    stage = None

    def with_stage(self, stage):
        self.stage = stage
        if self.args:
            self.args = (f"[{stage}] {self.args[0]}",) + self.args[1:]
        return self


class ValidationError(BridgeError, ValueError):
    pass


class ArgumentOrderError(ValidationError):
    pass


class EmptyIntervalError(ValidationError):
    pass


class NotPositiveSemidefiniteError(ValidationError):
    pass


class SolverError(BridgeError, ArithmeticError):
    pass


class QuadratureResolutionError(SolverError):
    pass


class RiccatiBlowUpError(SolverError):
    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class UncontrollableError(SolverError):
    pass


class DegenerateConfigurationError(SolverError):
    pass


class EndpointMismatchError(SolverError):
    pass


class UnderResolvedKernelError(SolverError):
    def __init__(self, message, required_spacing=None):
        super().__init__(message)
        self.required_spacing = required_spacing


class NonConvergenceError(SolverError):
    def __init__(self, message, last_gap=None):
        super().__init__(message)
        self.last_gap = last_gap


class NumericalUnderflowError(SolverError):
    pass


class SimulationBlowUpError(SolverError):
    def __init__(self, message, path=None, step=None):
        super().__init__(message)
        self.path = path
        self.step = step
