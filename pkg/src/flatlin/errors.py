"""Exception hierarchy shared by all flatlin modules."""


class FlatlinError(Exception):
    """Base class for every error raised by flatlin."""


# -- expressions -------------------------------------------------------------

class ExprError(FlatlinError):
    pass


class ParseError(ExprError):
    def __init__(self, message, text="", position=None):
        self.text = text
        self.position = position
        if position is not None:
            message = f"{message} at position {position}"
        super().__init__(message)


class NonIntegerExponentError(ParseError):
    pass


class EvaluationError(ExprError):
    pass


class UnboundVariableError(EvaluationError):
    def __init__(self, names):
        self.names = tuple(sorted(names))
        super().__init__("unbound variable(s): " + ", ".join(self.names))


# -- jets ----------------------------------------------------------------------

class MultiIndexError(FlatlinError):
    pass


class OrderOverflowError(FlatlinError):
    pass


# -- mechanics -----------------------------------------------------------------

class MechanicsError(FlatlinError):
    pass


class NonSymmetricMetricError(MechanicsError):
    def __init__(self, i, j):
        self.entry = (i, j)
        super().__init__(f"metric is not symmetric: entry [{i + 1},{j + 1}] differs from [{j + 1},{i + 1}]")


class SingularMassMatrixError(MechanicsError):
    pass


class InvalidPromotionError(MechanicsError):
    pass


class EquilibriumNotFoundError(MechanicsError):
    pass


# -- flatness / feedback ---------------------------------------------------------

class FlatnessError(FlatlinError):
    pass


class ParameterizationError(FlatnessError):
    """The supplied parameterization does not satisfy the equations of motion."""


class OrderBoundError(FlatnessError):
    pass


class FeedbackError(FlatlinError):
    pass


class ConvergenceError(FeedbackError):
    def __init__(self, message, residual=float("nan"), sigma_min=float("nan")):
        self.residual = residual
        self.sigma_min = sigma_min
        super().__init__(f"{message} (residual={residual:.3e}, sigma_min={sigma_min:.3e})")


class SingularJacobianError(FeedbackError):
    pass


class BranchSwitchError(FeedbackError):
    pass


class SimulationError(FlatlinError):
    def __init__(self, message, time=None):
        self.time = time
        if time is not None:
            message = f"{message} (t={time:.6g})"
        super().__init__(message)


class ConfigError(FlatlinError):
    def __init__(self, message, path=None):
        self.path = path
        if path:
            message = f"{path}: {message}"
        super().__init__(message)
