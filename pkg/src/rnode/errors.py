"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid sizes, step counts, parameter vectors or config documents."""


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class DomainError(ValueError):
    """An argument lies outside the domain an operation is defined on."""


class ContractError(ValueError):
    """A caller broke an operation's precondition (e.g. non-scalar backward)."""


class NonFiniteError(FloatingPointError):
    """A tensor operation produced NaN or Inf."""


class InstabilityError(ArithmeticError):
    """Integration blew up. Carries the time and step size where it happened."""

    def __init__(self, message, t=None, h=None):
        super().__init__(message)
        self.t = t
        self.h = h


class StiffnessError(InstabilityError):
    """Adaptive step size underflowed."""


class BudgetError(RuntimeError):
    """Adaptive solver exceeded its step budget."""


class TrainingError(RuntimeError):
    """A training step failed; carries where and the last Jacobian-norm reading."""

    def __init__(self, message, epoch=None, batch_index=None, frobenius=None,
                 field=None, history=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch_index = batch_index
        self.frobenius = frobenius
        self.field = field
        self.history = history
