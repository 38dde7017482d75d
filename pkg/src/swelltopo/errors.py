"""Exception hierarchy. Each class carries the CLI exit code of its failure class."""


class SwellTopoError(Exception):
    exit_code = 1


class ConfigError(SwellTopoError):
    exit_code = 2

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class InvalidDesignError(SwellTopoError, ValueError):
    exit_code = 2


class DomainError(SwellTopoError, ValueError):
    pass


class BracketError(SwellTopoError):
    """No sign change of the swelling residual over the bisection bracket."""

    exit_code = 3


class SingularEquilibriumError(SwellTopoError):
    exit_code = 4

    def __init__(self, msg, index=None):
        self.index = index
        super().__init__(msg)


class InvertedElementError(SwellTopoError):
    exit_code = 3


class NonConvergenceError(SwellTopoError):
    exit_code = 3

    def __init__(self, msg, u=None, history=None, step=None):
        self.u = u
        self.history = history or []
        self.step = step
        super().__init__(msg)


class AdjointError(SwellTopoError):
    exit_code = 4


class ContractViolation(SwellTopoError, ValueError):
    exit_code = 2


class OutputError(SwellTopoError):
    """Unreadable input artifact or failed write."""

    exit_code = 5
