"""Exception hierarchy shared by all modules."""


class ManifoldSDEError(Exception):
    """Base class for all library errors."""


class ParameterError(ManifoldSDEError, ValueError):
    """Invalid parameter value or combination."""


class DegenerateInputError(ManifoldSDEError, ValueError):
    pass


class OutOfDomainError(ManifoldSDEError, ValueError):
    pass


class ParseError(ManifoldSDEError, ValueError):
    """Malformed input file. ``line`` is 1-based."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConnectivityError(ManifoldSDEError):
    """A node has no neighbours under the hard-cutoff kernel."""

    def __init__(self, node, min_bandwidth):
        super().__init__(
            f"node {node} is isolated; bandwidth >= {min_bandwidth:.17g} would connect it"
        )
        self.node = node
        self.min_bandwidth = min_bandwidth


class NumericalError(ManifoldSDEError, ArithmeticError):
    pass


class DivergenceError(ManifoldSDEError, ArithmeticError):
    """Simulation state became non-finite or left the admissible region."""

    def __init__(self, step, state, path=None):
        where = f"path {path}, " if path is not None else ""
        super().__init__(f"divergence at {where}step {step}: state={state}")
        self.step = step
        self.state = state
        self.path = path
