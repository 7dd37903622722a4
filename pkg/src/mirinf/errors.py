"""Exception hierarchy.

Configuration problems map to CLI exit code 1, numerical failures to exit code 2.
"""


class MirinfError(Exception):
    pass


class ConfigError(MirinfError, ValueError):
    pass


class DataError(ConfigError):
    """Malformed or inconsistent dataset input."""


class EmptyBatchError(MirinfError, ValueError):
    def __init__(self, msg="empty batch"):
        super().__init__(msg)


class UnsupportedSpecError(MirinfError, TypeError):
    pass


class NumericalError(MirinfError, ArithmeticError):
    pass


class ConvergenceError(NumericalError):
    def __init__(self, grad_norm, iters):
        self.grad_norm = float(grad_norm)
        self.iters = int(iters)
        super().__init__(
            f"no convergence after {iters} iterations (final grad norm {grad_norm:.3e})"
        )


class DivergenceError(NumericalError):
    def __init__(self, step, msg=None):
        self.step = int(step)
        super().__init__(msg or f"diverged at step {step}")


class LissaDivergedError(DivergenceError):
    def __init__(self, depth):
        super().__init__(depth, f"lissa diverged at depth {depth}")


class SolveError(NumericalError):
    pass
