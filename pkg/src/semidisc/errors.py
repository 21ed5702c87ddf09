"""Exception types shared across the package."""


class ParseError(ValueError):
    """Malformed expression text.

    Carries the byte offset of the failure and a hint naming what the
    parser expected there.
    """

    def __init__(self, message, offset, expected=None):
        self.offset = offset
        self.expected = expected
        hint = f" (expected {expected})" if expected else ""
        super().__init__(f"{message} at offset {offset}{hint}")


class UnboundVariable(KeyError):
    """Expression evaluation hit a variable missing from the environment."""

    def __init__(self, name):
        self.name = name
        super().__init__(name)

    def __str__(self):
        return f"unbound variable '{self.name}'"


class UnknownVariable(ValueError):
    """An expression references a variable not declared for this context."""


class DomainError(ArithmeticError):
    """Evaluation left the real domain (division by zero, sqrt of a negative, ...)."""


class GridMismatch(ValueError):
    """Sampled curves do not share a common uniform grid."""


class InconsistentForce(RuntimeError):
    """No consistent acceleration exists: the force has a component in the
    cokernel of the velocity Hessian, so the dynamics are undefined at this
    state (a constraint violation for degenerate chains)."""

    def __init__(self, consistency, message=None):
        self.consistency = consistency
        super().__init__(
            message or f"force incompatible with singular mass matrix "
            f"(inconsistency norm {consistency:.3e})"
        )


class SingularLegendre(RuntimeError):
    """Velocity Hessian is numerically singular; momenta cannot be inverted."""


class NotVelocityAffine(RuntimeError):
    """Momenta are not affine in the velocities, so the linear projection
    of initial velocities does not apply."""


class NewtonDivergence(RuntimeError):
    """Newton iteration failed to reach tolerance within the iteration cap."""

    def __init__(self, residual_norm, iterations, message=None):
        self.residual_norm = residual_norm
        self.iterations = iterations
        super().__init__(
            message or f"Newton did not converge: |residual| = "
            f"{residual_norm:.3e} after {iterations} iterations"
        )


class SingularJacobian(RuntimeError):
    """Newton linear system is singular and inconsistent beyond tolerance."""


class ConfigError(ValueError):
    """Invalid run configuration; names the offending key."""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")


class StepFailure(RuntimeError):
    """A time stepper failed; records the step index and the original error."""

    def __init__(self, step, cause):
        self.step = step
        self.cause = cause
        super().__init__(f"step {step}: {type(cause).__name__}: {cause}")
