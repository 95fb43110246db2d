"""Exception hierarchy.

Two families matter to callers: ``ValidationError`` (bad input, CLI exit 2)
and ``NumericalError`` (a solver or simulation failed, CLI exit 3).
"""


class RhomogError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(RhomogError):
    pass


class NumericalError(RhomogError):
    pass


# -- expression language ----------------------------------------------------

class ParseError(ValidationError):
    def __init__(self, message, position=None, field=None):
        self.message = message
        self.position = position
        self.field = field
        where = []
        if field is not None:
            where.append(f"field {field}")
        if position is not None:
            where.append(f"offset {position}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(f"{message}{suffix}")

    def with_field(self, field):
        return type(self)(self.message, self.position, field)


class UnexpectedCharacter(ParseError):
    pass


class MalformedNumber(ParseError):
    pass


class UnexpectedToken(ParseError):
    pass


class UnknownFunction(ParseError):
    pass


class BadArity(ParseError):
    pass


class VariableOutOfRange(ParseError):
    pass


class UnknownVariable(ParseError):
    pass


class TrailingInput(ParseError):
    pass


class EvalError(NumericalError):
    pass


class DivisionByZero(EvalError):
    pass


class DomainError(EvalError):
    pass


class UnboundVariable(EvalError):
    pass


# -- geometry / problem -----------------------------------------------------

class DegeneratePoint(NumericalError):
    pass


class SchemaError(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class NonNegativeBeta(ValidationError):
    pass


# -- cell problem -----------------------------------------------------------

class SolverDiverged(NumericalError):
    pass


class CenteringViolated(ValidationError):
    pass


class NonEllipticEffective(NumericalError):
    pass


class NoBoundaryMass(NumericalError):
    pass


# -- forward simulation -----------------------------------------------------

class StepSizeTooLarge(ValidationError):
    pass


class NonFiniteState(NumericalError):
    pass


class TangentialReflection(NumericalError):
    pass


# -- backward solvers / pde -------------------------------------------------

class SingularRegression(NumericalError):
    pass


class ObstacleInconsistent(ValidationError):
    pass


class SORDiverged(NumericalError):
    pass


class NewtonDiverged(NumericalError):
    pass
