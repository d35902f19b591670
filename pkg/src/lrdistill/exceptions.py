"""Exception hierarchy shared by every module of the package."""


class LRDistillError(Exception):
    """Base class for all errors raised by lrdistill."""


class ShapeError(LRDistillError, ValueError):
    """Operand shapes do not conform to an op's shape rule."""

    def __init__(self, op, *shapes, detail=""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        shown = " vs ".join(str(s) for s in self.shapes)
        msg = f"{op}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DivisionGuardError(LRDistillError, ZeroDivisionError):
    """Normalization of a zero vector with the guard disabled."""


class BackwardError(LRDistillError, RuntimeError):
    """Misuse of reverse-mode differentiation (non-scalar loss, replayed tape)."""


class FormatError(LRDistillError, ValueError):
    """A file does not follow its declared binary or text format."""


class ConfigMismatchError(LRDistillError, ValueError):
    """A checkpoint was produced under a different model configuration."""


class PreconditionError(LRDistillError, ValueError):
    """Inputs violate a documented precondition of an operation."""


class NumericalError(LRDistillError, ArithmeticError):
    """Non-finite values appeared during optimization."""


class BackboneDriftError(LRDistillError, RuntimeError):
    """Frozen backbone parameters changed during head training."""


class MissingRecordError(LRDistillError, KeyError):
    """A lookup by sample id found no record."""

    def __str__(self):
        return str(self.args[0]) if self.args else "missing record"
