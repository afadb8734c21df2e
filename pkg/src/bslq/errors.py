class BSLQError(Exception):
    """Base class for all errors raised by this package."""


class StructureError(BSLQError, ValueError):
    """Dimensions or shapes are inconsistent."""


class SpecParseError(StructureError):
    """A problem file could not be parsed; ``location`` names the field or line."""

    def __init__(self, message: str, location: str | None = None):
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)


class AssumptionError(BSLQError):
    """The problem violates the standing convexity assumptions."""

    def __init__(self, report):
        self.report = report
        super().__init__("; ".join(v.message for v in report.violations))


class NumericalError(BSLQError, ArithmeticError):
    """A factorization failed or a matrix was numerically singular."""

    def __init__(self, message: str, stage: str | None = None, step: int | None = None,
                 condition: float | None = None):
        self.stage = stage
        self.step = step
        self.condition = condition
        parts = [message]
        if stage:
            parts.insert(0, f"[{stage}]")
        if step is not None:
            parts.append(f"(k={step}")
            parts[-1] += f", cond={condition:.3e})" if condition is not None else ")"
        super().__init__(" ".join(parts))


class DepthError(BSLQError, ValueError):
    """Tree depth or QP size exceeds the configured cap."""
