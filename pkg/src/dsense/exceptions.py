"""Exception and warning types shared across the package."""


class DsenseError(Exception):
    """Base class for all errors raised by dsense."""


class ConfigError(DsenseError, ValueError):
    """Invalid or inconsistent run configuration."""


class ParameterError(DsenseError, ValueError):
    """A sensitivity or tuning parameter is outside its legal range."""


class SchemaError(DsenseError, KeyError):
    """A column named by the schema is missing from the input."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class DataValidationError(DsenseError, ValueError):
    """Input values violate a domain constraint (e.g. non-binary treatment)."""


class DegenerateDataError(DsenseError, ValueError):
    """Too few units, or an arm is empty, for the requested computation."""


class SingularDesignError(DsenseError, ValueError):
    """Design matrix is rank deficient."""


class NumericalError(DsenseError, ArithmeticError):
    """A numerical routine failed to produce a usable answer."""


class SeparationWarning(UserWarning):
    """Logistic fit hit (quasi-)complete separation."""


class OverlapWarning(UserWarning):
    """Fitted propensities reached the clamp boundary."""


class BootstrapWarning(UserWarning):
    """Bootstrap settings or replicates need attention."""


class PlanningWarning(UserWarning):
    """Planning sample is small or some splits failed."""
