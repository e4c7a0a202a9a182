"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: ConfigError -> 2, ValidationError -> 3,
NumericError -> 4.
"""


class GsStyleError(Exception):
    pass


class ConfigError(GsStyleError):
    """Bad arguments, unknown presets/keys, missing files."""


class ValidationError(GsStyleError):
    """Inputs violate a documented precondition or invariant."""


class DegenerateMatchingError(ValidationError):
    """Every target group is empty; the style loss is undefined."""


class NumericError(GsStyleError):
    """A non-finite value appeared mid-computation."""
