"""Exception types shared across the package."""


class DeskvarError(Exception):
    """Base class for all package-specific errors."""


class BadMagicError(DeskvarError):
    """File does not start with the expected magic bytes."""


class ShapeMismatchError(DeskvarError):
    """Array or file dimensions are inconsistent."""


class NonFiniteValueError(DeskvarError):
    """A value that must be finite is NaN or infinite."""


class EmptySlotError(DeskvarError):
    """A climatology slot received no samples."""


class NonFiniteBlowupError(DeskvarError):
    """Integration produced values beyond the stability bound."""


class NonFiniteLossError(DeskvarError):
    """Training loss became NaN or infinite."""


class NonFiniteCostError(DeskvarError):
    """Cost function evaluation became NaN or infinite."""


class NonFiniteGradientError(DeskvarError):
    """Gradient evaluation became NaN or infinite."""


class LineSearchFailedError(DeskvarError):
    """Backtracking line search exhausted its budget."""


class MissingModelError(DeskvarError):
    """An enabled assimilation stream has no trained model."""


class NonFiniteStateError(DeskvarError):
    """A cycling run produced a non-finite state."""


class EmptyEvalError(DeskvarError):
    """Verification was asked to score an empty evaluation set."""


class DegenerateAnomalyError(DeskvarError):
    """Anomaly correlation is undefined because an anomaly norm is zero."""


class NeverSkillfulError(DeskvarError):
    """Skill score is below threshold already at the first lead."""


class ConfigError(DeskvarError):
    """Experiment configuration is invalid; message carries the field path."""
