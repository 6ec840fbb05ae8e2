"""Exception types shared across the package.

Each maps to a CLI exit code in cli.py; library code raises, never exits.
"""


class MvfhnError(Exception):
    """Base class for all package errors."""


class StructuralError(MvfhnError):
    """Mismatched grids, incompatible shapes, or malformed containers."""


class CapacityError(MvfhnError):
    """Problem size exceeds the exact solver cap; caller should switch to
    the entropic solver."""


class EvaluationError(MvfhnError):
    """A coefficient callable returned a non-finite value.  Carries the
    witness point in ``args[1]`` when available."""


class IntegrabilityError(MvfhnError):
    """A forcing integral keeps growing with the quadrature window,
    signalling a divergent (non-integrable) forcing history."""


class BlowUpError(MvfhnError):
    """The integrator produced a non-finite state.  ``step_index`` records
    where."""

    def __init__(self, msg, step_index=None):
        super().__init__(msg)
        self.step_index = step_index


class InterpolationRangeError(MvfhnError):
    """A frozen law path was queried outside its time domain."""


class CalibrationRequiredError(MvfhnError):
    """An operation needs a fitted constant that has not been computed."""


class ConfigError(MvfhnError):
    """Bad key, bad value, or unparsable run configuration."""
