"""Exception taxonomy shared across the toolkit.

The CLI maps these onto exit codes, so raising the right class matters:
configuration/contract problems are user errors, training/synthesis
failures are numerical, missing artifacts are dependency errors.
"""


class UapkitError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(UapkitError):
    """Unknown dataset, architecture, layer id, or malformed config."""


class ContractViolation(UapkitError):
    """A documented precondition was violated (shapes, ranges, emptiness)."""


class TrainingError(UapkitError):
    """Optimization diverged (NaN/Inf loss) while training a model."""


class SynthesisError(UapkitError):
    """Class-impression optimization produced NaN/Inf pixels."""


class DependencyError(UapkitError):
    """A required upstream artifact (checkpoint, manifest) is missing."""
