"""Exception types shared across the package."""


class MMBertError(Exception):
    """Base class for package errors."""


class ShapeError(MMBertError, ValueError):
    """Tensor shapes incompatible for an operation."""


class ConfigError(MMBertError, ValueError):
    """Invalid configuration value."""


class VocabError(MMBertError, ValueError):
    """Token or phoneme id outside the vocabulary."""


class SequenceLengthError(MMBertError, ValueError):
    """Assembled sequence exceeds the configured maximum length."""


class GenerationError(MMBertError, RuntimeError):
    """Corpus generation cannot satisfy its constraints."""


class PerturbSkip(MMBertError):
    """Sample has no token eligible for the requested perturbation."""


class CheckpointError(MMBertError, RuntimeError):
    """Checkpoint file is corrupt or has an unsupported version."""


class StageDependencyError(MMBertError, RuntimeError):
    """A training stage was requested without its prerequisite checkpoint."""


class StateError(MMBertError, RuntimeError):
    """Operation invoked in an invalid state (e.g. consumed tape, disabled capture)."""
