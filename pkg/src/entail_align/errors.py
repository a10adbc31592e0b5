"""Exception types shared across the package."""


class DataError(Exception):
    """Problem with input data files or their contents."""


class ParseError(DataError):
    """A triple/link file line does not match the expected format."""


class EmptyKGError(DataError):
    """Both triple files of a knowledge graph are empty."""


class ConfigError(Exception):
    """An experiment configuration is invalid or inconsistent."""


class TrainingDivergedError(Exception):
    """A non-finite loss was produced during training."""


class InputTooLongError(ValueError):
    """Entity name tokens alone do not fit the token budget."""


class EncodingError(ValueError):
    """A sequence cannot be encoded (e.g. token id outside the vocabulary)."""
