"""Exception hierarchy shared by every stage of the pipeline."""


class StainlabError(Exception):
    """Base class. ``exit_code`` is what the CLI returns when this escapes."""

    exit_code = 3


class ArgumentError(StainlabError, ValueError):
    exit_code = 2


class ConfigError(StainlabError):
    exit_code = 2


class SchemaError(StainlabError):
    exit_code = 2


class DecodeError(StainlabError):
    exit_code = 3


class CapacityError(StainlabError):
    exit_code = 3


class EstimationError(StainlabError):
    exit_code = 3


class ConditioningError(StainlabError):
    exit_code = 4


class NumericalError(StainlabError):
    exit_code = 4


class TrainingError(NumericalError):
    pass


class MissingInputError(StainlabError):
    exit_code = 3
