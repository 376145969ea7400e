"""
Exception types raised across the pipeline.

Every error carries the process exit code the command line maps it to:
1 for configuration/validation problems, 3 for runtime and data problems.
"""


class BirdIdError(Exception):
    exit_code = 3


class ConfigError(BirdIdError, ValueError):
    exit_code = 1

    def __init__(self, key, message):
        super().__init__("config key '{}': {}".format(key, message))
        self.key = key


class ParameterError(BirdIdError, ValueError):
    pass


class WavFormatError(BirdIdError, ValueError):
    pass


class UnsupportedFormatError(BirdIdError, ValueError):
    pass


class EmptySignalError(BirdIdError, ValueError):
    pass


class SampleRateError(BirdIdError, ValueError):
    pass


class SignalTooShortError(BirdIdError, ValueError):
    pass


class InvalidSynthSpecError(BirdIdError, ValueError):
    pass


class InsufficientSamplesError(BirdIdError, ValueError):

    def __init__(self, class_name, count, required):
        super().__init__("class '{}' has {} entries, at least {} required".format(
            class_name, count, required))
        self.class_name = class_name


class DatasetError(BirdIdError, ValueError):
    pass


class ShapeError(BirdIdError, ValueError):
    pass


class LabelError(BirdIdError, ValueError):
    pass


class AlignmentError(BirdIdError, ValueError):
    pass


class ProtocolError(BirdIdError, ValueError):
    pass


class EvaluationError(BirdIdError, ValueError):
    pass


class FeatureFormatError(BirdIdError, ValueError):
    pass


class UnknownKeyError(BirdIdError, KeyError):
    pass


class DimensionError(BirdIdError, ValueError):
    pass


class CheckpointFormatError(BirdIdError, ValueError):
    pass


class SpectrogramFormatError(BirdIdError, ValueError):
    pass
