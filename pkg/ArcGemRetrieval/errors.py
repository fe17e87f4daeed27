""" ArcGemRetrieval.errors

    Exceptions raised by ArcGemRetrieval.

    Every exception derives from ArcGemError and, where one fits, from the matching builtin so that
        callers catching ValueError (or RuntimeError) keep working.
"""

class ArcGemError(Exception):
    """ Base class for all ArcGemRetrieval errors """

class DimensionError(ArcGemError, ValueError):
    """ Raised when tensor shapes do not agree """

class ConfigError(ArcGemError, ValueError):
    """ Raised for invalid configuration values or unknown configuration keys

        :param key: The offending key, if known
        :type key: str, optional

        :param line: The line (or "<cli>") the key was read from, if known
        :type line: Union[int, str], optional
    """
    def __init__(self, message, key = None, line = None):
        self.key = key
        self.line = line
        location = []
        if key is not None: location.append(f"key '{key}'")
        if line is not None: location.append(f"line {line}")
        if location:
            message = f"{message} ({', '.join(location)})"
        super().__init__(message)

class ResolutionError(ArcGemError, ValueError):
    """ Raised when a render resolution is too small """

class CropError(ArcGemError, ValueError):
    """ Raised when a crop window does not fit inside its source """

class AugmentationError(ArcGemError, ValueError):
    """ Raised when a training augmentation cannot be applied """

class DomainError(ArcGemError, ValueError):
    """ Raised when an input lies outside an operation's mathematical domain """

class DataError(ArcGemError, ValueError):
    """ Raised for inconsistent data (labels out of range, empty splits...) """

class UsageError(ArcGemError, RuntimeError):
    """ Raised when an API is called out of order (for instance with a stale forward cache) """

class OptimizerError(ArcGemError, ValueError):
    """ Raised when parameters, gradients and optimizer state do not line up """

class ScheduleError(ArcGemError, ValueError):
    """ Raised for learning rate schedule queries outside the schedule """

class OracleError(ArcGemError, ArithmeticError):
    """ Raised by the finite difference oracle when the function is not finite

        :param coordinate: The multi-index of the perturbed coordinate
        :type coordinate: tuple
    """
    def __init__(self, message, coordinate = None):
        self.coordinate = coordinate
        super().__init__(message)

class TrainingAborted(ArcGemError, RuntimeError):
    """ Raised when a training batch produces a non-finite loss """
    def __init__(self, epoch, batch, loss):
        self.epoch, self.batch, self.loss = epoch, batch, loss
        super().__init__(f"Training aborted: non-finite loss {loss} at epoch {epoch}, batch {batch}")

class StageFailed(ArcGemError, RuntimeError):
    """ Raised by run_recipe when one of its stages fails; the original error is chained """
    def __init__(self, stage_index, cause):
        self.stage_index = stage_index
        super().__init__(f"Stage {stage_index} failed: {cause}")

class AlignmentError(ArcGemError, ValueError):
    """ Raised when two descriptor sets do not share the same id sequence

        :param position: Index of the first diverging id
        :type position: int
    """
    def __init__(self, message, position = None):
        self.position = position
        super().__init__(message)

class InputError(ArcGemError, ValueError):
    """ Raised for malformed ranking inputs """

class EvaluationError(ArcGemError, ValueError):
    """ Raised when results cannot be scored """

class FormatError(ArcGemError, ValueError):
    """ Raised when a binary file has the wrong magic, an unsupported version, or is truncated """
