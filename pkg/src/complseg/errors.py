"""Exception types shared across the package."""


class ComplsegError(Exception):
    """Base class for all errors raised by complseg."""


class ShapeMismatch(ComplsegError, ValueError):
    pass


class OverlappingPositives(ComplsegError, ValueError):
    def __init__(self, class_a, class_b, pixel):
        self.class_a = class_a
        self.class_b = class_b
        self.pixel = tuple(int(v) for v in pixel)
        super().__init__(
            f"classes {class_a!r} and {class_b!r} are both positive at pixel {self.pixel}"
        )


class UnknownClass(ComplsegError, KeyError):
    pass


class SchemaError(ComplsegError, ValueError):
    pass


class MissingFile(ComplsegError, FileNotFoundError):
    def __init__(self, path):
        self.path = str(path)
        super().__init__(f"missing file: {self.path}")


class NotFullyLabeled(ComplsegError, ValueError):
    pass


class ConfigError(ComplsegError, ValueError):
    pass


class EmptySplit(ComplsegError, ValueError):
    pass


class NoPositives(ComplsegError, ValueError):
    def __init__(self, class_name):
        self.class_name = class_name
        super().__init__(f"class {class_name!r} has no positive pixels")


class IncompleteBundle(ComplsegError, ValueError):
    pass


class CorruptCheckpoint(ComplsegError, ValueError):
    pass


class MissingSubset(ComplsegError, KeyError):
    pass


class EmptyInput(ComplsegError, ValueError):
    pass


class TooFewPairs(ComplsegError, ValueError):
    pass


class TrainingDiverged(ComplsegError, RuntimeError):
    pass
