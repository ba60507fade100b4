"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class FrpError(Exception):
    exit_code = 1
    kind = "error"


class ConfigError(FrpError):
    """Bad configuration, usage, or shape mismatch between weights and inputs."""

    exit_code = 1
    kind = "config"


class DataError(FrpError):
    exit_code = 2
    kind = "data"


class GeometryError(DataError):
    kind = "geometry"


class FormatError(DataError):
    """Corrupt or incompatible weight / annotation file."""

    kind = "format"


class TrainingError(FrpError):
    """Non-finite loss during optimisation. ``step`` is the epoch or step index."""

    exit_code = 3
    kind = "numeric"

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
