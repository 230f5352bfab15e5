"""Exception types shared across the package."""


class DimensionError(ValueError):
    """An input has the wrong length or shape."""


class NumericError(ArithmeticError):
    """An input or intermediate value is non-finite."""


class DomainError(ValueError):
    """A scalar argument lies outside its valid domain."""


class BehindCameraError(ValueError):
    """Points at or behind the near plane were passed to a projection."""

    def __init__(self, indices, z_min):
        self.indices = list(indices)
        super().__init__(f"{len(self.indices)} point(s) with z <= {z_min}: indices {self.indices[:20]}")


class EmptyCloudError(ValueError):
    """A point cloud that must be non-empty is empty."""


class SchemaError(ValueError):
    """A structured text file does not follow its schema."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class ConfigError(ValueError):
    """A configuration cannot be satisfied."""


class DatasetError(IOError):
    """A dataset on disk is missing, stale or corrupt."""


class StaleDatasetError(DatasetError):
    """Dataset manifest does not match the robot model in use."""


class ChecksumError(DatasetError):
    """A dataset record failed its checksum."""

    def __init__(self, index, path=None):
        self.index = index
        super().__init__(f"checksum mismatch in record {index}" + (f" ({path})" if path else ""))


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
