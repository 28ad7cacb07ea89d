"""Package-wide exception types (tensor-level errors live in tensor.py)."""


class ConfigError(ValueError):
    """Invalid or inconsistent run/network configuration."""


class ProtocolError(ValueError):
    """Verification pair protocol cannot be built or is malformed."""


class StagingError(RuntimeError):
    """A training stage was started without its prerequisite stage."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class WeightFileError(IOError):
    """Weight file is malformed (bad magic, version, or truncated payload)."""
