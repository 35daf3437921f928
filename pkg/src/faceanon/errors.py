"""Exception types shared across the package.

Each error carries a short machine-readable ``code`` that the CLI prints
alongside the message.
"""


class FaceAnonError(Exception):
    code = "error"


class InvalidLandmarksError(FaceAnonError, ValueError):
    code = "invalid-landmarks"


class EmptyDatasetError(FaceAnonError):
    code = "empty-dataset"


class ShapeError(FaceAnonError, ValueError):
    code = "shape-error"


class ConfigError(FaceAnonError, ValueError):
    code = "config-error"


class NonFiniteLossError(FaceAnonError, FloatingPointError):
    code = "non-finite-loss"

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


class CheckpointError(FaceAnonError):
    code = "checkpoint-error"


class DetectorError(FaceAnonError):
    code = "detector-failure"
