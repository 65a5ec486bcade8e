class PipelineError(Exception):
    """Command-boundary failure carrying the process exit code."""

    exit_code = 1

    def __init__(self, detail, exit_code=None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code


class UsageError(PipelineError):
    exit_code = 2


class TrainingFailure(PipelineError):
    exit_code = 3


class ArtifactMismatch(PipelineError):
    exit_code = 4


class TensorShapeError(ValueError):
    pass


class ImageDecodeError(Exception):
    def __init__(self, path, reason):
        super().__init__(f"cannot decode {path}: {reason}")
        self.path = path


class GrainNotFound(Exception):
    def __init__(self, detail="no grain found"):
        super().__init__(detail)


class DatasetError(UsageError):
    pass


class SplitError(UsageError):
    pass


class ModelError(Exception):
    pass


class ModelFileError(ArtifactMismatch):
    """Model file rejected on load; code names the failed check."""

    CODES = ("io", "truncated", "magic", "version", "crc", "fingerprint")

    def __init__(self, code, detail):
        super().__init__(f"{code}: {detail}")
        self.code = code


class TrainingDiverged(TrainingFailure):
    def __init__(self, detail, checkpoint=None, reports=None):
        super().__init__(detail)
        self.checkpoint = checkpoint
        self.reports = reports or []


class ExplanationError(Exception):
    pass
