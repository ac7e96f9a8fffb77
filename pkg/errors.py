from typing import Optional, Sequence


class PrognosisError(ValueError):
    """Base class for every error raised by the toolkit."""


class DimensionMismatchError(PrognosisError):
    def __init__(self, dims_a: Sequence[int], dims_b: Sequence[int], what: str = "mask"):
        self.dims_a = tuple(dims_a)
        self.dims_b = tuple(dims_b)
        super().__init__(f"Dimension mismatch: volume dims {self.dims_a} vs {what} dims {self.dims_b}")


class MalformedHeaderError(PrognosisError):
    def __init__(self, path: str, reason: str):
        self.path = path
        self.reason = reason
        super().__init__(f"Malformed header in {path}: {reason}")


class TruncatedPayloadError(PrognosisError):
    def __init__(self, path: str, expected: int, actual: int):
        self.path = path
        self.expected = expected
        self.actual = actual
        super().__init__(f"Truncated payload in {path}: expected {expected} bytes, found {actual}")


class PayloadSizeError(PrognosisError):
    def __init__(self, path: str, expected: int, actual: int):
        self.path = path
        self.expected = expected
        self.actual = actual
        super().__init__(f"Payload size does not match dims in {path}: expected {expected} bytes, found {actual}")


class PhantomLayoutError(PrognosisError):
    def __init__(self, dims: Sequence[int], reason: str):
        self.dims = tuple(dims)
        super().__init__(f"Cannot place all anatomies in dims {self.dims}: {reason}")


class ManifestError(PrognosisError):
    def __init__(self, study_id: Optional[str], reason: str, anatomy: Optional[str] = None):
        self.study_id = study_id
        self.anatomy = anatomy
        where = f"study '{study_id}'"
        if anatomy is not None:
            where += f", anatomy '{anatomy}'"
        super().__init__(f"Manifest error ({where}): {reason}")


class ExtractionError(PrognosisError):
    def __init__(self, feature: str, study_id: str, reason: str):
        self.feature = feature
        self.study_id = study_id
        super().__init__(f"Feature '{feature}' failed for study '{study_id}': {reason}")


class EmptyInputError(PrognosisError):
    pass


class SingleClassError(PrognosisError):
    pass


class CatalogMismatchError(PrognosisError):
    def __init__(self, expected: str, actual: str):
        self.expected = expected
        self.actual = actual
        super().__init__(f"Catalog version mismatch: model expects {expected}, got {actual}")


class FoldPlanError(PrognosisError):
    pass


class TrainingDivergedError(PrognosisError):
    def __init__(self, epoch: int, batch: int, loss: float):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(f"Non-finite loss {loss!r} at epoch {epoch}, batch {batch}")


class ConfigError(PrognosisError):
    pass
