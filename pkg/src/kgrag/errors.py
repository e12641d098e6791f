from __future__ import annotations


class KGRAGError(Exception):
    """Base class for engine errors."""


class StageError(KGRAGError):
    """Wraps a failure with the pipeline stage it came from."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
