"""Exception hierarchy shared across the package."""

from __future__ import annotations


class RubricRewardError(Exception):
    """Base class for all package errors."""


# -- gateway ---------------------------------------------------------------


class ConfigError(RubricRewardError):
    pass


class EndpointUnknown(ConfigError):
    def __init__(self, name: str):
        super().__init__(f"endpoint {name!r} is not configured")
        self.name = name


class TransportFailure(RubricRewardError):
    """Raised once retryable failures have exhausted the retry budget."""

    def __init__(self, message: str, attempts: int = 0):
        super().__init__(message)
        self.attempts = attempts


class NonSuccessStatus(RubricRewardError):
    def __init__(self, status: int, body: str = ""):
        super().__init__(f"endpoint returned HTTP {status}: {body[:200]}")
        self.status = status
        self.body = body

    @property
    def retryable(self) -> bool:
        return self.status == 429 or self.status >= 500


class ImageUnreadable(RubricRewardError):
    pass


class FixtureMissing(RubricRewardError):
    def __init__(self, digest: str, pretty_request: str = ""):
        msg = f"no mock fixture for digest {digest}"
        if pretty_request:
            msg += "\n" + pretty_request
        super().__init__(msg)
        self.digest = digest


class FixtureMalformed(RubricRewardError):
    pass


# -- parsing ---------------------------------------------------------------


class ParseError(RubricRewardError):
    """Model output could not be turned into the expected structure."""

    raw: str | None = None


class NoJsonFound(ParseError):
    pass


class JsonMalformed(ParseError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class SchemaViolation(ParseError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class ScoreUnparseable(ParseError):
    pass


# -- rubric synthesis ------------------------------------------------------


class CommitteeCollapse(RubricRewardError):
    pass


class EmptyAfterFilter(RubricRewardError):
    def __init__(self, report):
        super().__init__(f"no rubric items survived filtering ({len(report)} dropped)")
        self.report = report


class SampleSkipped(RubricRewardError):
    def __init__(self, image_ref: str, cause: Exception):
        super().__init__(f"sample {image_ref} skipped: {cause}")
        self.image_ref = image_ref
        self.cause = cause


# -- reward ----------------------------------------------------------------


class AlignmentMismatch(RubricRewardError):
    pass


class ZeroTotalWeight(RubricRewardError):
    pass


class MissingReference(RubricRewardError):
    pass


class MissingRubricSet(RubricRewardError):
    pass


# -- grpo ------------------------------------------------------------------


class GroupTooSmall(RubricRewardError):
    pass


class NonFiniteRatio(RubricRewardError):
    pass


class UnknownCaption(RubricRewardError):
    pass


# -- evaluation ------------------------------------------------------------


class SubjectAbsent(RubricRewardError):
    pass


class MissingAssessment(ParseError):
    pass


class InconsistentSources(RubricRewardError):
    pass


# -- store -----------------------------------------------------------------


class StoreCorrupt(RubricRewardError):
    pass


class CacheConflict(RubricRewardError):
    def __init__(self, digest: str):
        super().__init__(f"cache already holds a different response for {digest}")
        self.digest = digest


class IoFailure(RubricRewardError):
    pass
