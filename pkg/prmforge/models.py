import re
from enum import StrEnum
from typing import Any, Self

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

__all__ = [
    "AggregationMethod",
    "AnswerKind",
    "ImageAttachment",
    "Problem",
    "Solution",
    "TAG_PATTERN",
]

TAG_PATTERN = re.compile(r"<(/?)(step|answer)>")


def _check_span(value: str, what: str) -> str:
    if not value.strip():
        raise ValueError(f"{what} must be non-empty")
    if value != value.strip():
        raise ValueError(f"{what} must not start or end with whitespace")
    if TAG_PATTERN.search(value):
        raise ValueError(f"{what} must not contain step or answer tags")
    return value


class AnswerKind(StrEnum):
    """How a problem's final answer is compared against its gold answer."""

    MULTIPLE_CHOICE = "multiple_choice"
    FILL_IN_BLANK = "fill_in_blank"


class AggregationMethod(StrEnum):
    """How step scores of a candidate path are reduced to one path score."""

    MIN = "Min"
    MAX = "Max"
    AVERAGE = "Average"
    SUM_LOG_PR = "SumLogPr"
    SUM_LOG_ODDS = "SumLogOdds"
    MEAN_ODDS = "MeanOdds"
    RANDOM = "Random"


class ImageAttachment(BaseModel):
    """
    An opaque image forwarded verbatim to the backend.

    Either ``uri`` or ``b64`` + ``media_type`` is set, never both.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    uri: str | None = None
    b64: str | None = None
    media_type: str | None = None

    @model_validator(mode="after")
    def check_form(self) -> Self:
        if (self.uri is None) == (self.b64 is None):
            raise ValueError("image needs exactly one of 'uri' or 'b64'")
        if self.b64 is not None and not self.media_type:
            raise ValueError("'b64' image needs a 'media_type'")
        return self

    @property
    def url(self) -> str:
        """URL form for chat-completion image parts (data URL for blobs)."""
        if self.uri is not None:
            return self.uri
        return f"data:{self.media_type};base64,{self.b64}"

    def to_json(self) -> dict[str, Any]:
        return self.model_dump(exclude_none=True)


class Problem(BaseModel):
    """One seed question with its verifiable gold answer."""

    model_config = ConfigDict(frozen=True, extra="ignore")

    id: str = Field(min_length=1)
    question: str
    images: tuple[ImageAttachment, ...] = ()
    gold_answer: str
    kind: AnswerKind

    @field_validator("gold_answer")
    @classmethod
    def check_gold(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("gold_answer must be non-empty")
        return value

    def images_json(self) -> list[dict[str, Any]]:
        return [image.to_json() for image in self.images]


class Solution(BaseModel):
    """An ordered list of reasoning steps and the final answer they reach."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    steps: tuple[str, ...]
    final_answer: str

    @field_validator("steps")
    @classmethod
    def check_steps(cls, value: tuple[str, ...]) -> tuple[str, ...]:
        if not value:
            raise ValueError("a solution needs at least one step")
        for step in value:
            _check_span(step, "steps")
        return value

    @field_validator("final_answer")
    @classmethod
    def check_answer(cls, value: str) -> str:
        return _check_span(value, "final_answer")
