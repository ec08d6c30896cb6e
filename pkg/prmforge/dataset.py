import json
import logging
import math
from collections import Counter
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Any, Literal

import numpy as np
import pydantic

from prmforge.errors import EmitError, ValidationError
from prmforge.models import Problem, Solution

__all__ = [
    "MARKER",
    "LabelMode",
    "MarkedSequence",
    "StepAnnotation",
    "emit",
    "hard_label",
    "interleave_markers",
    "load",
    "load_problems",
    "stats",
]

logger = logging.getLogger(__name__)

MARKER = "<prm>"

LabelMode = Literal["soft", "hard"]

HISTOGRAM_BINS = 10


@dataclass(frozen=True, slots=True)
class StepAnnotation:
    """
    One supervision point: ``step`` taken after ``prefix``, labelled with the
    MC estimate of the prefix that ends at ``step``.
    """

    problem_id: str
    prefix: tuple[str, ...]
    step: str
    n_rollouts: int
    n_correct: int

    def __post_init__(self) -> None:
        if self.n_rollouts < 1:
            raise ValidationError("an annotation needs at least one rollout")
        if not 0 <= self.n_correct <= self.n_rollouts:
            raise ValidationError(
                f"n_correct {self.n_correct} outside [0, {self.n_rollouts}]"
            )

    @property
    def soft_label(self) -> float:
        return self.n_correct / self.n_rollouts

    @property
    def steps(self) -> tuple[str, ...]:
        return self.prefix + (self.step,)


@dataclass(frozen=True, slots=True)
class MarkedSequence:
    """A question followed by (step, marker) pairs, one marker per step."""

    question: str
    segments: tuple[tuple[str, str], ...]

    @property
    def steps(self) -> list[str]:
        return [step for step, _ in self.segments]

    @property
    def marker_count(self) -> int:
        return sum(1 for _, marker in self.segments if marker == MARKER)

    def to_list(self) -> list[str]:
        """Flat form ``[q, x1, <prm>, x2, <prm>, ...]``."""
        flat = [self.question]
        for step, marker in self.segments:
            flat.extend((step, marker))
        return flat


def interleave_markers(
    problem: Problem, solution: Solution | Sequence[str]
) -> MarkedSequence:
    """
    Pair every step with the marker the scorer reads a probability at.

    Raises:
        ValidationError: If there are no steps.
    """
    steps = solution.steps if isinstance(solution, Solution) else tuple(solution)
    if not steps:
        raise ValidationError("cannot mark an empty solution")
    return MarkedSequence(
        question=problem.question,
        segments=tuple((step, MARKER) for step in steps),
    )


def hard_label(mc: float, threshold: float = 0.0) -> int:
    """
    Binarise an MC value: 1 iff ``mc > threshold``.

    The default threshold treats every step that can still reach the gold
    answer as correct.

    Raises:
        ValidationError: If ``mc`` is outside [0, 1] or ``threshold`` outside
            [0, 1).
    """
    if not (math.isfinite(mc) and 0.0 <= mc <= 1.0):
        raise ValidationError(f"MC value {mc} outside [0, 1]")
    if not 0.0 <= threshold < 1.0:
        raise ValidationError(f"threshold {threshold} outside [0, 1)")
    return int(mc > threshold)


def _record(
    annotation: StepAnnotation,
    mode: LabelMode,
    problem: Problem | None,
    threshold: float,
) -> dict[str, Any]:
    soft = annotation.soft_label
    return {
        "problem_id": annotation.problem_id,
        "question": problem.question if problem else "",
        "images": problem.images_json() if problem else [],
        "prefix": list(annotation.prefix),
        "step": annotation.step,
        "label": soft if mode == "soft" else hard_label(soft, threshold),
        "n_rollouts": annotation.n_rollouts,
        "n_correct": annotation.n_correct,
    }


def emit(
    annotations: Iterable[StepAnnotation],
    mode: LabelMode,
    sink: IO[str],
    problems: Mapping[str, Problem] | None = None,
    *,
    threshold: float = 0.0,
) -> int:
    """
    Write annotations as JSON lines.

    Each line is ``{problem_id, question, images, prefix, step, label,
    n_rollouts, n_correct}``; ``label`` is the MC value in soft mode and
    ``hard_label`` of it in hard mode. Question and images come from
    ``problems`` when the annotation's problem is found there.

    Returns:
        Lines written.

    Raises:
        ValidationError: On an unknown mode.
        EmitError: If the sink fails; ``written`` counts complete lines.
    """
    if mode not in ("soft", "hard"):
        raise ValidationError(f"unknown label mode {mode!r}")

    problems = problems or {}
    written = 0
    for annotation in annotations:
        record = _record(
            annotation, mode, problems.get(annotation.problem_id), threshold
        )
        line = json.dumps(record, ensure_ascii=False) + "\n"
        try:
            sink.write(line)
        except OSError as err:
            raise EmitError(f"annotation sink failed: {err}", written) from err
        written += 1
    return written


def _annotation_from(record: Mapping[str, Any]) -> StepAnnotation:
    """
    Rebuild an annotation from one emitted record.

    Raises:
        ValidationError: If a field is missing or mistyped, the counts are
            inconsistent, or the label is outside [0, 1].
    """
    try:
        annotation = StepAnnotation(
            problem_id=str(record["problem_id"]),
            prefix=tuple(str(step) for step in record["prefix"]),
            step=str(record["step"]),
            n_rollouts=int(record["n_rollouts"]),
            n_correct=int(record["n_correct"]),
        )
        label = float(record["label"])
    except (KeyError, TypeError, ValueError) as err:
        raise ValidationError(f"malformed annotation record: {err}") from err
    if not 0.0 <= label <= 1.0:
        raise ValidationError(f"label {label} outside [0, 1]")
    return annotation


def _records(source: IO[str] | IO[bytes]) -> Iterable[tuple[int, Any]]:
    for lineno, line in enumerate(source, start=1):
        if line.strip():
            yield lineno, line


def load(source: IO[str]) -> list[StepAnnotation]:
    """
    Read annotations written by ``emit``.

    Raises:
        ValidationError: On the first malformed line, naming its number.
    """
    annotations = []
    for lineno, line in _records(source):
        try:
            record = json.loads(line)
            if not isinstance(record, dict):
                raise ValidationError("record is not an object")
            annotations.append(_annotation_from(record))
        except (json.JSONDecodeError, ValidationError) as err:
            raise ValidationError(f"line {lineno}: {err}") from err
    return annotations


def load_problems(path: Path) -> list[Problem]:
    """
    Read problems from JSONL.

    Raises:
        OSError: If the file cannot be read.
        ValidationError: On a malformed line, an empty gold answer or a
            duplicate id, naming the line.
    """
    problems: list[Problem] = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in _records(fh):
            try:
                problem = Problem.model_validate_json(line)
            except pydantic.ValidationError as err:
                raise ValidationError(f"{path}:{lineno}: {err}") from err
            if problem.id in seen:
                raise ValidationError(
                    f"{path}:{lineno}: duplicate problem id {problem.id!r} "
                    f"(first on line {seen[problem.id]})"
                )
            seen[problem.id] = lineno
            problems.append(problem)
    return problems


def stats(source: IO[str] | IO[bytes]) -> dict[str, Any]:
    """
    Summarise an annotation corpus.

    Malformed lines, including lines that are not valid UTF-8 when ``source``
    is binary, are listed under ``errors`` with their line numbers and
    skipped. Label fractions are over well-formed records.
    """
    labels: list[float] = []
    problems: set[str] = set()
    steps_per_record: Counter[int] = Counter()
    errors: list[dict[str, Any]] = []

    for lineno, line in _records(source):
        try:
            text = line.decode("utf-8") if isinstance(line, bytes) else line
            record = json.loads(text)
            if not isinstance(record, dict):
                raise ValidationError("record is not an object")
            annotation = _annotation_from(record)
            label = float(record["label"])
        except (UnicodeDecodeError, json.JSONDecodeError, ValidationError) as err:
            errors.append({"line": lineno, "error": str(err)})
            continue
        labels.append(label)
        problems.add(annotation.problem_id)
        steps_per_record[len(annotation.steps)] += 1

    values = np.asarray(labels, dtype=float)
    counts, edges = np.histogram(values, bins=HISTOGRAM_BINS, range=(0.0, 1.0))
    n = len(labels)

    def fraction(mask: np.ndarray) -> float:
        return float(np.count_nonzero(mask)) / n if n else 0.0

    return {
        "records": n,
        "problems": len(problems),
        "steps_per_record": {
            str(length): count for length, count in sorted(steps_per_record.items())
        },
        "label_histogram": {
            "edges": [round(float(edge), 10) for edge in edges],
            "counts": [int(count) for count in counts],
        },
        "zero_fraction": fraction(values == 0.0),
        "one_fraction": fraction(values == 1.0),
        "hard_positive_fraction": fraction(values > 0.0),
        "uncertain_fraction": fraction((values > 0.0) & (values < 1.0)),
        "errors": errors,
    }

