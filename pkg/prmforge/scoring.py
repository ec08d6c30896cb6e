import logging
import math
from abc import ABC, abstractmethod
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass
from typing import Any

import httpx

from prmforge.config import ScorerSettings
from prmforge.dataset import MarkedSequence, StepAnnotation, interleave_markers
from prmforge.errors import ProtocolError, ValidationError
from prmforge.models import Problem, Solution
from prmforge.policy import FLAW_TAG
from prmforge.transport import post_json
from prmforge.utils import prefix_digest, rng_for
from prmforge.verify import verify_answer

__all__ = [
    "EPSILON",
    "ConstantScorer",
    "OracleScorer",
    "RandomScorer",
    "RemoteScorer",
    "Scorer",
    "StepScoreVector",
    "annotation_loss",
    "build_scorer",
    "clamp",
    "prm_loss",
    "score_path",
    "step_probability",
]

logger = logging.getLogger(__name__)

EPSILON = 1e-6


def clamp(p: float, eps: float = EPSILON) -> float:
    return min(max(p, eps), 1.0 - eps)


@dataclass(frozen=True, slots=True)
class StepScoreVector:
    """Per-step correctness probabilities, clamped into [eps, 1 - eps]."""

    probs: tuple[float, ...]

    def __init__(self, probs: Iterable[float]) -> None:
        values = []
        for p in probs:
            p = float(p)
            if math.isnan(p):
                raise ValidationError("step score is NaN")
            values.append(clamp(p))
        object.__setattr__(self, "probs", tuple(values))

    def __len__(self) -> int:
        return len(self.probs)

    def __iter__(self) -> Iterator[float]:
        return iter(self.probs)


def step_probability(z_yes: float, z_no: float) -> float:
    """
    Probability of the positive label from its two logits.

    Computed as a softmax over the pair with the larger logit subtracted
    first, so large logits never overflow.

    Raises:
        ValidationError: If a logit is not finite.
    """
    if not (math.isfinite(z_yes) and math.isfinite(z_no)):
        raise ValidationError("logits must be finite")
    top = max(z_yes, z_no)
    e_yes = math.exp(z_yes - top)
    e_no = math.exp(z_no - top)
    return e_yes / (e_yes + e_no)


def prm_loss(preds: Sequence[float], targets: Sequence[float]) -> float:
    """
    Summed binary cross-entropy of step predictions against soft labels.

    Predictions are clamped into [1e-6, 1 - 1e-6] before taking logs.

    Raises:
        ValidationError: On empty or unequal inputs, or targets outside [0, 1].
    """
    if not preds or len(preds) != len(targets):
        raise ValidationError(
            f"need equal non-empty lengths, got {len(preds)} and {len(targets)}"
        )
    terms = []
    for p, y in zip(preds, targets, strict=True):
        if not 0.0 <= y <= 1.0:
            raise ValidationError(f"target {y} outside [0, 1]")
        p = clamp(float(p))
        terms.append(y * math.log(p) + (1.0 - y) * math.log(1.0 - p))
    return -math.fsum(terms)


def annotation_loss(
    scores: StepScoreVector | Sequence[float],
    annotations: Sequence[StepAnnotation],
) -> float:
    """
    ``prm_loss`` of a path's step scores against the soft labels annotated on
    it, matched by step position.

    Raises:
        ValidationError: If no annotation is given or one points past the
            scored steps.
    """
    probs = list(scores)
    preds, targets = [], []
    for annotation in sorted(annotations, key=lambda a: len(a.prefix)):
        position = len(annotation.prefix)
        if position >= len(probs):
            raise ValidationError(
                f"annotation at step {position + 1} but only {len(probs)} scores"
            )
        preds.append(probs[position])
        targets.append(annotation.soft_label)
    return prm_loss(preds, targets)


class Scorer(ABC):
    """Process reward model seen as a per-step scoring service."""

    @abstractmethod
    async def __score__(self, problem: Problem, solution: Solution) -> list[float]:
        pass  # pragma: no cover

    async def aclose(self) -> None:
        return None


class OracleScorer(Scorer):
    """
    Ground-truth scorer for scripted paths.

    Steps before the first step carrying the flaw tag score ``1 - eps``, the
    rest ``eps``. An untagged path whose answer is wrong is treated as
    flawed at its last step.
    """

    def __init__(self, epsilon: float = EPSILON) -> None:
        self.epsilon = epsilon

    def first_flaw(self, problem: Problem, solution: Solution) -> int | None:
        """Index of the first flawed step, or None for a clean correct path."""
        for index, step in enumerate(solution.steps):
            if FLAW_TAG in step:
                return index
        if not verify_answer(solution.final_answer, problem.gold_answer, problem.kind):
            return len(solution.steps) - 1
        return None

    async def __score__(self, problem: Problem, solution: Solution) -> list[float]:
        flaw = self.first_flaw(problem, solution)
        if flaw is None:
            flaw = len(solution.steps)
        return [
            1.0 - self.epsilon if index < flaw else self.epsilon
            for index in range(len(solution.steps))
        ]


class ConstantScorer(Scorer):
    def __init__(self, value: float = 0.5) -> None:
        if not 0.0 <= value <= 1.0:
            raise ValidationError(f"constant score {value} outside [0, 1]")
        self.value = value

    async def __score__(self, problem: Problem, solution: Solution) -> list[float]:
        return [self.value] * len(solution.steps)


class RandomScorer(Scorer):
    """Uniform scores from a stream keyed by problem and path."""

    def __init__(self, seed: int = 0) -> None:
        self.seed = seed

    async def __score__(self, problem: Problem, solution: Solution) -> list[float]:
        rng = rng_for(
            self.seed,
            "scorer",
            problem.id,
            prefix_digest([*solution.steps, solution.final_answer]),
        )
        return [float(p) for p in rng.random(len(solution.steps))]


class RemoteScorer(Scorer):
    """
    Client for a PRM served over HTTP.

    Request ``{question, images, steps, sequence}`` where ``sequence`` is the
    marker-interleaved form ``[q, x1, <prm>, x2, <prm>, ...]``; response
    ``{probs}`` with one probability per marker.
    """

    url: str
    __client__: httpx.AsyncClient
    __max_retries__: int

    def __init__(
        self,
        url: str,
        *,
        timeout: float = 60.0,
        max_retries: int = 4,
        transport: httpx.AsyncBaseTransport | None = None,
    ) -> None:
        self.url = url
        self.__max_retries__ = max_retries
        self.__client__ = httpx.AsyncClient(
            timeout=httpx.Timeout(timeout), transport=transport
        )

    def payload(self, problem: Problem, marked: MarkedSequence) -> dict[str, Any]:
        return {
            "question": marked.question,
            "images": problem.images_json(),
            "steps": marked.steps,
            "sequence": marked.to_list(),
        }

    async def __score__(self, problem: Problem, solution: Solution) -> list[float]:
        marked = interleave_markers(problem, solution)
        body = await post_json(
            self.__client__,
            self.url,
            self.payload(problem, marked),
            max_retries=self.__max_retries__,
        )
        probs = body.get("probs")
        if not isinstance(probs, list):
            raise ProtocolError(f"{self.url} answered without 'probs'")
        if len(probs) != marked.marker_count:
            raise ProtocolError(
                f"{self.url} returned {len(probs)} probabilities "
                f"for {marked.marker_count} step markers"
            )
        try:
            values = [float(p) for p in probs]
        except (TypeError, ValueError) as err:
            raise ProtocolError(f"{self.url} returned non-numeric scores") from err
        if any(not 0.0 <= p <= 1.0 for p in values):
            raise ProtocolError(f"{self.url} returned scores outside [0, 1]")
        return values

    async def aclose(self) -> None:
        await self.__client__.aclose()


async def score_path(
    problem: Problem, solution: Solution, scorer: Scorer
) -> StepScoreVector:
    """
    Score every step of ``solution``.

    Raises:
        ProtocolError: If the scorer returns the wrong number of scores.
        TransportError: If a remote scorer stayed unreachable.
    """
    probs = await scorer.__score__(problem, solution)
    if len(probs) != len(solution.steps):
        raise ProtocolError(
            f"scorer returned {len(probs)} scores for {len(solution.steps)} steps"
        )
    return StepScoreVector(probs)


def build_scorer(
    settings: ScorerSettings,
    *,
    seed: int = 0,
    transport: httpx.AsyncBaseTransport | None = None,
) -> Scorer:
    """
    Construct the scorer named by ``settings.kind``.

    Raises:
        ValidationError: If a remote scorer has no URL.
    """
    match settings.kind:
        case "constant":
            return ConstantScorer(settings.constant)
        case "random":
            return RandomScorer(seed)
        case "remote":
            if not settings.url:
                raise ValidationError("remote scorer needs a URL (--scorer-url)")
            return RemoteScorer(
                settings.url,
                timeout=settings.timeout,
                max_retries=settings.max_retries,
                transport=transport,
            )
        case _:
            return OracleScorer()
