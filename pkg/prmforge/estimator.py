import logging
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Protocol

from prmforge.config import SamplingParams
from prmforge.errors import GenerationError, ParseError, ValidationError
from prmforge.models import Problem, Solution
from prmforge.parsing import parse_solution
from prmforge.policy import PolicyBackend, Sample
from prmforge.pool import WorkerPool
from prmforge.verify import verify_answer

__all__ = [
    "MCEstimate",
    "RolloutBudget",
    "RolloutRecord",
    "estimate_mc",
    "judge_sample",
]

logger = logging.getLogger(__name__)


class RolloutBudget(Protocol):
    def reserve_rollouts(self, k: int) -> int: ...

    def release_rollouts(self, n: int) -> None: ...


@dataclass(frozen=True, slots=True)
class RolloutRecord:
    """
    One sampled continuation of a prefix.

    ``completion`` holds only the steps after the prefix. It is None when the
    sample failed to generate or to parse; such rollouts count as incorrect.
    """

    prefix_len: int
    completion: Solution | None
    correct: bool
    draw_index: int


@dataclass(frozen=True, slots=True)
class MCEstimate:
    """
    Monte Carlo estimate of reaching the gold answer from one prefix.

    The value is derived from the recorded rollouts, so it is always the exact
    ratio of correct rollouts to drawn rollouts.
    """

    rollouts: tuple[RolloutRecord, ...]

    def __post_init__(self) -> None:
        if not self.rollouts:
            raise ValidationError("an MC estimate needs at least one rollout")

    @property
    def n_rollouts(self) -> int:
        return len(self.rollouts)

    @property
    def n_correct(self) -> int:
        return sum(rollout.correct for rollout in self.rollouts)

    @property
    def value(self) -> float:
        return self.n_correct / self.n_rollouts

    def incorrect(self) -> list[RolloutRecord]:
        """Incorrect rollouts that produced a usable path."""
        return [
            rollout
            for rollout in self.rollouts
            if not rollout.correct and rollout.completion is not None
        ]

    def merge(self, other: "MCEstimate") -> "MCEstimate":
        """Pool two estimates of the same prefix."""
        return MCEstimate(rollouts=self.rollouts + other.rollouts)


def judge_sample(
    problem: Problem, sample: Sample, prefix_len: int, draw_index: int
) -> RolloutRecord:
    """Parse and verify one sample; generation and parse failures are incorrect."""
    if isinstance(sample, GenerationError):
        logger.debug("Draw %d failed to generate: %s", draw_index, sample)
        return RolloutRecord(prefix_len, None, False, draw_index)

    try:
        completion = parse_solution(sample)
    except ParseError as err:
        logger.debug("Draw %d is unparseable: %s", draw_index, err)
        return RolloutRecord(prefix_len, None, False, draw_index)

    correct = verify_answer(completion.final_answer, problem.gold_answer, problem.kind)
    return RolloutRecord(prefix_len, completion, correct, draw_index)


async def estimate_mc(
    policy: PolicyBackend,
    problem: Problem,
    prefix: Sequence[str],
    k: int,
    budget: RolloutBudget,
    *,
    params: SamplingParams | None = None,
    draw_offset: int = 0,
    workers: int = 1,
) -> MCEstimate:
    """
    Estimate the probability that completions of ``prefix`` reach the gold
    answer.

    ``min(k, remaining budget)`` rollouts are drawn. With ``workers > 1`` the
    draws are split into contiguous chunks requested concurrently; draw
    indices do not depend on the split, so a draw-keyed backend gives the same
    estimate in parallel as in serial.

    Args:
        policy: Backend to sample from.
        problem: The problem and its gold answer.
        prefix: Steps the rollouts continue from.
        k: Rollouts wanted.
        budget: Rollout budget debited by the draws.
        params: Sampling settings, defaults when omitted.
        draw_offset: Index of the first draw, non-zero when pooling more
            rollouts into an existing estimate.
        workers: Concurrent requests.

    Raises:
        ValidationError: If ``k`` or ``workers`` is smaller than one.
        BudgetExhaustedError: If no rollout budget is left.
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if workers < 1:
        raise ValidationError(f"workers must be >= 1, got {workers}")

    params = params or SamplingParams()
    prefix = list(prefix)
    n = budget.reserve_rollouts(k)

    drawn = 0
    size = -(-n // workers)
    chunks = [(start, min(size, n - start)) for start in range(0, n, size)]

    async def draw_chunk(chunk: tuple[int, int]) -> list[RolloutRecord]:
        nonlocal drawn
        start, count = chunk
        first = draw_offset + start
        samples = await policy.complete(
            problem, prefix, params, count, draw_offset=first
        )
        drawn += len(samples)
        return [
            judge_sample(problem, sample, len(prefix), first + index)
            for index, sample in enumerate(samples)
        ]

    try:
        batches = await WorkerPool(workers).map(draw_chunk, chunks)
    except BaseException:
        # finished chunks were sampled and stay debited
        budget.release_rollouts(n - drawn)
        raise

    return MCEstimate(rollouts=tuple(r for batch in batches for r in batch))
