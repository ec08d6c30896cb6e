import json
import logging
import math
from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path
from typing import IO, Any

import pydantic

from prmforge.config import SamplingParams
from prmforge.errors import (
    GenerationError,
    MisuseError,
    ParseError,
    ProtocolError,
    TransportError,
    ValidationError,
)
from prmforge.models import AggregationMethod, Problem, Solution
from prmforge.parsing import parse_solution
from prmforge.policy import PolicyBackend
from prmforge.pool import WorkerPool
from prmforge.scoring import Scorer, StepScoreVector, score_path
from prmforge.telemetry import EventKind, Telemetry
from prmforge.utils import rng_for
from prmforge.verify import verify_answer

__all__ = [
    "AggregationMethod",
    "Candidates",
    "Scores",
    "accuracy_report",
    "aggregate",
    "evaluate_accuracy",
    "generate_candidates",
    "load_candidates",
    "save_candidates",
    "score_candidates",
    "select_best",
    "sweep",
]

logger = logging.getLogger(__name__)

Candidates = Mapping[str, Sequence[Solution]]
Scores = Mapping[str, Sequence[StepScoreVector | None]]


def _method(method: AggregationMethod | str) -> AggregationMethod:
    try:
        return AggregationMethod(method)
    except ValueError as err:
        raise ValidationError(f"unknown aggregation method {method!r}") from err


def _odds(p: float) -> float:
    return p / (1.0 - p)


def _log_odds(p: float) -> float:
    return math.log(p) - math.log1p(-p)


def aggregate(
    scores: StepScoreVector | Sequence[float], method: AggregationMethod | str
) -> float:
    """
    Reduce a path's step scores to one path score.

    Min, Max and Average act on the probabilities; SumLogPr sums their logs;
    SumLogOdds sums their log-odds; MeanOdds averages their odds. Inputs are
    clamped into [1e-6, 1 - 1e-6] first, so results are always finite.

    Raises:
        ValidationError: If ``scores`` is empty or the method is unknown.
        MisuseError: If ``method`` is Random, which selects without scores.
    """
    method = _method(method)
    if method == AggregationMethod.RANDOM:
        raise MisuseError("Random is a selection rule, not an aggregator")

    if not isinstance(scores, StepScoreVector):
        scores = StepScoreVector(scores)
    probs = scores.probs
    if not probs:
        raise ValidationError("cannot aggregate an empty score vector")

    match method:
        case AggregationMethod.MIN:
            return min(probs)
        case AggregationMethod.MAX:
            return max(probs)
        case AggregationMethod.AVERAGE:
            return math.fsum(probs) / len(probs)
        case AggregationMethod.SUM_LOG_PR:
            return math.fsum(math.log(p) for p in probs)
        case AggregationMethod.SUM_LOG_ODDS:
            return math.fsum(_log_odds(p) for p in probs)
        case AggregationMethod.MEAN_ODDS:
            return math.fsum(_odds(p) for p in probs) / len(probs)
    raise ValidationError(f"unhandled aggregation method {method}")  # pragma: no cover


def select_best(
    candidates: Sequence[tuple[Solution, StepScoreVector | None]],
    method: AggregationMethod | str,
    seed: int = 0,
    *,
    stream: Sequence[object] = (),
) -> int:
    """
    Index of the winning candidate.

    Score-based methods take the highest aggregate, lowest index on ties;
    candidates without scores rank at minus infinity. Random draws uniformly
    from the ``("select", *stream)`` child stream of ``seed``.

    Raises:
        ValidationError: On an empty candidate list or a score vector whose
            length differs from its solution's step count.
    """
    method = _method(method)
    if not candidates:
        raise ValidationError("no candidates to select from")

    if method == AggregationMethod.RANDOM:
        rng = rng_for(seed, "select", *stream)
        return int(rng.integers(len(candidates)))

    values = []
    for solution, scores in candidates:
        if scores is None:
            values.append(-math.inf)
            continue
        if len(scores) != len(solution.steps):
            raise ValidationError(
                f"{len(scores)} scores for a {len(solution.steps)}-step solution"
            )
        values.append(aggregate(scores, method))

    return max(range(len(values)), key=lambda index: (values[index], -index))


async def score_candidates(
    problems: Sequence[Problem],
    candidates: Candidates,
    scorer: Scorer,
    n: int,
    *,
    workers: int = 1,
    telemetry: Telemetry | None = None,
) -> dict[str, list[StepScoreVector | None]]:
    """
    Score the first ``n`` candidates of every problem.

    A candidate whose scoring fails gets None and a ``score_failure`` event;
    the rest of the evaluation carries on.

    Raises:
        ValidationError: If a problem has fewer than ``n`` candidates.
    """
    if n < 1:
        raise ValidationError(f"n must be >= 1, got {n}")
    for problem in problems:
        available = len(candidates.get(problem.id, ()))
        if available < n:
            raise ValidationError(
                f"problem {problem.id!r} has {available} candidates, needs {n}"
            )

    telemetry = telemetry or Telemetry(log=False)
    pool = WorkerPool(workers)

    async def score_one(item: tuple[Problem, int]) -> StepScoreVector | None:
        problem, index = item
        solution = candidates[problem.id][index]
        try:
            return await score_path(problem, solution, scorer)
        except (TransportError, ProtocolError, ValidationError) as err:
            logger.warning(
                "Scoring candidate %d of problem %s failed: %s", index, problem.id, err
            )
            await telemetry.emit(
                EventKind.SCORE_FAILURE, problem.id, candidate=index, error=str(err)
            )
            return None

    items = [(problem, index) for problem in problems for index in range(n)]
    flat = await pool.map(score_one, items)

    scores: dict[str, list[StepScoreVector | None]] = {}
    for (problem, _), result in zip(items, flat, strict=True):
        scores.setdefault(problem.id, []).append(result)
    return scores


def accuracy_report(
    problems: Sequence[Problem],
    candidates: Candidates,
    scores: Scores,
    methods: Iterable[AggregationMethod | str],
    n: int,
    *,
    seed: int = 0,
) -> dict[str, Any]:
    """
    Best-of-``n`` answer accuracy per method from precomputed scores.

    Returns:
        ``{"methods": {method: accuracy}, "n": n, "problems": count,
        "seed": seed}``.
    """
    methods = [_method(method) for method in methods]
    correct = dict.fromkeys(methods, 0)

    for problem in problems:
        pool = list(
            zip(candidates[problem.id][:n], scores[problem.id][:n], strict=True)
        )
        for method in methods:
            winner, _ = pool[select_best(pool, method, seed, stream=(problem.id, n))]
            if verify_answer(winner.final_answer, problem.gold_answer, problem.kind):
                correct[method] += 1

    total = len(problems)
    return {
        "methods": {
            str(method): (count / total if total else 0.0)
            for method, count in correct.items()
        },
        "n": n,
        "problems": total,
        "seed": seed,
    }


async def evaluate_accuracy(
    problems: Sequence[Problem],
    candidates: Candidates,
    scorer: Scorer,
    methods: Iterable[AggregationMethod | str],
    n: int = 16,
    *,
    seed: int = 0,
    workers: int = 1,
    telemetry: Telemetry | None = None,
) -> dict[str, Any]:
    """
    Score the first ``n`` candidates of each problem, select a winner per
    method and report the fraction of problems whose winner is correct.
    """
    scores = await score_candidates(
        problems, candidates, scorer, n, workers=workers, telemetry=telemetry
    )
    return accuracy_report(problems, candidates, scores, methods, n, seed=seed)


async def sweep(
    problems: Sequence[Problem],
    candidates: Candidates,
    scorer: Scorer,
    methods: Iterable[AggregationMethod | str],
    ns: Sequence[int] = (2, 4, 8, 16),
    *,
    seed: int = 0,
    workers: int = 1,
    telemetry: Telemetry | None = None,
) -> list[dict[str, Any]]:
    """
    One report per ``n`` over nested candidate sets.

    Candidates are scored once, up to the largest ``n``; every smaller ``n``
    reuses the leading scores, so sets are nested across the sweep.
    """
    if not ns:
        raise ValidationError("sweep needs at least one n")
    methods = [_method(method) for method in methods]
    scores = await score_candidates(
        problems, candidates, scorer, max(ns), workers=workers, telemetry=telemetry
    )
    return [
        accuracy_report(problems, candidates, scores, methods, n, seed=seed)
        for n in ns
    ]


async def generate_candidates(
    problems: Sequence[Problem],
    policy: PolicyBackend,
    n: int,
    *,
    params: SamplingParams | None = None,
    workers: int = 1,
    max_rounds: int = 4,
) -> dict[str, list[Solution]]:
    """
    Sample ``n`` parseable solutions per problem from the policy.

    Unusable samples are redrawn with fresh draw indices for up to
    ``max_rounds`` rounds; a problem may end up short when the policy keeps
    failing.
    """
    params = params or SamplingParams()

    async def sample(problem: Problem) -> list[Solution]:
        solutions: list[Solution] = []
        drawn = 0
        for _ in range(max_rounds):
            missing = n - len(solutions)
            if missing <= 0:
                break
            samples = await policy.complete(
                problem, [], params, missing, draw_offset=drawn
            )
            drawn += missing
            for raw in samples:
                if isinstance(raw, GenerationError):
                    continue
                try:
                    solutions.append(parse_solution(raw))
                except ParseError as err:
                    logger.debug("Dropping candidate for %s: %s", problem.id, err)
        if len(solutions) < n:
            logger.warning(
                "Problem %s has only %d of %d candidates", problem.id, len(solutions), n
            )
        return solutions

    results = await WorkerPool(workers).map(sample, problems)
    return {
        problem.id: solutions
        for problem, solutions in zip(problems, results, strict=True)
    }


def save_candidates(candidates: Candidates, sink: IO[str]) -> int:
    """Write one ``{problem_id, candidates}`` JSON line per problem."""
    lines = 0
    for problem_id, solutions in candidates.items():
        record = {
            "problem_id": problem_id,
            "candidates": [solution.model_dump(mode="json") for solution in solutions],
        }
        sink.write(json.dumps(record, ensure_ascii=False) + "\n")
        lines += 1
    return lines


def load_candidates(path: Path) -> dict[str, list[Solution]]:
    """
    Read candidates written by ``save_candidates``.

    Raises:
        OSError: If the file cannot be read.
        ValidationError: On a malformed line, naming it.
    """
    candidates: dict[str, list[Solution]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                problem_id = str(record["problem_id"])
                solutions = [
                    Solution.model_validate(raw) for raw in record["candidates"]
                ]
            except (
                json.JSONDecodeError,
                KeyError,
                TypeError,
                pydantic.ValidationError,
            ) as err:
                raise ValidationError(f"{path}:{lineno}: {err}") from err
            candidates.setdefault(problem_id, []).extend(solutions)
    return candidates
