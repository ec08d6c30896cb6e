import logging
import threading
from abc import ABC, abstractmethod
from collections.abc import Sequence
from pathlib import Path
from typing import Any, Self

import httpx
import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

from prmforge.config import BackendSettings, SamplingParams
from prmforge.errors import GenerationError, ProtocolError, ValidationError
from prmforge.models import TAG_PATTERN, AnswerKind, Problem
from prmforge.parsing import render_steps
from prmforge.transport import post_json
from prmforge.utils import prefix_digest, rng_for
from prmforge.verify import normalize_answer, parse_number

__all__ = [
    "FLAW_TAG",
    "BudgetLedger",
    "MockBackend",
    "MockScript",
    "MockScriptFile",
    "PolicyBackend",
    "RemoteBackend",
    "Sample",
    "build_backend",
    "load_mock_script",
    "wrong_answer",
]

logger = logging.getLogger(__name__)

FLAW_TAG = "[flawed]"
"""Marker the mock policy appends to the step where a generated path goes wrong."""

Sample = str | GenerationError


class BudgetLedger:
    """
    Run-wide usage counters shared by every worker that calls a backend.

    Updates take a lock, so the ledger stays exact when backends are driven
    from several threads as well as several tasks.
    """

    __lock__: threading.Lock
    __counters__: dict[str, int]

    def __init__(self) -> None:
        self.__lock__ = threading.Lock()
        self.__counters__ = {
            "calls": 0,
            "samples": 0,
            "failed_samples": 0,
            "prompt_tokens": 0,
            "completion_tokens": 0,
        }

    def record(
        self,
        *,
        samples: int,
        failed: int = 0,
        prompt_tokens: int = 0,
        completion_tokens: int = 0,
    ) -> None:
        """
        Account for one backend call.

        Args:
            samples: Samples the call returned, failed ones included.
            failed: How many of them were replaced by a GenerationError.
            prompt_tokens: Prompt tokens the backend reported.
            completion_tokens: Completion tokens the backend reported.
        """
        with self.__lock__:
            self.__counters__["calls"] += 1
            self.__counters__["samples"] += samples
            self.__counters__["failed_samples"] += failed
            self.__counters__["prompt_tokens"] += prompt_tokens
            self.__counters__["completion_tokens"] += completion_tokens

    def snapshot(self) -> dict[str, int]:
        """Copy of every counter, taken under the lock."""
        with self.__lock__:
            return dict(self.__counters__)

    @property
    def calls(self) -> int:
        return self.snapshot()["calls"]

    @property
    def samples(self) -> int:
        return self.snapshot()["samples"]


class PolicyBackend(ABC):
    """
    The generative policy seen as a sampling service.

    Subclasses implement ``__generate__``; callers use ``complete``, which
    validates the request, checks the sample count and records usage.
    """

    ledger: BudgetLedger

    def __init__(self, *, ledger: BudgetLedger | None = None) -> None:
        self.ledger = ledger or BudgetLedger()

    async def complete(
        self,
        problem: Problem,
        prefix: Sequence[str],
        params: SamplingParams,
        n: int,
        *,
        draw_offset: int = 0,
    ) -> list[Sample]:
        """
        Sample ``n`` continuations of ``problem`` after the steps in ``prefix``.

        Args:
            problem: The problem being solved.
            prefix: Steps already taken; continuations never repeat them.
            params: Sampling settings.
            n: Number of samples.
            draw_offset: Index of the first draw for this prefix. Draw ``i`` of
                the request has index ``draw_offset + i``; the mock backend
                keys its randomness on it.

        Returns:
            Exactly ``n`` entries, each the continuation text or the
            GenerationError that replaced that sample.

        Raises:
            ValidationError: If ``n`` is smaller than one.
            TransportError: If the backend stayed unreachable.
            AuthError: If the backend rejected the credentials.
        """
        if n < 1:
            raise ValidationError(f"n must be >= 1, got {n}")

        samples, usage = await self.__generate__(
            problem, list(prefix), params, n, draw_offset
        )
        if len(samples) != n:
            raise ProtocolError(f"backend returned {len(samples)} samples, wanted {n}")

        failed = sum(isinstance(sample, GenerationError) for sample in samples)
        self.ledger.record(
            samples=n,
            failed=failed,
            prompt_tokens=usage.get("prompt_tokens", 0),
            completion_tokens=usage.get("completion_tokens", 0),
        )
        return samples

    @abstractmethod
    async def __generate__(
        self,
        problem: Problem,
        prefix: list[str],
        params: SamplingParams,
        n: int,
        draw_offset: int,
    ) -> tuple[list[Sample], dict[str, int]]:
        """Return the samples and a token usage mapping."""
        pass  # pragma: no cover

    async def aclose(self) -> None:
        return None


class RemoteBackend(PolicyBackend):
    """
    Chat-completion endpoint client (``POST {api_base}/chat/completions``).

    The question and its images form the user turn; a non-empty prefix is
    replayed as an assistant turn followed by a request to continue, so the
    reply holds only the new steps.
    """

    settings: BackendSettings
    __client__: httpx.AsyncClient

    def __init__(
        self,
        settings: BackendSettings,
        *,
        ledger: BudgetLedger | None = None,
        transport: httpx.AsyncBaseTransport | None = None,
    ) -> None:
        super().__init__(ledger=ledger)
        if not settings.api_base:
            raise ValidationError(
                "remote backend needs an endpoint (api_base or PRM_FORGE_API_BASE)"
            )
        if not settings.api_key:
            logger.warning(
                "No API key configured (%s); requests are sent unauthenticated",
                settings.api_key_env,
            )
        self.settings = settings
        self.__client__ = httpx.AsyncClient(
            timeout=httpx.Timeout(settings.timeout), transport=transport
        )

    @property
    def url(self) -> str:
        return f"{str(self.settings.api_base).rstrip('/')}/chat/completions"

    def build_messages(
        self, problem: Problem, prefix: Sequence[str]
    ) -> list[dict[str, Any]]:
        content: list[dict[str, Any]] = [{"type": "text", "text": problem.question}]
        content.extend(
            {"type": "image_url", "image_url": {"url": image.url}}
            for image in problem.images
        )
        messages: list[dict[str, Any]] = [
            {"role": "system", "content": self.settings.system_prompt},
            {"role": "user", "content": content},
        ]
        if prefix:
            messages.append({"role": "assistant", "content": render_steps(prefix)})
            messages.append(
                {
                    "role": "user",
                    "content": "Continue the solution after the last step "
                    "without repeating earlier steps.",
                }
            )
        return messages

    def build_body(
        self, problem: Problem, prefix: Sequence[str], params: SamplingParams, n: int
    ) -> dict[str, Any]:
        """
        Chat-completions request for ``n`` continuations of ``prefix``.

        ``top_k`` is sent only when the settings allow non-standard sampling
        fields.
        """
        body: dict[str, Any] = {
            "model": self.settings.model,
            "messages": self.build_messages(problem, prefix),
            "temperature": params.temperature,
            "top_p": params.top_p,
            "n": n,
            "max_tokens": params.max_tokens,
        }
        if self.settings.top_k_supported:
            body["top_k"] = params.top_k
        if params.seed is not None:
            body["seed"] = params.seed
        return body

    async def __generate__(
        self,
        problem: Problem,
        prefix: list[str],
        params: SamplingParams,
        n: int,
        draw_offset: int,
    ) -> tuple[list[Sample], dict[str, int]]:
        headers = {"Content-Type": "application/json"}
        if self.settings.api_key:
            headers["Authorization"] = f"Bearer {self.settings.api_key}"

        body = await post_json(
            self.__client__,
            self.url,
            self.build_body(problem, prefix, params, n),
            headers=headers,
            max_retries=self.settings.max_retries,
            base_delay=self.settings.retry_base_delay,
        )

        choices = body.get("choices")
        if not isinstance(choices, list) or len(choices) != n:
            raise ProtocolError(f"expected {n} choices from {self.url}")

        echoed = render_steps(prefix)
        samples: list[Sample] = []
        for index, choice in enumerate(choices):
            message = choice.get("message") or {}
            text = message.get("content") or ""
            if choice.get("finish_reason") == "content_filter":
                samples.append(GenerationError(f"sample {index} refused"))
            elif not text.strip():
                samples.append(GenerationError(f"sample {index} is empty"))
            else:
                if echoed and text.startswith(echoed):
                    text = text[len(echoed) :]
                samples.append(text)

        usage = body.get("usage") or {}
        return samples, {
            "prompt_tokens": int(usage.get("prompt_tokens", 0)),
            "completion_tokens": int(usage.get("completion_tokens", 0)),
        }

    async def aclose(self) -> None:
        await self.__client__.aclose()


class MockScript(BaseModel):
    """
    Behaviour of the mock policy on one problem.

    Modes, by precedence:

    * ``completions``: raw texts returned by draw index, cycling.
    * ``chain`` + ``first_error``: a scripted erroneous path. Clean chain
      prefixes of length >= 1 and < ``first_error`` always continue correctly;
      prefixes through the erroneous step always continue the chain to a wrong
      answer. At the root, ``root_pattern`` (cycled by draw index) or ``q``
      decides between the two.
    * parametric: from a clean prefix a completion is correct with probability
      ``q``; an incorrect one carries exactly one step tagged with FLAW_TAG,
      and every prefix containing a tagged step only continues incorrectly.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    q: float = Field(0.5, ge=0.0, le=1.0)
    steps: int = Field(4, ge=1)
    completions: tuple[str, ...] | None = None
    chain: tuple[str, ...] | None = None
    first_error: int | None = Field(None, ge=1)
    root_pattern: tuple[bool, ...] | None = None
    wrong_answer: str | None = None

    @model_validator(mode="after")
    def check_chain(self) -> Self:
        if (self.chain is None) != (self.first_error is None):
            raise ValueError("'chain' and 'first_error' go together")
        if self.chain is not None and self.first_error is not None:
            if self.first_error > len(self.chain):
                raise ValueError("'first_error' is past the end of 'chain'")
            for step in self.chain:
                if not step.strip() or step != step.strip():
                    raise ValueError("chain steps must be non-empty and stripped")
                if TAG_PATTERN.search(step):
                    raise ValueError("chain steps must not contain tags")
        if self.completions is not None and not self.completions:
            raise ValueError("'completions' must not be empty")
        if self.root_pattern is not None and not self.root_pattern:
            raise ValueError("'root_pattern' must not be empty")
        return self


class MockScriptFile(BaseModel):
    """A ``default`` script plus per-problem overrides keyed by problem id."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    default: MockScript = Field(default_factory=MockScript)
    problems: dict[str, MockScript] = Field(default_factory=dict)

    def for_problem(self, problem_id: str) -> MockScript:
        return self.problems.get(problem_id, self.default)


def load_mock_script(path: Path) -> MockScriptFile:
    """Read a mock script from YAML (or JSON, which YAML accepts)."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
    except (OSError, yaml.YAMLError) as err:
        raise ValidationError(f"cannot read mock script {path}: {err}") from err
    return MockScriptFile.model_validate(raw)


def wrong_answer(problem: Problem, script: MockScript | None = None) -> str:
    """An answer that never verifies against ``problem.gold_answer``."""
    if script is not None and script.wrong_answer:
        return script.wrong_answer
    gold = problem.gold_answer.strip()
    if problem.kind == AnswerKind.MULTIPLE_CHOICE:
        letter = gold.upper()[:1]
        return next(c for c in "ABCDE" if c != letter)
    value = parse_number(normalize_answer(gold))
    if value is not None:
        shifted = value + 1
        if shifted.denominator == 1:
            return str(shifted.numerator)
        return f"{shifted.numerator}/{shifted.denominator}"
    return f"not {gold}"


def _render(steps: Sequence[str], answer: str) -> str:
    return f"{render_steps(steps)}<answer>{answer}</answer>"


class MockBackend(PolicyBackend):
    """
    Deterministic scripted policy.

    Every sample is a pure function of (seed, problem id, prefix, draw index),
    so estimates drawn in parallel equal those drawn serially and reruns are
    bit-identical.
    """

    script: MockScriptFile
    seed: int

    def __init__(
        self,
        script: MockScriptFile | MockScript | None = None,
        *,
        seed: int = 0,
        ledger: BudgetLedger | None = None,
    ) -> None:
        super().__init__(ledger=ledger)
        if isinstance(script, MockScript):
            script = MockScriptFile(default=script)
        self.script = script or MockScriptFile()
        self.seed = seed

    async def __generate__(
        self,
        problem: Problem,
        prefix: list[str],
        params: SamplingParams,
        n: int,
        draw_offset: int,
    ) -> tuple[list[Sample], dict[str, int]]:
        script = self.script.for_problem(problem.id)
        seed = params.seed if params.seed is not None else self.seed
        digest = prefix_digest(prefix)

        samples: list[Sample] = []
        completion_tokens = 0
        for draw in range(draw_offset, draw_offset + n):
            rng = rng_for(seed, "mock", problem.id, len(prefix), digest, draw)
            text = self.__draw__(script, problem, prefix, draw, rng)
            if not text.strip():
                samples.append(GenerationError(f"draw {draw} produced no output"))
                continue
            completion_tokens += len(text.split())
            samples.append(text)

        return samples, {"completion_tokens": completion_tokens}

    def __draw__(
        self,
        script: MockScript,
        problem: Problem,
        prefix: list[str],
        draw: int,
        rng: np.random.Generator,
    ) -> str:
        if script.completions is not None:
            return script.completions[draw % len(script.completions)]
        if script.chain is not None:
            return self.__draw_chain__(script, problem, prefix, draw, rng)
        return self.__draw_parametric__(script, problem, prefix, rng)

    @staticmethod
    def __draw_chain__(
        script: MockScript,
        problem: Problem,
        prefix: list[str],
        draw: int,
        rng: np.random.Generator,
    ) -> str:
        chain = list(script.chain or ())
        error = int(script.first_error or 1)
        depth = len(prefix)
        wrong = wrong_answer(problem, script)

        if depth >= error and prefix[:error] == chain[:error]:
            rest = chain[depth:] or [f"Step {depth + 1}: so the answer is {wrong}."]
            return _render(rest, wrong)

        if depth < error and prefix == chain[:depth]:
            if depth > 0:
                correct = True
            elif script.root_pattern is not None:
                correct = script.root_pattern[draw % len(script.root_pattern)]
            else:
                correct = bool(rng.random() < script.q)
            if not correct:
                return _render(chain[depth:], wrong)
            revised = [f"{step} (revised)" for step in chain[error - 1 :]]
            return _render(chain[depth : error - 1] + revised, problem.gold_answer)

        return _render(
            [f"Step {depth + 1}: finish from the revised reasoning."],
            problem.gold_answer,
        )

    @staticmethod
    def __draw_parametric__(
        script: MockScript,
        problem: Problem,
        prefix: list[str],
        rng: np.random.Generator,
    ) -> str:
        depth = len(prefix)
        remaining = max(1, script.steps - depth)
        tainted = any(FLAW_TAG in step for step in prefix)
        correct = bool(rng.random() < script.q) and not tainted
        flaw_at = -1 if correct or tainted else int(rng.integers(remaining))

        steps = []
        for offset in range(remaining):
            token = int(rng.integers(16**6))
            text = f"Step {depth + offset + 1}: derive intermediate result {token:06x}."
            if offset == flaw_at:
                text = f"{text} {FLAW_TAG}"
            steps.append(text)

        answer = problem.gold_answer if correct else wrong_answer(problem, script)
        return _render(steps, answer)


def build_backend(
    settings: BackendSettings,
    *,
    seed: int = 0,
    ledger: BudgetLedger | None = None,
) -> PolicyBackend:
    """Construct the backend named by ``settings.kind``."""
    if settings.kind == "mock":
        script = (
            load_mock_script(settings.mock_script)
            if settings.mock_script is not None
            else None
        )
        return MockBackend(script, seed=seed, ledger=ledger)
    return RemoteBackend(settings, ledger=ledger)
