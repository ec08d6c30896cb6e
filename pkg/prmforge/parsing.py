from collections.abc import Sequence

from prmforge.errors import ParseError
from prmforge.models import TAG_PATTERN, Solution

__all__ = ["parse_solution", "render_solution", "render_steps"]


def parse_solution(raw: str) -> Solution:
    """
    Extract the tagged reasoning steps and the final answer from model output.

    Every ``<step>...</step>`` span becomes a step, in order; the first
    ``<answer>...</answer>`` span is the final answer and later ones are
    ignored. Text outside the tags is connective prose and is dropped. Span
    bodies are stripped; whitespace-only steps are skipped.

    Raises:
        ParseError: "malformed tags" for unclosed, unmatched or nested tags,
            "no steps" when no non-empty step exists, "no answer" when no
            non-empty answer span exists.
    """
    steps: list[str] = []
    answer: str | None = None
    open_name: str | None = None
    body_start = 0

    for match in TAG_PATTERN.finditer(raw):
        closing, name = match.group(1) == "/", match.group(2)
        if not closing:
            if open_name is not None:
                raise ParseError("malformed tags")
            open_name, body_start = name, match.end()
            continue

        if open_name != name:
            raise ParseError("malformed tags")
        body = raw[body_start : match.start()].strip()
        if name == "step":
            if body:
                steps.append(body)
        elif answer is None:
            answer = body
        open_name = None

    if open_name is not None:
        raise ParseError("malformed tags")
    if not steps:
        raise ParseError("no steps")
    if not answer:
        raise ParseError("no answer")

    return Solution(steps=tuple(steps), final_answer=answer)


def render_steps(steps: Sequence[str]) -> str:
    return "".join(f"<step>{step}</step>" for step in steps)


def render_solution(solution: Solution) -> str:
    """Canonical tagged rendering; ``parse_solution`` inverts it."""
    return f"{render_steps(solution.steps)}<answer>{solution.final_answer}</answer>"
