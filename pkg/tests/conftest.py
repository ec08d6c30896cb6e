import json
import logging
from pathlib import Path

from pytest import fixture

from prmforge.models import AnswerKind, Problem
from prmforge.policy import MockScript

CHAIN = (
    "Step 1: read the figure.",
    "Step 2: set up the equation.",
    "Step 3: drop the sign.",
    "Step 4: conclude.",
)


def make_problem(
    problem_id: str = "p1",
    gold: str = "4",
    kind: AnswerKind = AnswerKind.FILL_IN_BLANK,
) -> Problem:
    return Problem(
        id=problem_id,
        question=f"Question {problem_id}: what is the value?",
        gold_answer=gold,
        kind=kind,
    )


def write_problems(path: Path, problems: list[Problem]) -> Path:
    with open(path, "w", encoding="utf-8") as fh:
        for problem in problems:
            fh.write(problem.model_dump_json() + "\n")
    return path


@fixture
def problem() -> Problem:
    return make_problem()


@fixture
def chain_script() -> MockScript:
    return MockScript(chain=CHAIN, first_error=3, root_pattern=(True, False))


@fixture
def problems_file(tmp_path: Path) -> Path:
    return write_problems(
        tmp_path / "problems.jsonl",
        [make_problem(f"p{i}", gold=str(i)) for i in range(10)],
    )


@fixture
def chain_script_file(tmp_path: Path) -> Path:
    path = tmp_path / "script.json"
    path.write_text(
        json.dumps(
            {
                "default": {
                    "chain": list(CHAIN),
                    "first_error": 3,
                    "root_pattern": [True, False],
                }
            }
        ),
        encoding="utf-8",
    )
    return path


@fixture
def restore_root_logger():
    root = logging.getLogger()
    handlers, level = [*root.handlers], root.level
    yield
    for handler in [*root.handlers]:
        root.removeHandler(handler)
    for handler in handlers:
        root.addHandler(handler)
    root.setLevel(level)
