import random

from pytest import mark, raises

from prmforge.errors import ParseError
from prmforge.models import TAG_PATTERN, Solution
from prmforge.parsing import parse_solution, render_solution


async def test_extracts_steps_and_first_answer():
    raw = (
        "Let me think. <step>Add 2 and 2.</step> so then "
        "<step>  The sum is 4. </step><answer>4</answer><answer>5</answer>"
    )
    solution = parse_solution(raw)

    assert solution.steps == ("Add 2 and 2.", "The sum is 4.")
    assert solution.final_answer == "4"


async def test_skips_blank_steps():
    solution = parse_solution("<step>   </step><step>x</step><answer>1</answer>")
    assert solution.steps == ("x",)


@mark.parametrize(
    "raw",
    [
        "<step>a<step>b</step><answer>1</answer>",
        "<step>a</step></answer>",
        "<step>a</answer>",
        "<step>a</step><answer>1",
    ],
)
async def test_malformed_tags(raw):
    with raises(ParseError, match="malformed tags"):
        parse_solution(raw)


async def test_no_steps():
    with raises(ParseError, match="no steps"):
        parse_solution("<answer>3</answer>")


async def test_no_answer():
    with raises(ParseError, match="no answer"):
        parse_solution("<step>a</step><answer>  </answer>")


async def test_render_is_inverted_by_parse():
    solution = Solution(
        steps=("Étape un.", "x < y holds."), final_answer="\\frac{1}{2}"
    )
    assert parse_solution(render_solution(solution)) == solution


_ALPHABET = "ab xyz019<>/+=.étapeπ√∑\\{}$"


def _span(rng: random.Random) -> str:
    while True:
        text = "".join(rng.choices(_ALPHABET, k=rng.randint(1, 24))).strip()
        if text and not TAG_PATTERN.search(text):
            return text


@mark.parametrize("seed", range(200))
async def test_random_solutions_round_trip(seed):
    rng = random.Random(seed)
    solution = Solution(
        steps=tuple(_span(rng) for _ in range(rng.randint(1, 8))),
        final_answer=_span(rng),
    )

    assert parse_solution(render_solution(solution)) == solution
