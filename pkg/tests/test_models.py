import pydantic
from pytest import raises

from prmforge.models import AggregationMethod, ImageAttachment, Problem, Solution


async def test_problem_ignores_unknown_fields_and_checks_gold():
    problem = Problem.model_validate(
        {
            "id": "p1",
            "question": "q",
            "gold_answer": "4",
            "kind": "fill_in_blank",
            "extra": 1,
        }
    )
    assert problem.images == ()

    with raises(pydantic.ValidationError):
        Problem(id="p1", question="q", gold_answer="  ", kind="fill_in_blank")


async def test_image_forms():
    blob = ImageAttachment(b64="AAAA", media_type="image/png")
    assert blob.url == "data:image/png;base64,AAAA"
    assert blob.to_json() == {"b64": "AAAA", "media_type": "image/png"}

    with raises(pydantic.ValidationError):
        ImageAttachment()
    with raises(pydantic.ValidationError):
        ImageAttachment(uri="http://img.test/a.png", b64="AAAA")
    with raises(pydantic.ValidationError):
        ImageAttachment(b64="AAAA")


async def test_solution_needs_steps_and_answer():
    with raises(pydantic.ValidationError):
        Solution(steps=(), final_answer="4")
    with raises(pydantic.ValidationError):
        Solution(steps=("a", " "), final_answer="4")
    with raises(pydantic.ValidationError):
        Solution(steps=("a",), final_answer="")


async def test_method_names():
    assert [str(m) for m in AggregationMethod] == [
        "Min",
        "Max",
        "Average",
        "SumLogPr",
        "SumLogOdds",
        "MeanOdds",
        "Random",
    ]


async def test_solution_rejects_text_that_cannot_round_trip():
    with raises(pydantic.ValidationError, match="whitespace"):
        Solution(steps=(" a",), final_answer="4")
    with raises(pydantic.ValidationError, match="whitespace"):
        Solution(steps=("a",), final_answer="4\n")
    with raises(pydantic.ValidationError, match="tags"):
        Solution(steps=("use <step> tags",), final_answer="4")
    with raises(pydantic.ValidationError, match="tags"):
        Solution(steps=("a",), final_answer="x</answer>y")

    kept = Solution(steps=("x < y and <b> is bold",), final_answer="<5")
    assert kept.final_answer == "<5"
