from pytest import mark, raises

from prmforge.errors import ValidationError
from prmforge.models import AnswerKind
from prmforge.verify import normalize_answer, parse_number, verify_answer

FILL = AnswerKind.FILL_IN_BLANK
CHOICE = AnswerKind.MULTIPLE_CHOICE


@mark.parametrize(
    ("text", "expected"),
    [
        ("$\\boxed{42}$", "42"),
        ("  The  Answer. ", "the answer"),
        ("\\left(3\\right)", "(3)"),
        ("\\dfrac{1}{2}", "(1)/(2)"),
    ],
)
async def test_normalize_answer(text, expected):
    assert normalize_answer(text) == expected


async def test_parse_number():
    assert parse_number("(1)/(2)") == parse_number("0.5")
    assert parse_number("1e3") == 1000
    assert parse_number("1/0") is None
    assert parse_number("x + 1") is None


@mark.parametrize(
    ("predicted", "gold", "kind"),
    [
        ("(b)", "B", CHOICE),
        ("c.", "C", CHOICE),
        ("\\frac{1}{2}", "0.5", FILL),
        ("1000", "1e3", FILL),
        ("1.0000001", "1", FILL),
        ("3/2", "1.5", FILL),
        ("$x+1$", "X+1", FILL),
    ],
)
async def test_matching_answers(predicted, gold, kind):
    assert verify_answer(predicted, gold, kind)
    assert verify_answer(gold, predicted, kind)


@mark.parametrize(
    ("predicted", "gold", "kind"),
    [
        ("A", "B", CHOICE),
        ("1.01", "1", FILL),
        ("1.4999", "1.5", FILL),
        ("x+2", "x+1", FILL),
        ("not 4", "4", FILL),
    ],
)
async def test_mismatching_answers(predicted, gold, kind):
    assert not verify_answer(predicted, gold, kind)
    assert not verify_answer(gold, predicted, kind)


async def test_empty_answers_are_rejected():
    with raises(ValidationError):
        verify_answer(" ", "4", FILL)
