import math
import re
import string
from fractions import Fraction

from prmforge.errors import ValidationError
from prmforge.models import AnswerKind

__all__ = ["normalize_answer", "parse_number", "verify_answer"]

REL_TOLERANCE = 1e-6

_PUNCT_AND_SPACE = str.maketrans("", "", string.punctuation + string.whitespace)
_LATEX_FRAC = re.compile(r"\\[dt]?frac\{([^{}]+)\}\{([^{}]+)\}")


def _normalize_choice(text: str) -> str:
    return text.upper().translate(_PUNCT_AND_SPACE)


def normalize_answer(text: str) -> str:
    """
    Canonical form of a fill-in-the-blank answer: lowercased, single-spaced,
    without enclosing ``$``, ``\\boxed{}``, ``\\left``/``\\right`` or a trailing
    period, with ``\\frac{a}{b}`` rewritten to ``(a)/(b)``.
    """
    text = text.strip()
    if len(text) > 1 and text.startswith("$") and text.endswith("$"):
        text = text[1:-1].strip()
    if boxed := re.fullmatch(r"\\boxed\{(.+)\}", text):
        text = boxed.group(1)
    text = text.replace("\\left", "").replace("\\right", "")
    text = _LATEX_FRAC.sub(r"(\1)/(\2)", text)
    text = " ".join(text.lower().split())
    return text.rstrip(".").strip()


def parse_number(text: str) -> Fraction | None:
    """
    Parse an integer, decimal, scientific or ``a/b`` rational literal.

    Returns:
        The exact value, or None when ``text`` is not a plain number.
    """
    compact = text.replace(" ", "")
    if frac := re.fullmatch(r"\(?([^()/]+)\)?/\(?([^()/]+)\)?", compact):
        num, den = _fraction(frac.group(1)), _fraction(frac.group(2))
        if num is None or den is None or den == 0:
            return None
        return num / den
    return _fraction(compact)


def _fraction(text: str) -> Fraction | None:
    try:
        value = Fraction(text)
    except (ValueError, ZeroDivisionError):
        return None
    return value


def verify_answer(predicted: str, gold: str, kind: AnswerKind) -> bool:
    """
    Decide whether ``predicted`` matches ``gold``.

    Multiple choice compares the uppercased letters with punctuation and
    whitespace removed. Fill-in-the-blank compares normalized strings and,
    when both sides are numbers, their values with relative tolerance 1e-6.
    The relation is symmetric.

    Raises:
        ValidationError: If either text is empty.
    """
    if not predicted.strip() or not gold.strip():
        raise ValidationError("answers to verify must be non-empty")

    if kind == AnswerKind.MULTIPLE_CHOICE:
        return _normalize_choice(predicted) == _normalize_choice(gold)

    left, right = normalize_answer(predicted), normalize_answer(gold)
    if left == right:
        return True

    a, b = parse_number(left), parse_number(right)
    if a is None or b is None:
        return False
    if a == b:
        return True
    try:
        return math.isclose(float(a), float(b), rel_tol=REL_TOLERANCE, abs_tol=0.0)
    except OverflowError:
        return False
