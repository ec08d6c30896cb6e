import json

import httpx
from pytest import raises

from prmforge.config import BackendSettings, SamplingParams
from prmforge.errors import (
    AuthError,
    GenerationError,
    ProtocolError,
    TransportError,
    ValidationError,
)
from prmforge.models import AnswerKind, ImageAttachment
from prmforge.parsing import parse_solution
from prmforge.policy import (
    FLAW_TAG,
    BudgetLedger,
    MockBackend,
    MockScript,
    RemoteBackend,
    build_backend,
    load_mock_script,
    wrong_answer,
)
from tests.conftest import CHAIN, make_problem

PARAMS = SamplingParams()


def remote(handler, **overrides):
    settings = BackendSettings(
        api_base="http://policy.test/v1",
        api_key="secret",
        retry_base_delay=0.0,
        **overrides,
    )
    return RemoteBackend(settings, transport=httpx.MockTransport(handler))


def choices(*texts, finish="stop"):
    return {
        "choices": [
            {"message": {"content": text}, "finish_reason": finish} for text in texts
        ],
        "usage": {"prompt_tokens": 11, "completion_tokens": 7},
    }


async def test_remote_request_body_and_auth():
    seen = {}

    def handler(request):
        seen["url"] = str(request.url)
        seen["auth"] = request.headers.get("Authorization")
        seen["body"] = json.loads(request.content)
        return httpx.Response(200, json=choices("<step>a</step><answer>4</answer>"))

    backend = remote(handler)
    problem = make_problem().model_copy(
        update={"images": (ImageAttachment(uri="http://img.test/1.png"),)}
    )
    params = SamplingParams(temperature=0.7, seed=3)

    samples = await backend.complete(problem, ["first"], params, 1)

    assert samples == ["<step>a</step><answer>4</answer>"]
    assert seen["url"] == "http://policy.test/v1/chat/completions"
    assert seen["auth"] == "Bearer secret"
    body = seen["body"]
    assert body["n"] == 1
    assert body["temperature"] == 0.7
    assert body["top_k"] == 50
    assert body["seed"] == 3
    user = body["messages"][1]["content"]
    assert user[1] == {
        "type": "image_url",
        "image_url": {"url": "http://img.test/1.png"},
    }
    assert body["messages"][2] == {
        "role": "assistant",
        "content": "<step>first</step>",
    }
    assert backend.ledger.snapshot()["prompt_tokens"] == 11
    await backend.aclose()


async def test_remote_omits_top_k_when_unsupported():
    seen = {}

    def handler(request):
        seen.update(json.loads(request.content))
        return httpx.Response(200, json=choices("<step>a</step><answer>4</answer>"))

    backend = remote(handler, top_k_supported=False)
    await backend.complete(make_problem(), [], PARAMS, 1)

    assert "top_k" not in seen
    assert "seed" not in seen


async def test_remote_strips_echoed_prefix():
    def handler(request):
        return httpx.Response(
            200, json=choices("<step>first</step><step>b</step><answer>4</answer>")
        )

    samples = await remote(handler).complete(make_problem(), ["first"], PARAMS, 1)
    assert parse_solution(samples[0]).steps == ("b",)


async def test_remote_refusals_become_generation_errors():
    def handler(request):
        body = choices("<step>a</step><answer>4</answer>", "")
        body["choices"].append(
            {"message": {"content": "no"}, "finish_reason": "content_filter"}
        )
        return httpx.Response(200, json=body)

    ledger = BudgetLedger()
    backend = remote(handler)
    backend.ledger = ledger
    samples = await backend.complete(make_problem(), [], PARAMS, 3)

    assert isinstance(samples[0], str)
    assert isinstance(samples[1], GenerationError)
    assert isinstance(samples[2], GenerationError)
    assert ledger.snapshot()["failed_samples"] == 2


async def test_remote_auth_failure_is_not_retried():
    calls = 0

    def handler(request):
        nonlocal calls
        calls += 1
        return httpx.Response(401)

    with raises(AuthError):
        await remote(handler).complete(make_problem(), [], PARAMS, 1)
    assert calls == 1


async def test_remote_retries_server_errors():
    calls = 0

    def handler(request):
        nonlocal calls
        calls += 1
        return httpx.Response(500)

    with raises(TransportError):
        await remote(handler, max_retries=3).complete(make_problem(), [], PARAMS, 1)
    assert calls == 3


async def test_remote_recovers_after_transient_failure():
    calls = 0

    def handler(request):
        nonlocal calls
        calls += 1
        if calls == 1:
            raise httpx.ConnectError("refused", request=request)
        return httpx.Response(200, json=choices("<step>a</step><answer>4</answer>"))

    samples = await remote(handler).complete(make_problem(), [], PARAMS, 1)
    assert len(samples) == 1
    assert calls == 2


async def test_remote_choice_count_mismatch():
    def handler(request):
        return httpx.Response(200, json=choices("<step>a</step><answer>4</answer>"))

    with raises(ProtocolError):
        await remote(handler).complete(make_problem(), [], PARAMS, 2)


async def test_remote_needs_endpoint():
    with raises(ValidationError):
        RemoteBackend(BackendSettings())


async def test_complete_rejects_zero_samples():
    with raises(ValidationError):
        await MockBackend().complete(make_problem(), [], PARAMS, 0)


async def test_wrong_answer_never_verifies():
    assert wrong_answer(make_problem(gold="B", kind=AnswerKind.MULTIPLE_CHOICE)) == "A"
    assert wrong_answer(make_problem(gold="A", kind=AnswerKind.MULTIPLE_CHOICE)) == "B"
    assert wrong_answer(make_problem(gold="4")) == "5"
    assert wrong_answer(make_problem(gold="1/2")) == "3/2"
    assert wrong_answer(make_problem(gold="blue")) == "not blue"
    assert wrong_answer(make_problem(), MockScript(wrong_answer="seven")) == "seven"


async def test_mock_table_mode_cycles_by_draw():
    script = MockScript(completions=("one", "two", "three"))
    samples = await MockBackend(script).complete(
        make_problem(), [], PARAMS, 4, draw_offset=1
    )
    assert samples == ["two", "three", "one", "two"]


async def test_mock_table_mode_empty_text_is_generation_error():
    samples = await MockBackend(MockScript(completions=("  ",))).complete(
        make_problem(), [], PARAMS, 1
    )
    assert isinstance(samples[0], GenerationError)


async def test_mock_chain_mode(chain_script):
    problem = make_problem(gold="4")
    backend = MockBackend(chain_script)

    root = [parse_solution(s) for s in await backend.complete(problem, [], PARAMS, 2)]
    assert root[0].final_answer == "4"
    assert root[0].steps[:2] == CHAIN[:2]
    assert root[0].steps[2] == f"{CHAIN[2]} (revised)"
    assert root[1] == parse_solution(
        "".join(f"<step>{s}</step>" for s in CHAIN) + "<answer>5</answer>"
    )

    clean = await backend.complete(problem, list(CHAIN[:2]), PARAMS, 8)
    assert all(parse_solution(s).final_answer == "4" for s in clean)

    tainted = await backend.complete(problem, list(CHAIN[:3]), PARAMS, 8)
    assert all(parse_solution(s).steps == CHAIN[3:] for s in tainted)
    assert all(parse_solution(s).final_answer == "5" for s in tainted)


async def test_mock_parametric_flaws():
    problem = make_problem()
    wrong = MockBackend(MockScript(q=0.0, steps=5))
    for sample in await wrong.complete(problem, [], PARAMS, 20):
        solution = parse_solution(sample)
        assert len(solution.steps) == 5
        assert sum(FLAW_TAG in step for step in solution.steps) == 1
        assert solution.final_answer == "5"

    right = MockBackend(MockScript(q=1.0, steps=5))
    for sample in await right.complete(problem, ["s1", "s2"], PARAMS, 20):
        solution = parse_solution(sample)
        assert len(solution.steps) == 3
        assert not any(FLAW_TAG in step for step in solution.steps)
        assert solution.final_answer == "4"

    tainted = await right.complete(problem, [f"s1 {FLAW_TAG}"], PARAMS, 20)
    assert all(parse_solution(s).final_answer == "5" for s in tainted)


async def test_mock_is_deterministic_per_draw():
    problem = make_problem()
    backend = MockBackend(MockScript(q=0.5), seed=11)

    whole = await backend.complete(problem, ["s"], PARAMS, 6)
    head = await backend.complete(problem, ["s"], PARAMS, 2)
    tail = await backend.complete(problem, ["s"], PARAMS, 4, draw_offset=2)

    assert whole == head + tail
    assert backend.ledger.calls == 3
    assert backend.ledger.samples == 12


async def test_load_mock_script_with_overrides(tmp_path):
    path = tmp_path / "script.yaml"
    path.write_text(
        "default:\n  q: 0.25\nproblems:\n  p2:\n    completions: ['x']\n",
        encoding="utf-8",
    )
    script = load_mock_script(path)

    assert script.for_problem("p1").q == 0.25
    assert script.for_problem("p2").completions == ("x",)


async def test_load_mock_script_rejects_unreadable(tmp_path):
    with raises(ValidationError):
        load_mock_script(tmp_path / "missing.yaml")


async def test_mock_script_chain_validation():
    with raises(ValueError):
        MockScript(chain=CHAIN)
    with raises(ValueError):
        MockScript(chain=CHAIN, first_error=5)


async def test_build_backend_mock(chain_script_file):
    backend = build_backend(
        BackendSettings(kind="mock", mock_script=chain_script_file), seed=2
    )
    assert isinstance(backend, MockBackend)
    assert backend.seed == 2
    assert backend.script.default.first_error == 3
