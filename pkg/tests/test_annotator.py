import math

from pytest import approx, mark, raises

from prmforge.annotator import (
    SearchBudget,
    StateTree,
    TreeNode,
    annotate_problem,
    locate_first_error,
    selection_score,
)
from prmforge.config import SearchSettings
from prmforge.errors import BudgetExhaustedError, ValidationError
from prmforge.estimator import MCEstimate, RolloutRecord
from prmforge.models import Solution
from prmforge.policy import MockBackend, MockScript
from prmforge.telemetry import EventKind, Telemetry
from tests.conftest import CHAIN, make_problem

WRONG = Solution(steps=("x",), final_answer="5")


def estimate(n_correct, n):
    return MCEstimate(
        rollouts=tuple(
            RolloutRecord(0, None if i < n_correct else WRONG, i < n_correct, i)
            for i in range(n)
        )
    )


def planted(error_at):
    evaluated = []

    def mc_fn(prefix):
        evaluated.append(len(prefix))
        return estimate(0, 4) if len(prefix) >= error_at else estimate(2, 4)

    return mc_fn, evaluated


def path(length):
    return Solution(steps=tuple(f"s{i}" for i in range(length)), final_answer="5")


async def test_selection_score_prefers_uncertain_nodes():
    a, b = TreeNode(("a",)), TreeNode(("b",))
    a.mc, a.visits = estimate(2, 4), 3
    b.mc, b.visits = estimate(1, 4), 0

    assert selection_score(a, 3, 0.125) == approx(1.0541, abs=1e-4)
    assert selection_score(b, 3, 0.125) == approx(0.7165, abs=1e-4)


async def test_selection_score_needs_estimate_and_visits():
    node = TreeNode(("a",))
    with raises(ValidationError):
        selection_score(node, 1, 0.125)
    node.mc = estimate(1, 2)
    with raises(ValidationError):
        selection_score(node, 0, 0.125)


async def test_binary_search_on_planted_error():
    mc_fn, evaluated = planted(5)
    assert await locate_first_error(make_problem(), path(8), mc_fn) == 5
    assert len(evaluated) <= 4


async def test_binary_search_agrees_with_linear_scan():
    for length in range(1, 33):
        bound = math.ceil(math.log2(length)) + 1
        for error_at in range(1, length + 2):
            mc_fn, evaluated = planted(error_at)
            found = await locate_first_error(make_problem(), path(length), mc_fn)

            scan_fn, _ = planted(error_at)
            linear = next(
                (t for t in range(1, length + 1) if scan_fn(("s",) * t).value == 0.0),
                None,
            )
            assert found == linear
            assert len(evaluated) <= bound
            assert len(set(evaluated)) == len(evaluated)


async def test_binary_search_single_step():
    mc_fn, evaluated = planted(1)
    assert await locate_first_error(make_problem(), path(1), mc_fn) == 1
    assert evaluated == [1]


async def test_binary_search_finds_nothing():
    mc_fn, _ = planted(99)
    assert await locate_first_error(make_problem(), path(6), mc_fn) is None


async def test_binary_search_starts_after_known_good_prefix():
    mc_fn, evaluated = planted(5)
    found = await locate_first_error(make_problem(), path(8), mc_fn, known_good=4)

    assert found == 5
    assert min(evaluated) == 5


async def test_binary_search_accepts_async_mc_fn():
    sync_fn, _ = planted(3)

    async def mc_fn(prefix):
        return sync_fn(prefix)

    assert await locate_first_error(make_problem(), path(4), mc_fn) == 3


async def test_binary_search_debits_one_search_step():
    budget = SearchBudget(max_search_steps=1)
    mc_fn, _ = planted(2)

    await locate_first_error(make_problem(), path(4), mc_fn, budget)
    assert budget.used_search_steps == 1
    with raises(BudgetExhaustedError):
        await locate_first_error(make_problem(), path(4), mc_fn, budget)


async def test_tree_insert_and_check():
    tree = StateTree()
    node = tree.insert(("a", "b", "c"))

    assert node.depth == 3
    assert node.step == "c"
    assert tree.find(("a", "b")) is node.parent
    assert tree.find(("a", "x")) is None
    assert len(tree) == 4
    tree.check()

    node.parent.children["z"] = TreeNode(("a", "q"), node.parent)
    with raises(ValidationError):
        tree.check()


async def test_absorb_keeps_pool_only_while_uncertain():
    node = TreeNode(("a",))
    node.absorb(estimate(2, 4))
    assert len(node.incorrect_pool) == 2

    node.absorb(estimate(4, 4))
    assert node.mc.n_rollouts == 8
    assert len(node.incorrect_pool) == 2

    settled = TreeNode(("b",))
    settled.absorb(estimate(4, 4))
    assert settled.incorrect_pool == []


async def test_annotates_planted_error(chain_script):
    problem = make_problem()
    budget = SearchBudget()
    tree = StateTree()

    annotations = await annotate_problem(
        problem, MockBackend(chain_script), SearchSettings(), budget, tree=tree
    )

    by_len = {len(a.prefix) + 1: a for a in annotations}
    assert set(by_len) == {2, 3}
    assert by_len[2].soft_label > 0
    assert by_len[2].step == CHAIN[1]
    assert by_len[3].soft_label == 0
    assert by_len[3].prefix == CHAIN[:2]
    assert budget.used_search_steps == 4
    tree.check()
    assert tree.root.incorrect_pool == []


@mark.parametrize("seed", range(50))
async def test_planted_error_across_seeds(seed, chain_script):
    annotations = await annotate_problem(
        make_problem(),
        MockBackend(chain_script, seed=seed),
        SearchSettings(),
        SearchBudget(),
    )

    assert annotations
    labels = {len(a.prefix) + 1: a.soft_label for a in annotations}
    assert labels.keys() == {2, 3}
    assert labels[2] > 0
    assert labels[3] == 0.0


async def test_settled_problem_yields_nothing():
    events = []
    telemetry = Telemetry(log=False)
    telemetry.on_event.add_listener(events.append)

    annotations = await annotate_problem(
        make_problem(),
        MockBackend(MockScript(q=1.0)),
        SearchSettings(),
        SearchBudget(),
        telemetry=telemetry,
    )

    assert annotations == []
    assert [e.kind for e in events] == [
        EventKind.PROBLEM_START,
        EventKind.ROOT_ESTIMATE,
        EventKind.SKIP,
        EventKind.PROBLEM_DONE,
    ]


async def test_root_only_budget(chain_script):
    budget = SearchBudget(max_rollouts=8)
    annotations = await annotate_problem(
        make_problem(), MockBackend(chain_script), SearchSettings(k=8), budget
    )

    assert annotations == []
    assert budget.used_rollouts == 8
    assert budget.used_search_steps == 0


async def test_last_estimate_is_clipped_to_budget(chain_script):
    budget = SearchBudget(max_rollouts=20)
    annotations = await annotate_problem(
        make_problem(), MockBackend(chain_script), SearchSettings(k=8), budget
    )

    counts = {len(a.prefix) + 1: a.n_rollouts for a in annotations}
    assert counts == {2: 8, 3: 4}
    assert budget.used_rollouts == 20


async def test_exhaustion_mid_search_keeps_harvest(chain_script):
    events = []
    telemetry = Telemetry(log=False)
    telemetry.on_event.add_listener(events.append)
    budget = SearchBudget(max_rollouts=16)

    annotations = await annotate_problem(
        make_problem(),
        MockBackend(chain_script),
        SearchSettings(k=8),
        budget,
        telemetry=telemetry,
    )

    assert [(a.step, a.soft_label) for a in annotations] == [(CHAIN[1], 1.0)]
    assert EventKind.BUDGET_EXHAUSTED in [e.kind for e in events]
    assert budget.used_rollouts == 16


async def test_search_step_cap(chain_script):
    budget = SearchBudget(max_search_steps=2)
    annotations = await annotate_problem(
        make_problem(), MockBackend(chain_script), SearchSettings(), budget
    )

    assert budget.used_search_steps == 2
    assert len(annotations) == 2


async def test_revisits_pool_rollouts_unless_disabled(chain_script):
    pooled = await annotate_problem(
        make_problem(), MockBackend(chain_script), SearchSettings(), SearchBudget()
    )
    single = await annotate_problem(
        make_problem(),
        MockBackend(chain_script),
        SearchSettings(pool_on_revisit=False),
        SearchBudget(),
    )

    assert [a.n_rollouts for a in pooled] == [32, 32]
    assert [a.n_rollouts for a in single] == [8, 8]


async def test_annotation_is_deterministic():
    script = MockScript(q=0.5, steps=6)

    async def run():
        return await annotate_problem(
            make_problem(),
            MockBackend(script, seed=4),
            SearchSettings(k=4),
            SearchBudget(max_search_steps=10, max_rollouts=200),
        )

    assert await run() == await run()
