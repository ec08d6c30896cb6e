import inspect
import logging
import math
from collections.abc import Awaitable, Callable, Iterator, Sequence
from dataclasses import dataclass
from typing import Any

from prmforge.config import SamplingParams, SearchSettings
from prmforge.dataset import StepAnnotation
from prmforge.errors import BudgetExhaustedError, ValidationError
from prmforge.estimator import MCEstimate, RolloutRecord, estimate_mc
from prmforge.models import Problem, Solution
from prmforge.policy import PolicyBackend
from prmforge.telemetry import EventKind, Telemetry
from prmforge.utils import prefix_digest

__all__ = [
    "MCFunction",
    "SearchBudget",
    "StateTree",
    "TreeNode",
    "annotate_problem",
    "locate_first_error",
    "selection_score",
]

logger = logging.getLogger(__name__)

MCFunction = Callable[[tuple[str, ...]], MCEstimate | Awaitable[MCEstimate]]


@dataclass(slots=True)
class SearchBudget:
    """
    Per-problem search and rollout ledger.

    Both counters only grow through ``use_search_step`` and
    ``reserve_rollouts`` and never pass their caps.
    """

    max_search_steps: int = 200
    max_rollouts: int = 1000
    used_search_steps: int = 0
    used_rollouts: int = 0

    def __post_init__(self) -> None:
        if self.max_search_steps < 0 or self.max_rollouts < 0:
            raise ValidationError("budget caps must be non-negative")

    @classmethod
    def from_settings(cls, settings: SearchSettings) -> "SearchBudget":
        return cls(
            max_search_steps=settings.max_search_steps,
            max_rollouts=settings.max_rollouts,
        )

    @property
    def remaining_rollouts(self) -> int:
        return self.max_rollouts - self.used_rollouts

    @property
    def can_search(self) -> bool:
        return (
            self.used_search_steps < self.max_search_steps
            and self.remaining_rollouts > 0
        )

    def reserve_rollouts(self, k: int) -> int:
        """
        Debit up to ``k`` rollouts.

        Returns:
            The number actually granted, ``min(k, remaining)``.

        Raises:
            BudgetExhaustedError: If nothing is left.
        """
        if self.remaining_rollouts <= 0:
            raise BudgetExhaustedError(
                f"rollout budget of {self.max_rollouts} spent"
            )
        granted = min(k, self.remaining_rollouts)
        self.used_rollouts += granted
        return granted

    def release_rollouts(self, n: int) -> None:
        """
        Credit back ``n`` reserved rollouts that were never drawn.

        Args:
            n: Rollouts to return; the used count never drops below zero.
        """
        self.used_rollouts = max(0, self.used_rollouts - n)

    def use_search_step(self) -> None:
        """
        Debit one search step.

        Raises:
            BudgetExhaustedError: If the step cap is already reached.
        """
        if self.used_search_steps >= self.max_search_steps:
            raise BudgetExhaustedError(
                f"search budget of {self.max_search_steps} steps spent"
            )
        self.used_search_steps += 1

    def to_json(self) -> dict[str, int]:
        return {
            "used_rollouts": self.used_rollouts,
            "max_rollouts": self.max_rollouts,
            "used_search_steps": self.used_search_steps,
            "max_search_steps": self.max_search_steps,
        }


class TreeNode:
    """A reasoning prefix in the state-action tree."""

    prefix: tuple[str, ...]
    parent: "TreeNode | None"
    mc: MCEstimate | None
    visits: int
    children: dict[str, "TreeNode"]
    incorrect_pool: list[RolloutRecord]

    def __init__(
        self, prefix: tuple[str, ...] = (), parent: "TreeNode | None" = None
    ) -> None:
        self.prefix = prefix
        self.parent = parent
        self.mc = None
        self.visits = 0
        self.children = {}
        self.incorrect_pool = []

    def __repr__(self) -> str:
        value = None if self.mc is None else self.mc.value
        return f"TreeNode(depth={self.depth}, mc={value}, visits={self.visits})"

    @property
    def depth(self) -> int:
        return len(self.prefix)

    @property
    def step(self) -> str:
        """Text of the edge leading here; empty for the root."""
        return self.prefix[-1] if self.prefix else ""

    def absorb(self, estimate: MCEstimate) -> None:
        """
        Pool ``estimate`` into the node's statistics.

        Incorrect rollouts join the search pool only while the node is
        uncertain (0 < MC < 1).
        """
        self.mc = estimate if self.mc is None else self.mc.merge(estimate)
        if 0.0 < self.mc.value < 1.0:
            self.incorrect_pool.extend(estimate.incorrect())
        else:
            self.incorrect_pool.clear()

    def to_dict(self) -> dict[str, Any]:
        return {
            "step": self.step,
            "prefix_len": self.depth,
            "mc": None if self.mc is None else self.mc.value,
            "n_rollouts": 0 if self.mc is None else self.mc.n_rollouts,
            "n_correct": 0 if self.mc is None else self.mc.n_correct,
            "visits": self.visits,
            "children": [child.to_dict() for child in self.children.values()],
        }


class StateTree:
    """Per-problem tree of reasoning prefixes keyed by next-step text."""

    root: TreeNode

    def __init__(self) -> None:
        self.root = TreeNode()

    def find(self, prefix: Sequence[str]) -> TreeNode | None:
        node = self.root
        for step in prefix:
            if (child := node.children.get(step)) is None:
                return None
            node = child
        return node

    def insert(self, prefix: Sequence[str]) -> TreeNode:
        """Return the node for ``prefix``, creating it and any missing ancestors."""
        node = self.root
        for step in prefix:
            child = node.children.get(step)
            if child is None:
                child = TreeNode(node.prefix + (step,), node)
                node.children[step] = child
            node = child
        return node

    def nodes(self) -> Iterator[TreeNode]:
        """Every node, breadth first, children in insertion order."""
        queue = [self.root]
        while queue:
            node = queue.pop(0)
            yield node
            queue.extend(node.children.values())

    def __len__(self) -> int:
        return sum(1 for _ in self.nodes())

    def check(self) -> None:
        """
        Walk the tree and verify its structure.

        Raises:
            ValidationError: If the root has a prefix, or a child's prefix is
                not its parent's prefix plus its edge step.
        """
        if self.root.prefix:
            raise ValidationError("root prefix must be empty")
        for node in self.nodes():
            for step, child in node.children.items():
                if child.prefix != node.prefix + (step,) or child.parent is not node:
                    raise ValidationError(
                        f"child at depth {child.depth} does not extend its parent"
                    )

    def to_dict(self) -> dict[str, Any]:
        """Nested export rooted at the question, one entry per node."""
        return self.root.to_dict()


def selection_score(node: TreeNode, parent_visits: int, c_puct: float) -> float:
    """
    PUCT-style priority of searching from ``node``.

    ``Q = 1 - |2 MC - 1|`` peaks for the most uncertain prefixes; the
    exploration term is ``c_puct * sqrt(parent_visits) / (1 + visits)``.

    Raises:
        ValidationError: If the node has no MC estimate or ``parent_visits``
            is not positive.
    """
    if node.mc is None:
        raise ValidationError("node has no MC estimate")
    if parent_visits < 1:
        raise ValidationError(f"parent_visits must be >= 1, got {parent_visits}")
    q = 1.0 - abs(2.0 * node.mc.value - 1.0)
    u = c_puct * math.sqrt(parent_visits) / (1 + node.visits)
    return q + u


async def locate_first_error(
    problem: Problem,
    solution: Solution,
    mc_fn: MCFunction,
    budget: SearchBudget | None = None,
    *,
    known_good: int = 0,
) -> int | None:
    """
    Binary-search the first step after which the gold answer is unreachable.

    Returns the smallest ``t`` in ``[known_good + 1, T]`` such that
    ``mc_fn(steps[:t]).value == 0``, assuming MC stays zero once it drops to
    zero. At most ``floor(log2(T)) + 1`` prefixes are evaluated.

    Args:
        problem: Problem the solution answers.
        solution: Known-incorrect path to search.
        mc_fn: Prefix to MC estimate; may be sync or async.
        budget: When given, one search step is debited from it.
        known_good: Length of a prefix already known to have MC > 0.

    Returns:
        The 1-based index of the first erroneous step, or None when every
        searched prefix kept MC > 0.

    Raises:
        BudgetExhaustedError: If the search budget is spent, or ``mc_fn``
            runs out of rollouts.
    """
    if budget is not None:
        budget.use_search_step()

    steps = solution.steps
    lo, hi = known_good + 1, len(steps)
    first_error = len(steps) + 1

    while lo <= hi:
        mid = (lo + hi) // 2
        estimate = mc_fn(tuple(steps[:mid]))
        if inspect.isawaitable(estimate):
            estimate = await estimate
        if estimate.value == 0.0:
            first_error, hi = mid, mid - 1
        else:
            lo = mid + 1

    if first_error > len(steps):
        logger.debug("No erroneous step found in a path of problem %s", problem.id)
        return None
    return first_error


def _pick(tree: StateTree, c_puct: float) -> TreeNode | None:
    """
    Choose the node whose incorrect rollout is searched next.

    Only nodes that still hold incorrect rollouts compete. The root scores
    against its own visit count, every other node against its parent's.

    Args:
        tree: Search tree built so far.
        c_puct: Exploration constant.

    Returns:
        The node with the highest selection score, ties going to the
        smallest step text, or None when no incorrect rollout is left.
    """
    best: TreeNode | None = None
    best_key: tuple[float, str] | None = None
    for node in tree.nodes():
        if not node.incorrect_pool:
            continue
        parent = node.parent or node
        score = selection_score(node, max(1, parent.visits), c_puct)
        key = (-score, node.step)
        if best_key is None or key < best_key:
            best, best_key = node, key
    return best


async def annotate_problem(
    problem: Problem,
    policy: PolicyBackend,
    settings: SearchSettings,
    budget: SearchBudget,
    *,
    params: SamplingParams | None = None,
    telemetry: Telemetry | None = None,
    tree: StateTree | None = None,
    rollout_workers: int = 1,
) -> list[StepAnnotation]:
    """
    Search one problem's solution space and harvest step annotations.

    The root is estimated first; problems whose root MC is 0 or 1 carry no
    error boundary and yield nothing. Then, while budget and incorrect
    rollouts remain, the highest-priority node gives up one incorrect
    rollout, the rollout's path is binary-searched for its first erroneous
    step, and every evaluated prefix becomes an annotation labelled with its
    pooled MC value.

    Args:
        problem: The problem to annotate.
        policy: Backend the rollouts come from.
        settings: Rollout width, selection constant and pooling switch.
        budget: Per-problem ledger; running out ends the search without
            losing harvested annotations.
        params: Sampling settings.
        telemetry: Hub for progress events.
        tree: Tree to build into; a fresh one is used when omitted. Pass one
            to inspect or export it afterwards.
        rollout_workers: Concurrent requests per MC estimate.

    Returns:
        Annotations in first-harvest order, one per distinct (prefix, step).
    """
    tree = tree if tree is not None else StateTree()
    telemetry = telemetry or Telemetry(log=False)
    harvested: dict[tuple[str, str, str], TreeNode] = {}
    touched: list[TreeNode] = []

    async def estimate(node: TreeNode) -> MCEstimate:
        draw_offset = 0 if node.mc is None else node.mc.n_rollouts
        fresh = await estimate_mc(
            policy,
            problem,
            node.prefix,
            settings.k,
            budget,
            params=params,
            draw_offset=draw_offset,
            workers=rollout_workers,
        )
        node.absorb(fresh)
        assert node.mc is not None
        return node.mc

    async def mc_fn(prefix: tuple[str, ...]) -> MCEstimate:
        node = tree.insert(prefix)
        touched.append(node)
        if node.mc is not None and not settings.pool_on_revisit:
            return node.mc
        return await estimate(node)

    def harvest() -> None:
        for node in touched:
            if node.mc is None or not node.prefix:
                continue
            key = (
                problem.id,
                prefix_digest(node.prefix[:-1]),
                prefix_digest(node.prefix[-1:]),
            )
            harvested[key] = node
        touched.clear()

    await telemetry.emit(EventKind.PROBLEM_START, problem.id, budget)

    try:
        root = await estimate(tree.root)
    except BudgetExhaustedError:
        await telemetry.emit(EventKind.BUDGET_EXHAUSTED, problem.id, budget)
        await telemetry.emit(EventKind.PROBLEM_DONE, problem.id, budget, annotations=0)
        return []

    await telemetry.emit(
        EventKind.ROOT_ESTIMATE, problem.id, budget, mc=root.value
    )
    if root.value in (0.0, 1.0):
        await telemetry.emit(EventKind.SKIP, problem.id, budget, mc=root.value)
        await telemetry.emit(EventKind.PROBLEM_DONE, problem.id, budget, annotations=0)
        return []

    while budget.can_search:
        node = _pick(tree, settings.c_puct)
        if node is None:
            break

        cursor: TreeNode | None = node
        while cursor is not None:
            cursor.visits += 1
            cursor = cursor.parent

        rollout = node.incorrect_pool.pop(0)
        assert rollout.completion is not None
        path = Solution(
            steps=node.prefix + rollout.completion.steps,
            final_answer=rollout.completion.final_answer,
        )

        try:
            first_error = await locate_first_error(
                problem, path, mc_fn, budget, known_good=node.depth
            )
        except BudgetExhaustedError:
            harvest()
            await telemetry.emit(EventKind.BUDGET_EXHAUSTED, problem.id, budget)
            break

        harvest()
        await telemetry.emit(
            EventKind.SEARCH_STEP,
            problem.id,
            budget,
            depth=node.depth,
            path_len=len(path.steps),
            first_error=first_error,
        )

    annotations = [
        StepAnnotation(
            problem_id=problem.id,
            prefix=node.prefix[:-1],
            step=node.prefix[-1],
            n_rollouts=node.mc.n_rollouts,
            n_correct=node.mc.n_correct,
        )
        for node in harvested.values()
        if node.mc is not None
    ]
    await telemetry.emit(
        EventKind.PROBLEM_DONE, problem.id, budget, annotations=len(annotations)
    )
    return annotations
