import asyncio
import inspect
import logging
from abc import ABC, abstractmethod
from collections.abc import Coroutine, Sequence
from dataclasses import dataclass
from enum import IntEnum, auto
from typing import Any, Generic, TypeVar

from prmforge.annotator import SearchBudget, StateTree, annotate_problem
from prmforge.config import SamplingParams, SearchSettings
from prmforge.dataset import StepAnnotation
from prmforge.errors import ValidationError
from prmforge.events import Event, on_shutdown
from prmforge.models import Problem
from prmforge.policy import PolicyBackend
from prmforge.pool import WorkerPool
from prmforge.telemetry import Telemetry

__all__ = [
    "AnnotationRunner",
    "BatchRunner",
    "ProblemResult",
    "RunState",
]

logger = logging.getLogger(__name__)

_ItemT = TypeVar("_ItemT")
_ResultT = TypeVar("_ResultT")


class RunState(IntEnum):
    """Lifecycle states of a batch run."""

    STARTING = auto()
    """Hooks are running; no item has started."""
    RUNNING = auto()
    """Items are being taken and processed."""
    STOPPING = auto()
    """No new item is taken; in-flight items finish."""
    STOPPED = auto()
    """Idle."""


class BatchRunner(ABC, Generic[_ItemT, _ResultT]):
    """
    Processes a batch of items through a bounded worker pool.

    Results are delivered through ``on_result(index, result)`` strictly in
    input order, whatever order workers finish in, so anything written from
    that event is independent of the worker count.

    A shutdown signal (or ``stop()``) moves the run to STOPPING: items not
    yet started are skipped, in-flight items finish and are delivered.
    The first failing item cancels the rest and its error is re-raised from
    ``run()`` after the results before it have been delivered.

    Attributes:
        on_state_change (Event[RunState]): Fired on every state transition.
        on_error (Event[BaseException]): Fired when an item fails.
        on_result (Event[int, ResultT]): Fired once per finished item, in
            input order.
    """

    __name__: str
    __state__: RunState
    __workers__: int
    __results__: dict[int, _ResultT]
    __cursor__: int
    __flush_lock__: asyncio.Lock
    __started__: int
    __finished__: int
    __total__: int

    on_state_change: Event[RunState]
    on_error: Event[BaseException]
    on_result: Event[[int, _ResultT]]

    def __init__(self, *, workers: int = 1, name: str | None = None) -> None:
        if workers < 1:
            raise ValidationError(f"workers must be >= 1, got {workers}")
        self.__name__ = name or self.__class__.__name__
        self.__state__ = RunState.STOPPED
        self.__workers__ = workers
        self.__results__ = {}
        self.__cursor__ = 0
        self.__flush_lock__ = asyncio.Lock()
        self.__started__ = 0
        self.__finished__ = 0
        self.__total__ = 0
        self.on_state_change = Event()
        self.on_error = Event()
        self.on_result = Event()

    @property
    def name(self) -> str:
        return self.__name__

    @property
    def state(self) -> RunState:
        return self.__state__

    @property
    def workers(self) -> int:
        return self.__workers__

    def progress(self) -> dict[str, int]:
        """Counts of items in the batch, started, finished and delivered."""
        return {
            "total": self.__total__,
            "started": self.__started__,
            "finished": self.__finished__,
            "delivered": self.__cursor__,
        }

    def __set_state__(self, state: RunState) -> Coroutine[Any, Any, None]:
        self.__state__ = state
        return self.on_state_change.emit(state)

    def __on_shutdown__(self, *args: Any, **kwargs: Any) -> None:
        self.stop()

    def stop(self) -> None:
        """Stop taking new items. In-flight items still finish."""
        if self.__state__ == RunState.RUNNING:
            logger.info("Stopping %s; in-flight items will finish", self.__name__)
            self.__state__ = RunState.STOPPING
            asyncio.create_task(self.on_state_change.emit(RunState.STOPPING))

    async def __flush__(self) -> None:
        async with self.__flush_lock__:
            while self.__cursor__ in self.__results__:
                index = self.__cursor__
                result = self.__results__.pop(index)
                self.__cursor__ += 1
                await self.on_result.emit(index, result)

    async def __guarded__(self, index: int, item: _ItemT) -> None:
        if self.__state__ != RunState.RUNNING:
            return
        self.__started__ += 1
        try:
            result = await self.__process__(index, item)
        except Exception as err:
            await self.on_error.emit(err)
            raise
        self.__finished__ += 1
        self.__results__[index] = result
        await self.__flush__()

    async def run(self, items: Sequence[_ItemT]) -> int:
        """
        Process ``items``.

        Returns:
            Number of results delivered.

        Raises:
            ValidationError: If the runner is already running.
            Exception: The first item failure, after earlier results were
                delivered.
        """
        if self.__state__ != RunState.STOPPED:
            raise ValidationError(f"{self.__name__} is already running")

        self.__results__ = {}
        self.__cursor__ = 0
        self.__started__ = 0
        self.__finished__ = 0
        self.__total__ = len(items)

        await self.__set_state__(RunState.STARTING)
        start_hook = self.__on_start__()
        if inspect.isawaitable(start_hook):
            await start_hook

        on_shutdown().add_listener(self.__on_shutdown__)
        await self.__set_state__(RunState.RUNNING)

        pool = WorkerPool(self.__workers__)
        try:
            for index, item in enumerate(items):
                pool.create_task(self.__guarded__(index, item))
            await pool.wait()
        except BaseExceptionGroup as group:
            raise group.exceptions[0] from None
        finally:
            if self.__state__ != RunState.STOPPING:
                await self.__set_state__(RunState.STOPPING)
            on_shutdown().remove_listener(self.__on_shutdown__)

            stop_hook = self.__on_stop__()
            if inspect.isawaitable(stop_hook):
                await stop_hook
            await self.__set_state__(RunState.STOPPED)

        return self.__cursor__

    def __on_start__(self) -> Coroutine[Any, Any, None] | None:
        """Optional hook run before the first item starts."""
        return None

    @abstractmethod
    async def __process__(self, index: int, item: _ItemT) -> _ResultT:
        """Process one item."""
        pass  # pragma: no cover

    def __on_stop__(self) -> Coroutine[Any, Any, None] | None:
        """Optional hook run after the last item finished."""
        return None


@dataclass(frozen=True, slots=True)
class ProblemResult:
    problem: Problem
    annotations: list[StepAnnotation]
    budget: SearchBudget
    skipped: bool
    tree: StateTree

    def summary(self) -> dict[str, Any]:
        return {
            "problem_id": self.problem.id,
            "skipped": self.skipped,
            "annotations": len(self.annotations),
            **self.budget.to_json(),
        }


class AnnotationRunner(BatchRunner[Problem, ProblemResult]):
    """Annotates problems concurrently, one tree and one budget per problem."""

    def __init__(
        self,
        policy: PolicyBackend,
        settings: SearchSettings,
        *,
        params: SamplingParams | None = None,
        telemetry: Telemetry | None = None,
        workers: int = 1,
        rollout_workers: int = 1,
    ) -> None:
        super().__init__(workers=workers)
        self.policy = policy
        self.settings = settings
        self.params = params or SamplingParams()
        self.telemetry = telemetry or Telemetry(log=False)
        self.rollout_workers = rollout_workers

    async def __process__(self, index: int, item: Problem) -> ProblemResult:
        budget = SearchBudget.from_settings(self.settings)
        tree = StateTree()
        annotations = await annotate_problem(
            item,
            self.policy,
            self.settings,
            budget,
            params=self.params,
            telemetry=self.telemetry,
            tree=tree,
            rollout_workers=self.rollout_workers,
        )
        root = tree.root.mc
        skipped = root is None or root.value in (0.0, 1.0)
        return ProblemResult(item, annotations, budget, skipped, tree)
