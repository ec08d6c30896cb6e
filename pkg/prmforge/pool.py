import asyncio
from collections.abc import Callable, Coroutine, Iterable
from contextvars import Context
from typing import Any, TypeVar

from prmforge.errors import ValidationError

__all__ = [
    "WorkerPool",
]

_T = TypeVar("_T")
_R = TypeVar("_R")


class WorkerPool:
    """
    A task group that never runs more than ``workers`` coroutines at once.

    Used to draw the rollouts of one MC estimate in parallel, to score the
    candidates of one problem concurrently, and to annotate many problems at
    the same time. Tasks beyond the limit wait for a free slot before their
    coroutine starts.

    The first failing task cancels the rest and ``wait()`` raises a
    ``BaseExceptionGroup`` of the failures.
    """

    __tasks__: set[asyncio.Task]
    __errors__: list[BaseException]
    __slots_sem__: asyncio.Semaphore

    def __init__(self, workers: int = 1) -> None:
        """
        Args:
            workers: Maximum number of coroutines running concurrently.

        Raises:
            ValidationError: If ``workers`` is smaller than one.
        """
        if workers < 1:
            raise ValidationError(f"workers must be >= 1, got {workers}")
        self.__tasks__ = set()
        self.__errors__ = []
        self.__slots_sem__ = asyncio.Semaphore(workers)

    def __on_task_done__(self, task: asyncio.Task) -> None:
        self.__tasks__.discard(task)

        try:
            error = task.exception()
        except asyncio.CancelledError:
            error = None

        if error is not None:
            self.__errors__.append(error)
            self.cancel()

    async def __bounded__(self, coro: Coroutine[Any, Any, _T]) -> _T:
        try:
            await self.__slots_sem__.acquire()
        except BaseException:
            coro.close()
            raise
        try:
            return await coro
        finally:
            self.__slots_sem__.release()

    def create_task(
        self,
        coro: Coroutine[Any, Any, _T],
        *,
        name: str | None = None,
        context: Context | None = None,
    ) -> asyncio.Task[_T]:
        """
        Schedule ``coro`` to run as soon as a worker slot is free.

        Returns:
            The task wrapping the coroutine.
        """
        task = asyncio.create_task(
            self.__bounded__(coro), name=name, context=context
        )
        task.add_done_callback(self.__on_task_done__)
        self.__tasks__.add(task)

        try:
            return task
        finally:
            # gh-128552: avoid task.exception().__traceback__ -> create_task -> task
            del task

    def cancel(self) -> None:
        """Cancel every unfinished task of the pool."""
        for task in self.__tasks__:
            if not task.done():
                task.cancel()

    async def wait(self) -> None:
        """
        Wait for every task of the pool.

        Raises:
            BaseExceptionGroup: When any task failed.
        """
        if self.__tasks__:
            await asyncio.wait(list(self.__tasks__))

        if self.__errors__:
            raise BaseExceptionGroup(
                "unhandled errors in a WorkerPool", self.__errors__
            )

    async def map(
        self,
        fn: Callable[[_T], Coroutine[Any, Any, _R]],
        items: Iterable[_T],
    ) -> list[_R]:
        """
        Run ``fn`` over ``items`` with bounded concurrency.

        Results come back in input order regardless of completion order. If an
        item fails, the remaining items are cancelled and the item's exception
        is raised.
        """
        tasks = [self.create_task(fn(item)) for item in items]
        if not tasks:
            return []
        try:
            return list(await asyncio.gather(*tasks))
        except BaseException:
            for task in tasks:
                if not task.done():
                    task.cancel()
            await asyncio.wait(tasks)
            raise
