import asyncio
import inspect
import logging
import signal
from collections.abc import Awaitable, Callable
from typing import Any, Generic, ParamSpec

__P__ = ParamSpec("__P__")

__all__ = [
    "Event",
    "on_shutdown",
]

logger = logging.getLogger(__name__)

SHUTDOWN_SIGNALS = (signal.SIGHUP, signal.SIGTERM, signal.SIGINT)


def _describe(listener: Callable[..., Any]) -> str:
    return getattr(listener, "__qualname__", None) or repr(listener)


class Event(Generic[__P__]):
    """
    Typed observer used for telemetry fan-out, batch runner state changes and
    error notification.

    Listeners may be plain functions or coroutine functions. Plain listeners
    run inline in registration order, then the awaitables returned by async
    listeners are gathered. A failing listener is logged and never reaches
    the emitter, so a broken telemetry sink cannot abort an annotation run.

    Type Args:
        __P__: Signature every listener must accept.
    """

    __listeners__: dict[Callable[__P__, Awaitable[None] | None], None]

    def __init__(self) -> None:
        # dict keeps insertion order and makes re-registration a no-op
        self.__listeners__ = {}

    def __len__(self) -> int:
        return len(self.__listeners__)

    def add_listener(
        self, listener: Callable[__P__, Awaitable[None] | None]
    ) -> None:
        """Register a listener. Registering the same callable twice is a no-op."""
        self.__listeners__.setdefault(listener, None)

    def remove_listener(
        self, listener: Callable[__P__, Awaitable[None] | None]
    ) -> None:
        """Unregister a listener; unknown listeners are ignored."""
        self.__listeners__.pop(listener, None)

    async def emit(self, *args: __P__.args, **kwargs: __P__.kwargs) -> None:
        """Deliver the arguments to every listener and wait for async ones."""
        pending: list[tuple[Callable[..., Any], Awaitable[None]]] = []
        for listener in list(self.__listeners__):
            try:
                outcome = listener(*args, **kwargs)
            except Exception:
                logger.exception("Listener %s failed", _describe(listener))
                continue
            if inspect.isawaitable(outcome):
                pending.append((listener, outcome))

        if not pending:
            return
        results = await asyncio.gather(
            *(awaitable for _, awaitable in pending), return_exceptions=True
        )
        for (listener, _), result in zip(pending, results):
            if isinstance(result, Exception):
                logger.error(
                    "Listener %s failed",
                    _describe(listener),
                    exc_info=result,
                )
            elif isinstance(result, BaseException):
                raise result


__ON_SHUTDOWN__: Event[signal.Signals] | None = None


def _install_handlers(shutdown: Event[signal.Signals]) -> None:
    """
    Route SIGHUP, SIGTERM and SIGINT to ``shutdown``.

    Inside a running loop the handlers go through ``add_signal_handler`` and
    emit as a task. Without a loop, or where the loop cannot take signal
    handlers, plain ``signal.signal`` handlers run the emit to completion.

    Args:
        shutdown: Event that receives the caught signal.
    """
    def handler_for(received: signal.Signals) -> Callable[..., None]:
        def handle(*_: Any) -> None:
            logger.warning("Received %s, stopping", received.name)
            try:
                asyncio.get_running_loop().create_task(shutdown.emit(received))
            except RuntimeError:
                asyncio.run(shutdown.emit(received))

        return handle

    try:
        loop = asyncio.get_running_loop()
        for received in SHUTDOWN_SIGNALS:
            loop.add_signal_handler(received, handler_for(received))
    except (RuntimeError, NotImplementedError):
        for received in SHUTDOWN_SIGNALS:
            signal.signal(received, handler_for(received))


def on_shutdown() -> Event[signal.Signals]:
    """
    Return the process-wide shutdown event, installing signal handlers for
    SIGHUP, SIGTERM and SIGINT on first use.

    A running batch subscribes to it to stop taking new problems while letting
    in-flight ones finish and flush their annotations.
    """
    global __ON_SHUTDOWN__

    if __ON_SHUTDOWN__ is None:
        __ON_SHUTDOWN__ = Event[signal.Signals]()
        _install_handlers(__ON_SHUTDOWN__)
    return __ON_SHUTDOWN__
