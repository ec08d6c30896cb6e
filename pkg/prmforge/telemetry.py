import asyncio
import json
import logging
import sys
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
from datetime import UTC, datetime
from enum import StrEnum
from typing import Any, Self, TextIO

from prmforge.events import Event

__all__ = [
    "EventKind",
    "JsonFormatter",
    "ProgressReporter",
    "Telemetry",
    "TelemetryEvent",
    "setup_logging",
]

logger = logging.getLogger(__name__)

_RESERVED = frozenset(
    logging.LogRecord("", logging.INFO, "", 0, "", None, None).__dict__
) | {"message", "asctime", "taskName"}

_BUDGET_FIELDS = (
    "used_rollouts",
    "max_rollouts",
    "used_search_steps",
    "max_search_steps",
)


class JsonFormatter(logging.Formatter):
    """Render each record as one JSON object per line."""

    def format(self, record: logging.LogRecord) -> str:
        payload: dict[str, Any] = {
            "ts": datetime.fromtimestamp(record.created, UTC).isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
        }
        for key, value in record.__dict__.items():
            if key not in _RESERVED and not key.startswith("_"):
                payload[key] = value
        if record.exc_info:
            payload["exc_info"] = self.formatException(record.exc_info)
        return json.dumps(payload, ensure_ascii=False, default=str)


def setup_logging(
    level: str | int = "INFO", stream: TextIO | None = None
) -> logging.Handler:
    """
    Route every log record to ``stream`` (stderr by default) as JSON lines.

    Replaces the handlers of the root logger, so calling it twice does not
    duplicate output.
    """
    handler = logging.StreamHandler(stream or sys.stderr)
    handler.setFormatter(JsonFormatter())

    root = logging.getLogger()
    for existing in [*root.handlers]:
        root.removeHandler(existing)
    root.addHandler(handler)
    root.setLevel(level)

    logging.getLogger("httpx").setLevel(logging.WARNING)
    logging.getLogger("httpcore").setLevel(logging.WARNING)
    return handler


class EventKind(StrEnum):
    PROBLEM_START = "problem_start"
    ROOT_ESTIMATE = "root_estimate"
    SKIP = "skip"
    SEARCH_STEP = "search_step"
    BUDGET_EXHAUSTED = "budget_exhausted"
    PROBLEM_DONE = "problem_done"
    PROGRESS = "progress"
    SCORE_FAILURE = "score_failure"


@dataclass(frozen=True, slots=True)
class TelemetryEvent:
    kind: EventKind
    problem_id: str | None = None
    budget: Mapping[str, int] = field(default_factory=dict)
    fields: Mapping[str, Any] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return {
            "kind": str(self.kind),
            "problem_id": self.problem_id,
            **self.budget,
            **self.fields,
        }


def _budget_counters(budget: object | None) -> dict[str, int]:
    if budget is None:
        return {}
    return {
        name: int(getattr(budget, name))
        for name in _BUDGET_FIELDS
        if hasattr(budget, name)
    }


def log_event(event: TelemetryEvent) -> None:
    logger.info(event.kind, extra={"event": event.to_json()})


class Telemetry:
    """
    Fan-out point for run telemetry.

    Every annotator, reranker and reporter of a run emits through one hub. By
    default the hub's only listener writes each event as a log line through
    the ``prmforge.telemetry`` logger; tests attach their own listeners to
    ``on_event``.
    """

    on_event: Event[TelemetryEvent]

    def __init__(self, *, log: bool = True) -> None:
        self.on_event = Event()
        if log:
            self.on_event.add_listener(log_event)

    async def emit(
        self,
        kind: EventKind,
        problem_id: str | None = None,
        budget: object | None = None,
        **fields: Any,
    ) -> None:
        """
        Publish one event.

        Args:
            kind: Event kind.
            problem_id: Problem the event concerns, if any.
            budget: Object exposing the budget counters (``used_rollouts``,
                ``max_rollouts``, ``used_search_steps``, ``max_search_steps``);
                the counters present are copied into the event.
            **fields: Extra JSON-serialisable fields.
        """
        event = TelemetryEvent(
            kind=kind,
            problem_id=problem_id,
            budget=_budget_counters(budget),
            fields=fields,
        )
        await self.on_event.emit(event)


class ProgressReporter:
    """
    Periodic ``progress`` event while a batch is running.

    Each cycle reads ``source()`` and emits its fields; the read and the sleep
    run concurrently, so cycles start every ``interval`` seconds. A failing
    cycle is reported through ``on_error`` and the loop carries on.
    """

    __interval__: float
    __source__: Callable[[], Mapping[str, Any]]
    __telemetry__: Telemetry
    __main__: asyncio.Task | None

    on_error: Event[BaseException]

    def __init__(
        self,
        telemetry: Telemetry,
        source: Callable[[], Mapping[str, Any]],
        interval: float,
    ) -> None:
        self.__telemetry__ = telemetry
        self.__source__ = source
        self.__interval__ = interval
        self.__main__ = None
        self.on_error = Event()

    @property
    def interval(self) -> float:
        return self.__interval__

    @property
    def running(self) -> bool:
        return self.__main__ is not None and not self.__main__.done()

    async def __task__(self) -> None:
        await self.__telemetry__.emit(EventKind.PROGRESS, **self.__source__())

    async def __work__(self) -> None:
        try:
            async with asyncio.TaskGroup() as tasks:
                tasks.create_task(self.__task__())
                tasks.create_task(asyncio.sleep(self.__interval__))
        except BaseExceptionGroup as err_group:
            for err in err_group.exceptions:
                await self.on_error.emit(err)
            await asyncio.sleep(self.__interval__)

    async def __loop__(self) -> None:
        while True:
            await self.__work__()

    def start(self) -> None:
        if not self.running:
            self.__main__ = asyncio.create_task(
                self.__loop__(), name="progress-reporter"
            )

    async def stop(self) -> None:
        """Stop the loop and emit one final progress event."""
        if self.__main__ is not None:
            self.__main__.cancel()
            try:
                await self.__main__
            except asyncio.CancelledError:
                pass
            self.__main__ = None
            try:
                await self.__task__()
            except Exception as err:
                await self.on_error.emit(err)

    async def __aenter__(self) -> Self:
        self.start()
        return self

    async def __aexit__(self, *exc_info: Any) -> None:
        await self.stop()
