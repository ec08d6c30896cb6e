import asyncio
import hashlib
from collections.abc import Callable, Coroutine, Sequence
from typing import Any, ParamSpec, TypeVar

import numpy as np

__all__ = ["derive_seed", "main", "prefix_digest", "rng_for"]


_P = ParamSpec("_P")
_T = TypeVar("_T")


def main(
    fn: Callable[_P, Coroutine[Any, Any, _T]],
) -> Callable[_P, Coroutine[Any, Any, _T]]:
    """
    Make an async entry point wait for the background tasks it spawned.

    Telemetry emits and progress reporters run as detached tasks; without the
    drain a command could return, and the process exit, before the last
    telemetry line is written.

    Args:
        fn: The async entry point.

    Returns:
        A wrapper returning ``fn``'s result once every other task of the loop
        has finished.
    """

    async def wrapper(*args: _P.args, **kwargs: _P.kwargs) -> _T:
        res = await fn(*args, **kwargs)
        tasks = asyncio.all_tasks()

        if (current_task := asyncio.current_task()) is not None:
            tasks.discard(current_task)

        if tasks:
            await asyncio.wait(tasks)

        return res

    return wrapper


def derive_seed(root: int, *names: object) -> int:
    """
    Split a named child seed off ``root``.

    The same root and names always give the same 64-bit seed, independent of
    call order, so a problem's random stream does not depend on which worker
    picked it up.
    """
    digest = hashlib.blake2b(digest_size=8)
    digest.update(str(int(root)).encode("utf-8"))
    for name in names:
        digest.update(b"\x1f")
        digest.update(str(name).encode("utf-8"))
    return int.from_bytes(digest.digest(), "big")


def rng_for(root: int, *names: object) -> np.random.Generator:
    """Return a generator seeded from the named stream of ``root``."""
    return np.random.default_rng(derive_seed(root, *names))


def prefix_digest(steps: Sequence[str]) -> str:
    """Stable short digest of a list of step texts."""
    digest = hashlib.sha256()
    for step in steps:
        digest.update(step.encode("utf-8"))
        digest.update(b"\x00")
    return digest.hexdigest()[:16]
