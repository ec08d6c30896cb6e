import asyncio
import logging
from collections.abc import Mapping
from typing import Any

import httpx

from prmforge.errors import AuthError, ProtocolError, TransportError

__all__ = ["RETRYABLE_STATUS", "post_json"]

logger = logging.getLogger(__name__)

RETRYABLE_STATUS = frozenset({408, 409, 425, 429, 500, 502, 503, 504})


async def post_json(
    client: httpx.AsyncClient,
    url: str,
    payload: Mapping[str, Any],
    *,
    headers: Mapping[str, str] | None = None,
    max_retries: int = 4,
    base_delay: float = 1.0,
) -> dict[str, Any]:
    """
    POST a JSON body and return the decoded JSON object, retrying transient
    failures with exponential backoff (``base_delay * 2**attempt``).

    Raises:
        AuthError: On HTTP 401 or 403; never retried.
        ProtocolError: On other 4xx answers or a body that is not a JSON object.
        TransportError: When every attempt failed with a network error, a
            timeout or a retryable status.
    """
    last_err: Exception | None = None

    for attempt in range(max_retries):
        try:
            resp = await client.post(url, json=dict(payload), headers=headers)
        except httpx.TransportError as err:
            last_err = err
        else:
            if resp.status_code in (401, 403):
                raise AuthError(f"{url} rejected credentials ({resp.status_code})")
            if resp.status_code in RETRYABLE_STATUS:
                last_err = TransportError(f"{url} answered {resp.status_code}")
            elif resp.status_code >= 400:
                raise ProtocolError(
                    f"{url} answered {resp.status_code}: {resp.text[:200]}"
                )
            else:
                try:
                    body = resp.json()
                except ValueError as err:
                    raise ProtocolError(f"{url} returned invalid JSON") from err
                if not isinstance(body, dict):
                    raise ProtocolError(f"{url} returned a non-object JSON body")
                return body

        if attempt + 1 < max_retries:
            delay = base_delay * (2**attempt)
            logger.warning(
                "Request to %s failed (attempt %d/%d): %s; retrying in %.1fs",
                url,
                attempt + 1,
                max_retries,
                last_err,
                delay,
            )
            await asyncio.sleep(delay)

    raise TransportError(
        f"request to {url} failed after {max_retries} attempts"
    ) from last_err
