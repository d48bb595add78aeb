"""Gateway client: submit images to a running master over HTTP and time the answers."""

from __future__ import annotations

import asyncio
import json
import time
from dataclasses import dataclass
from typing import Callable, Sequence

from ..preprocess import ImagePayload, Mode
from ..protocol import HEALTH_PATH, build_detect_request, parse_http_head
from .sim import ClientRecord, Submission


@dataclass(frozen=True)
class HttpReply:
    status: int
    body: dict
    request_bytes: int
    response_bytes: int


async def _exchange(host: str, port: int, request: bytes, timeout: float) -> tuple[int, dict, int]:
    reader, writer = await asyncio.wait_for(asyncio.open_connection(host, port), timeout)
    try:
        writer.write(request)
        await writer.drain()
        head = await asyncio.wait_for(reader.readuntil(b"\r\n\r\n"), timeout)
        _, rest, headers = parse_http_head(head[:-4])
        status = int(rest.split(" ", 1)[0])
        length = int(headers.get("content-length", "0"))
        raw = await asyncio.wait_for(reader.readexactly(length), timeout)
        return status, json.loads(raw) if raw else {}, len(head) + len(raw)
    finally:
        writer.close()


async def post_detect(host: str, port: int, image: ImagePayload, mode: Mode, prescaled: bool = False,
                      timeout: float = 120.0) -> HttpReply:
    request = build_detect_request(image, mode, host=f"{host}:{port}", prescaled=prescaled)
    status, body, n = await _exchange(host, port, request, timeout)
    return HttpReply(status, body, len(request), n)


async def get_health(host: str, port: int, timeout: float = 10.0) -> dict:
    request = f"GET {HEALTH_PATH} HTTP/1.1\r\nHost: {host}:{port}\r\n\r\n".encode("ascii")
    status, body, _ = await _exchange(host, port, request, timeout)
    if status != 200:
        raise ConnectionError(f"health check answered {status}")
    return body


async def wait_for_workers(host: str, port: int, count: int, timeout: float = 10.0) -> dict:
    deadline = time.monotonic() + timeout
    while True:
        try:
            health = await get_health(host, port)
            if health["alive"] >= count:
                return health
        except (OSError, asyncio.TimeoutError):
            pass
        if time.monotonic() > deadline:
            raise TimeoutError(f"fewer than {count} worker(s) registered after {timeout}s")
        await asyncio.sleep(0.05)


async def run_schedule(
    host: str,
    port: int,
    submissions: Sequence[Submission],
    make_image: Callable[[str], tuple[ImagePayload, bool]],
    timeout: float = 120.0,
) -> dict[str, ClientRecord]:
    """Send each submission at its scheduled offset from now; times are microseconds from the start."""
    t0 = time.perf_counter()
    records: dict[str, ClientRecord] = {}

    def elapsed_us() -> int:
        return round((time.perf_counter() - t0) * 1e6)

    async def one(sub: Submission) -> None:
        image, prescaled = make_image(sub.image_id)
        delay = sub.time_us / 1e6 - (time.perf_counter() - t0)
        if delay > 0:
            await asyncio.sleep(delay)
        rec = ClientRecord(sub.image_id, elapsed_us())
        records[sub.image_id] = rec
        try:
            reply = await post_detect(host, port, image, sub.mode, prescaled, timeout)
            rec.status, rec.body = reply.status, reply.body
        except (OSError, asyncio.TimeoutError, asyncio.IncompleteReadError) as exc:
            rec.status, rec.body = 504, {"image_id": sub.image_id, "error": str(exc) or type(exc).__name__}
        rec.recv_us = elapsed_us()

    await asyncio.gather(*(one(s) for s in submissions))
    return {s.image_id: records[s.image_id] for s in submissions}
