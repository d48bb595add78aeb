"""asyncio network front end for the scheduler.

Two listeners share one event loop: HTTP/1.1 for gateways (one request per
connection) and length-prefixed frames for workers. Every scheduler mutation
happens on the loop thread, so the state machine needs no locks.

The ledger kept here is the master's own view: each entry is stamped with the
master-side time the message finished arriving (inbound) or was written (outbound).
"""

from __future__ import annotations

import asyncio
import logging
import time
from typing import Callable, TextIO

from ..metrics import Completion, Direction, RunLedger
from ..preprocess import PreprocessError
from ..protocol import (
    DEFAULT_MAX_FRAME,
    DETECT_PATH,
    HEALTH_PATH,
    BadRequest,
    Frame,
    FrameDecoder,
    MsgType,
    ProtocolError,
    RegisterMsg,
    ResultEnvelope,
    build_http_response,
    detect_response_body,
    error_frame,
    parse_detect_headers,
    parse_http_head,
)
from .scheduler import Complete, Dispatch, DuplicateWorkerError, Fail, MasterConfig, Scheduler, TaskTransition

log = logging.getLogger("fogdetect.master")

MAX_HEAD_BYTES = 64 * 1024


def parse_addr(text: str, default_host: str = "127.0.0.1") -> tuple[str, int]:
    """``host:port`` or ``:port`` or ``port``."""
    host, sep, port = text.rpartition(":")
    if not sep:
        host, port = "", text
    if not port.isdigit():
        raise ValueError(f"bad address {text!r}, expected host:port")
    return host or default_host, int(port)


class _WorkerConn:
    def __init__(self, writer: asyncio.StreamWriter):
        self.writer = writer
        self.worker_id: str | None = None

    def send(self, frame: Frame) -> int:
        data = frame.encode()
        self.writer.write(data)
        return len(data)


class MasterServer:
    def __init__(
        self,
        config: MasterConfig | None = None,
        http_addr: tuple[str, int] = ("127.0.0.1", 8080),
        worker_addr: tuple[str, int] = ("127.0.0.1", 9090),
        max_frame: int = DEFAULT_MAX_FRAME,
        transition_log: TextIO | None = None,
        clock: Callable[[], int] | None = None,
        on_transition: Callable[[TaskTransition], None] | None = None,
    ):
        self.config = config or MasterConfig()
        self.http_addr = http_addr
        self.worker_addr = worker_addr
        self.max_frame = max_frame
        self.ledger = RunLedger()
        self._log_stream = transition_log
        self._transition_hook = on_transition
        self.scheduler = Scheduler(self.config, on_transition=self._on_transition)
        self._t0 = time.monotonic_ns()
        self._clock = clock or self._monotonic_us
        self._conns: dict[str, _WorkerConn] = {}
        self._waiters: dict[str, asyncio.Future] = {}
        self._servers: list[asyncio.base_events.Server] = []
        self._ticker: asyncio.Task | None = None
        self._wake = asyncio.Event()

    def _monotonic_us(self) -> int:
        return (time.monotonic_ns() - self._t0) // 1000

    def now(self) -> int:
        return self._clock()

    def _on_transition(self, tr: TaskTransition) -> None:
        if self._transition_hook is not None:
            self._transition_hook(tr)
        if self._log_stream is not None:
            self._log_stream.write(tr.format_line() + "\n")
            self._log_stream.flush()

    # -- lifecycle -------------------------------------------------------

    async def start(self) -> None:
        http = await asyncio.start_server(self._handle_http, *self.http_addr)
        workers = await asyncio.start_server(self._handle_worker, *self.worker_addr)
        self._servers = [http, workers]
        self.http_addr = http.sockets[0].getsockname()[:2]
        self.worker_addr = workers.sockets[0].getsockname()[:2]
        self._ticker = asyncio.create_task(self._tick_loop())
        log.info("listening: http %s:%d, workers %s:%d", *self.http_addr, *self.worker_addr)

    async def serve_forever(self) -> None:
        if not self._servers:
            await self.start()
        await asyncio.gather(*(s.serve_forever() for s in self._servers))

    async def close(self) -> None:
        if self._ticker is not None:
            self._ticker.cancel()
        for conn in self._conns.values():
            conn.writer.close()
        for s in self._servers:
            s.close()
            await s.wait_closed()

    async def _tick_loop(self) -> None:
        interval_us = self.config.heartbeat_interval_ms * 1000
        while True:
            now = self.now()
            expiry = self.scheduler.next_expiry()
            wait_us = interval_us if expiry is None else max(0, min(interval_us, expiry - now))
            self._wake.clear()
            try:
                await asyncio.wait_for(self._wake.wait(), wait_us / 1e6)
            except asyncio.TimeoutError:
                pass
            self.scheduler.tick(self.now())
            self._apply()

    # -- scheduler actions -----------------------------------------------

    def _apply(self) -> None:
        now = self.now()
        while True:
            actions = self.scheduler.take_actions()
            if not actions:
                break
            for action in actions:
                self._perform(action, now)
        self._wake.set()

    def _perform(self, action, now: int) -> None:
        if isinstance(action, Dispatch):
            conn = self._conns.get(action.worker_id)
            env = action.envelope
            if conn is None:
                # connection vanished between selection and write; treat as a lost worker
                self.scheduler.worker_lost(action.worker_id, now)
                return
            n = conn.send(env.to_frame())
            self.ledger.record(env.task_id, env.image_id, Direction.MASTER_TO_WORKER, n, now, now)
        elif isinstance(action, Complete):
            task = self.scheduler.tasks[action.task_id]
            self.ledger.completions.append(
                Completion(action.task_id, action.image_id, action.result.worker_id, 200,
                           task.enqueue_time, task.done_time, action.result.compute_ms)
            )
            body = detect_response_body(action.image_id, action.result, action.total_us / 1000)
            self._resolve(action.task_id, 200, body)
        elif isinstance(action, Fail):
            task = self.scheduler.tasks[action.task_id]
            self.ledger.completions.append(
                Completion(action.task_id, action.image_id, "", action.status, task.enqueue_time,
                           task.done_time, 0.0)
            )
            self._resolve(action.task_id, action.status, {"image_id": action.image_id, "error": action.reason})

    def _resolve(self, task_id: str, status: int, body: dict) -> None:
        fut = self._waiters.pop(task_id, None)
        if fut is not None and not fut.done():
            fut.set_result((status, body))

    # -- workers ---------------------------------------------------------

    async def _handle_worker(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        conn = _WorkerConn(writer)
        decoder = FrameDecoder(self.max_frame)
        try:
            while True:
                chunk = await reader.read(1 << 16)
                if not chunk:
                    break
                for frame in decoder.feed(chunk):
                    self._on_frame(conn, frame)
                await writer.drain()
        except ProtocolError as exc:
            log.warning("closing worker connection %s: %s", conn.worker_id, exc)
        except ConnectionError:
            pass
        finally:
            if conn.worker_id is not None and self._conns.get(conn.worker_id) is conn:
                del self._conns[conn.worker_id]
                requeued = self.scheduler.worker_lost(conn.worker_id, self.now())
                if requeued:
                    log.warning("worker %s disconnected, re-queued %s", conn.worker_id, requeued)
                self._apply()
            writer.close()

    def _on_frame(self, conn: _WorkerConn, frame: Frame) -> None:
        now = self.now()
        if frame.msg_type is MsgType.REGISTER:
            msg = RegisterMsg.from_frame(frame)
            try:
                self.scheduler.register_worker(msg, now)
            except (DuplicateWorkerError, ValueError) as exc:
                conn.send(error_frame("duplicate_worker", str(exc)))
                return
            conn.worker_id = msg.worker_id
            self._conns[msg.worker_id] = conn
            conn.send(RegisterMsg(msg.worker_id).to_frame())
        elif conn.worker_id is None:
            conn.send(error_frame("reregister", "register before sending other frames"))
        elif frame.msg_type is MsgType.HEARTBEAT:
            if not self.scheduler.heartbeat(conn.worker_id, now):
                conn.send(error_frame("reregister", "unknown or expired worker"))
        elif frame.msg_type is MsgType.RESULT:
            result = ResultEnvelope.from_frame(frame)
            image_id = self._image_of(result.task_id)
            self.ledger.record(result.task_id, image_id, Direction.WORKER_TO_MASTER, len(frame.encode()), now, now)
            self.scheduler.on_result(result, now)
        elif frame.msg_type is MsgType.ERROR:
            task_id = frame.header.get("task_id")
            if task_id:
                self.ledger.record(task_id, self._image_of(task_id), Direction.WORKER_TO_MASTER,
                                   len(frame.encode()), now, now)
                self.scheduler.on_worker_error(task_id, conn.worker_id, frame.header.get("message", ""), now)
            else:
                log.warning("worker %s reported %s", conn.worker_id, frame.header)
        self._apply()

    def _image_of(self, task_id: str) -> str:
        task = self.scheduler.tasks.get(task_id)
        return task.image_id if task is not None else ""

    # -- gateways --------------------------------------------------------

    async def _handle_http(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            status, body = await self._serve_request(reader)
        except (asyncio.IncompleteReadError, ConnectionError):
            writer.close()
            return
        task_id = body.pop("_task_id", "")
        image_id = body.get("image_id", "")
        data = build_http_response(status, body)
        if image_id:
            now = self.now()
            self.ledger.record(task_id, image_id, Direction.MASTER_TO_GATEWAY, len(data), now, now)
        try:
            writer.write(data)
            await writer.drain()
        except ConnectionError:
            pass
        finally:
            writer.close()

    async def _serve_request(self, reader: asyncio.StreamReader) -> tuple[int, dict]:
        try:
            head = await reader.readuntil(b"\r\n\r\n")
        except asyncio.LimitOverrunError:
            return 400, {"error": "request head too large"}
        if len(head) > MAX_HEAD_BYTES:
            return 400, {"error": "request head too large"}
        try:
            method, rest, headers = parse_http_head(head[:-4])
        except BadRequest as exc:
            return 400, {"error": str(exc)}
        path = rest.split(" ", 1)[0]
        if path == HEALTH_PATH:
            if method != "GET":
                return 405, {"error": f"{method} not allowed on {path}"}
            return 200, self.scheduler.health()
        if path != DETECT_PATH:
            return 404, {"error": f"no route for {path}"}
        if method != "POST":
            return 405, {"error": f"{method} not allowed on {path}"}
        length = headers.get("content-length", "")
        if not length.isdigit():
            return 400, {"error": "Content-Length required"}
        if int(length) > self.max_frame:
            return 400, {"error": f"body of {length} bytes exceeds the {self.max_frame}-byte limit"}
        body = await reader.readexactly(int(length))
        now = self.now()
        image_id = headers.get("x-image-id", "")
        try:
            image, mode, prescaled = parse_detect_headers(headers, body, self.config.mode_default)
            task_id = self.scheduler.submit(image, mode, now, prescaled=prescaled)
        except (BadRequest, PreprocessError) as exc:
            self.ledger.record("", image_id, Direction.GATEWAY_TO_MASTER, len(head) + len(body), now, now)
            self.ledger.completions.append(Completion("", image_id, "", 400, now, now, 0.0))
            return 400, {"image_id": image_id, "error": str(exc)}
        self.ledger.record(task_id, image_id, Direction.GATEWAY_TO_MASTER, len(head) + len(body), now, now)
        fut = asyncio.get_running_loop().create_future()
        self._waiters[task_id] = fut
        self._apply()
        status, payload = await fut
        return status, dict(payload, _task_id=task_id)


async def run_master(server: MasterServer) -> None:
    await server.start()
    try:
        await server.serve_forever()
    finally:
        await server.close()

