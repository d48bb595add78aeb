"""Worker process: register with the master, execute TASK frames, answer with RESULT frames."""

from __future__ import annotations

import asyncio
import logging
import time
from dataclasses import dataclass

from ..protocol import (
    DEFAULT_MAX_FRAME,
    Frame,
    FrameDecoder,
    MsgType,
    ProtocolError,
    RegisterMsg,
    ResultEnvelope,
    TaskEnvelope,
    error_frame,
    heartbeat_frame,
)
from .detectors import Detector, DetectorError

log = logging.getLogger("fogdetect.worker")


class SlotsExhausted(Exception):
    pass


@dataclass(frozen=True)
class TaskOutcome:
    """What a worker produced for one task, before it is put on the wire."""

    frame: Frame
    compute_us: int
    ok: bool


class Worker:
    """Transport-free worker state: slot accounting and detector invocation."""

    def __init__(self, worker_id: str, tier: str, detector: Detector, slots: int = 1):
        if slots < 1:
            raise ValueError("slots must be >= 1")
        self.worker_id = worker_id
        self.tier = tier
        self.detector = detector
        self.slots = slots
        self.active: set[str] = set()

    def registration(self, address: str = "") -> RegisterMsg:
        return RegisterMsg(self.worker_id, self.tier, self.slots, address)

    def accept(self, envelope: TaskEnvelope) -> None:
        if len(self.active) >= self.slots:
            raise SlotsExhausted(
                f"worker {self.worker_id} already runs {len(self.active)} task(s) with {self.slots} slot(s)"
            )
        self.active.add(envelope.task_id)

    def release(self, task_id: str) -> None:
        self.active.discard(task_id)

    def execute(self, envelope: TaskEnvelope) -> TaskOutcome:
        """Invoke the detector for an accepted task.

        ``compute_us`` is the modeled latency when the detector has one, otherwise
        the measured duration of the detector call. The slot is not released here.
        """
        started = time.perf_counter()
        try:
            detections = self.detector.detect(envelope)
        except DetectorError as exc:
            log.warning("task %s failed: %s", envelope.task_id, exc)
            frame = error_frame("detector_failed", str(exc), task_id=envelope.task_id, worker_id=self.worker_id)
            return TaskOutcome(frame, 0, False)
        measured_us = round((time.perf_counter() - started) * 1e6)
        model = self.detector.latency
        compute_us = model.latency_us(envelope.image_id) if model is not None else measured_us
        result = ResultEnvelope(envelope.task_id, self.worker_id, tuple(detections), compute_us / 1000)
        return TaskOutcome(result.to_frame(), compute_us, True)

    def run_task(self, envelope: TaskEnvelope) -> Frame:
        """Accept, execute and release in one step; returns the RESULT or ERROR frame."""
        try:
            self.accept(envelope)
        except SlotsExhausted as exc:
            return error_frame("slots_exhausted", str(exc), task_id=envelope.task_id, worker_id=self.worker_id)
        try:
            return self.execute(envelope).frame
        finally:
            self.release(envelope.task_id)


class WorkerAgent:
    """asyncio runner connecting a :class:`Worker` to a master over TCP."""

    def __init__(
        self,
        worker: Worker,
        master_host: str,
        master_port: int,
        heartbeat_interval_ms: int = 2000,
        max_frame: int = DEFAULT_MAX_FRAME,
    ):
        self.worker = worker
        self.master_host = master_host
        self.master_port = master_port
        self.heartbeat_interval = heartbeat_interval_ms / 1000
        self.max_frame = max_frame
        self._writer: asyncio.StreamWriter | None = None
        self._send_lock = asyncio.Lock()
        self._tasks: set[asyncio.Task] = set()
        self.registered = asyncio.Event()
        self.completed = 0

    async def _send(self, frame: Frame) -> None:
        async with self._send_lock:
            self._writer.write(frame.encode())
            await self._writer.drain()

    async def _heartbeats(self) -> None:
        while True:
            await asyncio.sleep(self.heartbeat_interval)
            await self._send(heartbeat_frame(self.worker.worker_id))

    async def _run_one(self, envelope: TaskEnvelope) -> None:
        started = time.perf_counter()
        loop = asyncio.get_running_loop()
        try:
            outcome = await loop.run_in_executor(None, self.worker.execute, envelope)
            if outcome.ok and self.worker.detector.latency is not None:
                # modeled latency is realized as real waiting time
                remaining = outcome.compute_us / 1e6 - (time.perf_counter() - started)
                if remaining > 0:
                    await asyncio.sleep(remaining)
            frame = outcome.frame
            if outcome.ok:
                elapsed_ms = (time.perf_counter() - started) * 1000
                result = ResultEnvelope.from_frame(frame)
                frame = ResultEnvelope(result.task_id, result.worker_id, result.detections, elapsed_ms).to_frame()
        finally:
            self.worker.release(envelope.task_id)
        await self._send(frame)
        self.completed += 1

    async def _handle(self, frame: Frame) -> None:
        if frame.msg_type is MsgType.TASK:
            envelope = TaskEnvelope.from_frame(frame)
            try:
                self.worker.accept(envelope)
            except SlotsExhausted as exc:
                await self._send(error_frame("slots_exhausted", str(exc), task_id=envelope.task_id,
                                             worker_id=self.worker.worker_id))
                return
            task = asyncio.create_task(self._run_one(envelope))
            self._tasks.add(task)
            task.add_done_callback(self._tasks.discard)
        elif frame.msg_type is MsgType.REGISTER:
            self.registered.set()
        elif frame.msg_type is MsgType.ERROR:
            code = frame.header.get("code")
            if code == "reregister":
                log.warning("master forgot us, registering again")
                await self._send(self.worker.registration().to_frame())
            elif code == "duplicate_worker":
                raise ConnectionError(frame.header.get("message", "duplicate worker id"))
            else:
                log.warning("master error: %s", frame.header)

    async def run(self) -> None:
        reader, self._writer = await asyncio.open_connection(self.master_host, self.master_port)
        decoder = FrameDecoder(self.max_frame)
        await self._send(self.worker.registration().to_frame())
        beats = asyncio.create_task(self._heartbeats())
        try:
            while True:
                chunk = await reader.read(1 << 16)
                if not chunk:
                    break
                for frame in decoder.feed(chunk):
                    await self._handle(frame)
        except ProtocolError as exc:
            log.error("protocol error from master: %s", exc)
        finally:
            beats.cancel()
            for t in list(self._tasks):
                t.cancel()
            self._writer.close()
