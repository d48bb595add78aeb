"""Worker registry, task table and dispatch policy for the master.

The :class:`Scheduler` performs no I/O and reads no clock. Every entry point
takes ``now`` in integer microseconds and queues :class:`Dispatch`,
:class:`Complete` or :class:`Fail` actions for the driver to carry out
(the virtual-clock simulator or the asyncio server).
"""

from __future__ import annotations

import enum
import itertools
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Union

from ..preprocess import DEFAULT_TARGET_LONG_SIDE, ImagePayload, Mode, prepare
from ..protocol import RegisterMsg, ResultEnvelope, TaskEnvelope

log = logging.getLogger("fogdetect.master")

US_PER_MS = 1000


class Tier(str, enum.Enum):
    FOG = "fog"
    CLOUD = "cloud"


class TaskState(str, enum.Enum):
    QUEUED = "Queued"
    DISPATCHED = "Dispatched"
    DONE = "Done"
    FAILED = "Failed"


class DuplicateWorkerError(Exception):
    def __init__(self, worker_id: str):
        self.worker_id = worker_id
        super().__init__(f"worker {worker_id!r} is already registered and alive")


@dataclass
class MasterConfig:
    heartbeat_interval_ms: int = 2000
    heartbeat_timeout_intervals: int = 3
    queue_wait_timeout_ms: int = 10_000
    max_attempts: int = 5
    target_long_side: int = DEFAULT_TARGET_LONG_SIDE
    mode_default: Mode = Mode.HIGH_ACCURACY

    @property
    def heartbeat_timeout_us(self) -> int:
        return self.heartbeat_interval_ms * self.heartbeat_timeout_intervals * US_PER_MS


@dataclass
class WorkerRecord:
    worker_id: str
    address: str
    tier: Tier
    registered_seq: int
    last_heartbeat: int
    slots: int = 1
    alive: bool = True
    # task ids handed to this worker and not yet answered
    inflight: set[str] = field(default_factory=set)

    @property
    def outstanding(self) -> int:
        return len(self.inflight)

    def summary(self) -> dict:
        return {
            "worker_id": self.worker_id,
            "address": self.address,
            "tier": self.tier.value,
            "alive": self.alive,
            "outstanding": self.outstanding,
            "slots": self.slots,
            "registered_seq": self.registered_seq,
            "last_heartbeat_us": self.last_heartbeat,
        }


@dataclass
class TaskRecord:
    task_id: str
    image_id: str
    mode: Mode
    image: ImagePayload | None
    enqueue_time: int
    state: TaskState = TaskState.QUEUED
    attempts: int = 0
    assigned_worker: str | None = None
    queued_since: int = 0
    dispatch_time: int | None = None
    done_time: int | None = None
    result: ResultEnvelope | None = None


@dataclass(frozen=True)
class Dispatch:
    worker_id: str
    envelope: TaskEnvelope


@dataclass(frozen=True)
class Complete:
    task_id: str
    image_id: str
    result: ResultEnvelope
    total_us: int


@dataclass(frozen=True)
class Fail:
    task_id: str
    image_id: str
    status: int
    reason: str


Action = Union[Dispatch, Complete, Fail]


@dataclass(frozen=True)
class TaskTransition:
    """One task state change; ``format_line`` gives the structured log record."""

    time_us: int
    task_id: str
    image_id: str
    from_state: str
    to_state: str
    worker_id: str
    attempt: int

    FIELDS = ("time_us", "task_id", "image_id", "from_state", "to_state", "worker_id", "attempt")

    def format_line(self) -> str:
        return "\t".join(str(getattr(self, f)) for f in self.FIELDS)

    @classmethod
    def parse_line(cls, line: str) -> "TaskTransition":
        parts = line.rstrip("\n").split("\t")
        if len(parts) != len(cls.FIELDS):
            raise ValueError(f"expected {len(cls.FIELDS)} tab-separated fields, got {len(parts)}")
        return cls(int(parts[0]), parts[1], parts[2], parts[3], parts[4], parts[5], int(parts[6]))


class Scheduler:
    def __init__(
        self,
        config: MasterConfig | None = None,
        on_transition: Callable[[TaskTransition], None] | None = None,
    ):
        self.config = config or MasterConfig()
        self.workers: dict[str, WorkerRecord] = {}
        self.tasks: dict[str, TaskRecord] = {}
        self.queue: deque[str] = deque()
        self.duplicates_dropped = 0
        self._on_transition = on_transition
        self._seq = itertools.count()
        self._task_seq = itertools.count()
        self._rr_cursor = -1
        self._no_workers_since: int | None = 0
        self._actions: list[Action] = []

    # -- helpers ---------------------------------------------------------

    def take_actions(self) -> list[Action]:
        actions, self._actions = self._actions, []
        return actions

    def live_workers(self) -> list[WorkerRecord]:
        return [w for w in self.workers.values() if w.alive]

    def _transition(self, task: TaskRecord, to: TaskState, now: int) -> None:
        before = task.state
        task.state = to
        if self._on_transition is not None:
            self._on_transition(
                TaskTransition(now, task.task_id, task.image_id, before.value, to.value,
                               task.assigned_worker or "-", task.attempts)
            )

    def _update_liveness_mark(self, now: int) -> None:
        if self.live_workers():
            self._no_workers_since = None
        elif self._no_workers_since is None:
            self._no_workers_since = now

    # -- registry --------------------------------------------------------

    def register_worker(self, msg: RegisterMsg, now: int) -> WorkerRecord:
        if not msg.worker_id:
            raise ValueError("worker_id must be non-empty")
        old = self.workers.get(msg.worker_id)
        if old is not None:
            if old.alive and now - old.last_heartbeat <= self.config.heartbeat_timeout_us:
                raise DuplicateWorkerError(msg.worker_id)
            self._retire(old, now)
        record = WorkerRecord(
            worker_id=msg.worker_id,
            address=msg.address,
            tier=Tier(msg.tier),
            registered_seq=next(self._seq),
            last_heartbeat=now,
            slots=max(1, msg.slots),
        )
        self.workers[msg.worker_id] = record
        log.info("registered worker %s tier=%s seq=%d", record.worker_id, record.tier.value, record.registered_seq)
        self._update_liveness_mark(now)
        self._pump(now)
        return record

    def heartbeat(self, worker_id: str, now: int) -> bool:
        """Record a heartbeat; False means the worker is unknown or was declared dead."""
        record = self.workers.get(worker_id)
        if record is None or not record.alive:
            return False
        record.last_heartbeat = now
        return True

    def _retire(self, record: WorkerRecord, now: int) -> list[str]:
        record.alive = False
        requeued = []
        for task_id in sorted(record.inflight):
            task = self.tasks[task_id]
            if task.state is TaskState.DISPATCHED and task.assigned_worker == record.worker_id:
                if self._requeue_or_fail(task, now, f"worker {record.worker_id} lost"):
                    requeued.append(task_id)
        record.inflight.clear()
        self._update_liveness_mark(now)
        return requeued

    def reap_and_requeue(self, now: int) -> list[str]:
        requeued: list[str] = []
        timeout = self.config.heartbeat_timeout_us
        for record in sorted(self.workers.values(), key=lambda w: w.registered_seq):
            if record.alive and now - record.last_heartbeat > timeout:
                log.warning("worker %s missed heartbeats, re-queueing %d task(s)", record.worker_id, record.outstanding)
                requeued.extend(self._retire(record, now))
        self._pump(now)
        return requeued

    def worker_lost(self, worker_id: str, now: int) -> list[str]:
        """The worker's connection closed; fail over immediately instead of waiting for the reaper."""
        record = self.workers.get(worker_id)
        if record is None or not record.alive:
            return []
        requeued = self._retire(record, now)
        self._pump(now)
        return requeued

    # -- scheduling ------------------------------------------------------

    def select_worker(self) -> str | None:
        """Live worker with the fewest outstanding tasks and a free slot.

        Ties rotate: the next tied worker after the previously selected one in
        registration order, wrapping to the lowest.
        """
        eligible = [w for w in self.live_workers() if w.outstanding < w.slots]
        if not eligible:
            return None
        low = min(w.outstanding for w in eligible)
        tied = sorted((w for w in eligible if w.outstanding == low), key=lambda w: w.registered_seq)
        chosen = next((w for w in tied if w.registered_seq > self._rr_cursor), tied[0])
        self._rr_cursor = chosen.registered_seq
        return chosen.worker_id

    def new_task_id(self) -> str:
        return f"t{next(self._task_seq):06d}"

    def submit(self, image: ImagePayload, mode: Mode | None, now: int, prescaled: bool = False) -> str:
        """Enqueue an image; raises :class:`~fogdetect.preprocess.PreprocessError` on bad input."""
        mode = mode or self.config.mode_default
        prepared = image if prescaled else prepare(image, mode, self.config.target_long_side)
        task = TaskRecord(
            task_id=self.new_task_id(),
            image_id=image.image_id,
            mode=mode,
            image=prepared,
            enqueue_time=now,
            queued_since=now,
        )
        self.tasks[task.task_id] = task
        self.queue.append(task.task_id)
        if self._on_transition is not None:
            self._on_transition(TaskTransition(now, task.task_id, task.image_id, "-", TaskState.QUEUED.value, "-", 0))
        self._pump(now)
        return task.task_id

    def _pump(self, now: int) -> None:
        while self.queue:
            worker_id = self.select_worker()
            if worker_id is None:
                return
            task = self.tasks[self.queue.popleft()]
            worker = self.workers[worker_id]
            task.attempts += 1
            task.assigned_worker = worker_id
            task.dispatch_time = now
            worker.inflight.add(task.task_id)
            self._transition(task, TaskState.DISPATCHED, now)
            image = task.image
            self._actions.append(
                Dispatch(
                    worker_id,
                    TaskEnvelope(task.task_id, task.image_id, task.mode, task.attempts,
                                 image.width, image.height, image.format, image.data),
                )
            )

    def _requeue_or_fail(self, task: TaskRecord, now: int, why: str) -> bool:
        if task.attempts >= self.config.max_attempts:
            self._finish_failed(task, now, 502, f"{why}; giving up after {task.attempts} attempts")
            return False
        task.assigned_worker = None
        task.queued_since = now
        self._transition(task, TaskState.QUEUED, now)
        self.queue.append(task.task_id)
        return True

    def _finish_failed(self, task: TaskRecord, now: int, status: int, reason: str) -> None:
        task.done_time = now
        task.image = None
        self._transition(task, TaskState.FAILED, now)
        self._actions.append(Fail(task.task_id, task.image_id, status, reason))

    def on_result(self, result: ResultEnvelope, now: int) -> None:
        task = self.tasks.get(result.task_id)
        worker = self.workers.get(result.worker_id)
        if worker is not None:
            worker.inflight.discard(result.task_id)
        if task is None or task.state in (TaskState.DONE, TaskState.FAILED):
            # first result wins; late copies from a failed-over attempt are dropped
            self.duplicates_dropped += 1
            log.info("dropping duplicate result for %s from %s", result.task_id, result.worker_id)
            self._pump(now)
            return
        if task.state is TaskState.QUEUED:
            self.queue.remove(task.task_id)
        task.assigned_worker = result.worker_id
        task.done_time = now
        task.result = result
        task.image = None
        self._transition(task, TaskState.DONE, now)
        self._actions.append(Complete(task.task_id, task.image_id, result, now - task.enqueue_time))
        self._pump(now)

    def on_worker_error(self, task_id: str, worker_id: str, message: str, now: int) -> None:
        task = self.tasks.get(task_id)
        worker = self.workers.get(worker_id)
        if worker is not None:
            worker.inflight.discard(task_id)
        if task is not None and task.state is TaskState.DISPATCHED and task.assigned_worker == worker_id:
            self._requeue_or_fail(task, now, f"worker {worker_id} error: {message}")
        self._pump(now)

    def expire_queued(self, now: int) -> list[str]:
        """Fail queued tasks that waited ``queue_wait_timeout`` with no live worker around."""
        self._update_liveness_mark(now)
        if self._no_workers_since is None:
            return []
        limit = self.config.queue_wait_timeout_ms * US_PER_MS
        expired = []
        for task_id in list(self.queue):
            task = self.tasks[task_id]
            if now - max(task.queued_since, self._no_workers_since) >= limit:
                self.queue.remove(task_id)
                self._finish_failed(task, now, 503, "no worker available")
                expired.append(task_id)
        return expired

    def tick(self, now: int) -> list[str]:
        """Periodic housekeeping: reap silent workers, then expire starved tasks."""
        requeued = self.reap_and_requeue(now)
        self.expire_queued(now)
        return requeued

    def next_expiry(self) -> int | None:
        """Earliest time a queued task could time out, if any task is currently starving."""
        if self._no_workers_since is None or not self.queue:
            return None
        limit = self.config.queue_wait_timeout_ms * US_PER_MS
        return min(max(self.tasks[t].queued_since, self._no_workers_since) for t in self.queue) + limit

    def health(self) -> dict:
        states = {s.value: 0 for s in TaskState}
        for t in self.tasks.values():
            states[t.state.value] += 1
        return {
            "workers": [w.summary() for w in sorted(self.workers.values(), key=lambda w: w.registered_seq)],
            "alive": len(self.live_workers()),
            "queued": len(self.queue),
            "tasks": states,
            "duplicates_dropped": self.duplicates_dropped,
        }
