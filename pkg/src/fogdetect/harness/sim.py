"""In-process scenario execution under a virtual clock.

Gateway, master and workers exchange the real encoded bytes (HTTP messages and
frames); every message is delayed by its link's transfer time. The master side
is the same :class:`~fogdetect.master.scheduler.Scheduler` the network server
uses, and workers are the same :class:`~fogdetect.worker.agent.Worker`.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

from ..detection import Detection
from ..master.scheduler import (
    Complete,
    Dispatch,
    DuplicateWorkerError,
    Fail,
    Scheduler,
    TaskState,
    TaskTransition,
)
from ..metrics import Completion, Direction, RunLedger
from ..preprocess import ImageFormat, ImagePayload, Mode, PreprocessError, prepare, synthetic_ppm
from ..protocol import (
    BadRequest,
    MsgType,
    RegisterMsg,
    ResultEnvelope,
    TaskEnvelope,
    build_detect_request,
    build_http_response,
    decode_frame,
    detect_response_body,
    error_frame,
    heartbeat_frame,
    parse_detect_headers,
    parse_http_head,
)
from ..worker.agent import SlotsExhausted, Worker
from ..worker.detectors import MockDetector, TensorFileDetector
from .clock import LinkModel, VirtualClock
from .scenario import Scenario, WorkerSpec

log = logging.getLogger("fogdetect.harness")

US = 1_000_000
GATEWAY_TIMEOUT = 504


@dataclass(frozen=True)
class Submission:
    time_us: int
    image_id: str
    mode: Mode


def client_inject(rate_per_min: float, duration_s: float, mode: Mode = Mode.HIGH_ACCURACY,
                  prefix: str = "img") -> list[Submission]:
    """Submission times ``k * 60 / rate`` seconds for every k landing before ``duration_s``."""
    if rate_per_min <= 0:
        raise ValueError("rate must be > 0")
    interval = Fraction(60 * US) / Fraction(rate_per_min)
    end = Fraction(duration_s) * US
    out = []
    k = 0
    while k * interval < end:
        out.append(Submission(round(k * interval), f"{prefix}{k:05d}", mode))
        k += 1
    return out


@dataclass
class ClientRecord:
    image_id: str
    sent_us: int
    recv_us: int | None = None
    status: int | None = None
    body: dict | None = None

    @property
    def response_ms(self) -> float | None:
        return None if self.recv_us is None else (self.recv_us - self.sent_us) / 1000

    def detections(self) -> list[Detection]:
        if not self.body or "detections" not in self.body:
            return []
        return [Detection.from_dict(d) for d in self.body["detections"]]


@dataclass
class SimResult:
    scenario: Scenario
    ledger: RunLedger
    clients: dict[str, ClientRecord]
    busy: dict[str, list[tuple[float, float]]]
    transitions: list[TaskTransition]
    control_bytes: dict[str, int]
    duplicates_dropped: int
    dispatch_counts: dict[str, int]
    max_outstanding_spread: int
    outstanding_mismatches: int
    end_us: int
    events_run: int

    def detections_by_image(self) -> dict[str, list[Detection]]:
        return {img: rec.detections() for img, rec in self.clients.items() if rec.status == 200}


def make_worker(spec: WorkerSpec) -> Worker:
    if spec.detector == "mock":
        detector = MockDetector(spec.canned, spec.latency)
    else:
        detector = TensorFileDetector(spec.fixtures, spec.score_threshold, spec.iou_threshold, spec.latency)
    return Worker(spec.worker_id, spec.tier, detector, spec.slots)


def client_image(scenario: Scenario) -> tuple[ImagePayload, bool]:
    """The image every submission of ``scenario`` carries (id left blank) and whether it is pre-scaled."""
    spec = scenario.payload
    if spec.declared_bytes is not None:
        # content is irrelevant to an opaque body, only its size matters
        image = ImagePayload("", spec.width or 1, spec.height or 1, ImageFormat.OPAQUE, bytes(spec.declared_bytes))
    else:
        data = synthetic_ppm(spec.width, spec.height, seed=scenario.seed)
        image = ImagePayload("", spec.width, spec.height, ImageFormat.PPM_P6, data)
    prescaled = False
    if scenario.client_rescale and scenario.mode is Mode.LOW_LATENCY:
        if image.format is ImageFormat.PPM_P6:
            image = prepare(image, Mode.LOW_LATENCY, scenario.target_long_side)
        prescaled = True
    return image, prescaled


class _SimWorker:
    def __init__(self, sim: "Simulation", spec: WorkerSpec):
        self.sim = sim
        self.spec = spec
        self.worker = make_worker(spec)
        self.killed = False
        self.stalled_until: int | None = None
        self.held: list[tuple[bytes, str, str]] = []
        self.busy: list[tuple[float, float]] = []
        self.hb_timer = None

    @property
    def link(self) -> LinkModel:
        return self.spec.link

    def stalled(self) -> bool:
        return self.stalled_until is not None and self.sim.clock.now < self.stalled_until

    def send(self, data: bytes, task_id: str = "", image_id: str = "") -> None:
        if self.killed:
            return
        if self.stalled():
            self.held.append((data, task_id, image_id))
            return
        self.sim.transmit(self.link, Direction.WORKER_TO_MASTER, data, task_id, image_id,
                          lambda raw: self.sim.master_receive(self.spec.worker_id, raw))

    def register(self) -> None:
        self.send(self.worker.registration(address=f"sim://{self.spec.worker_id}").to_frame().encode())

    def start_heartbeats(self) -> None:
        interval = self.sim.scenario.master.heartbeat_interval_ms * 1000
        self.hb_timer = self.sim.clock.call_later(interval, self._beat, interval)

    def _beat(self, interval: int) -> None:
        if self.killed:
            return
        if not self.stalled():
            self.send(heartbeat_frame(self.spec.worker_id).encode())
        self.hb_timer = self.sim.clock.call_later(interval, self._beat, interval)

    def kill(self) -> None:
        self.killed = True
        if self.hb_timer is not None:
            self.hb_timer.cancel()

    def stall(self, duration_us: int) -> None:
        self.stalled_until = self.sim.clock.now + duration_us
        self.sim.clock.call_at(self.stalled_until, self._unstall)

    def _unstall(self) -> None:
        self.stalled_until = None
        held, self.held = self.held, []
        for data, task_id, image_id in held:
            self.send(data, task_id, image_id)

    def receive(self, raw: bytes) -> None:
        if self.killed:
            return
        frame = decode_frame(raw)
        if frame.msg_type is MsgType.TASK:
            envelope = TaskEnvelope.from_frame(frame)
            try:
                self.worker.accept(envelope)
            except SlotsExhausted as exc:
                err = error_frame("slots_exhausted", str(exc), task_id=envelope.task_id, worker_id=self.spec.worker_id)
                self.send(err.encode(), envelope.task_id, envelope.image_id)
                return
            outcome = self.worker.execute(envelope)
            start = self.sim.clock.now
            self.sim.clock.call_later(outcome.compute_us, self._finish, envelope, outcome, start)
        elif frame.msg_type is MsgType.ERROR and frame.header.get("code") == "reregister":
            self.register()

    def _finish(self, envelope: TaskEnvelope, outcome, start: int) -> None:
        self.worker.release(envelope.task_id)
        if self.killed:
            return
        if outcome.compute_us:
            self.busy.append((start / US, self.sim.clock.now / US))
        self.send(outcome.frame.encode(), envelope.task_id, envelope.image_id)


class Simulation:
    def __init__(self, scenario: Scenario, observer: Callable[["Simulation"], None] | None = None):
        scenario.check_inputs()
        self.scenario = scenario
        self.clock = VirtualClock(start_us=-round(scenario.warmup_s * US))
        self.ledger = RunLedger()
        self.transitions: list[TaskTransition] = []
        self.scheduler = Scheduler(scenario.master, on_transition=self.transitions.append)
        self.workers = {w.worker_id: _SimWorker(self, w) for w in scenario.workers}
        self.clients: dict[str, ClientRecord] = {}
        self.control_bytes = {d.value: 0 for d in Direction}
        self.dispatch_counts = {w.worker_id: 0 for w in scenario.workers}
        self.max_spread = 0
        self.mismatches = 0
        self._task_image: dict[str, str] = {}
        self._observer = observer
        self._payload_cache: tuple[ImagePayload, bool] | None = None
        self._expiry_armed: set[int] = set()

    # -- transport ---------------------------------------------------------

    def transmit(self, link: LinkModel, direction: Direction, data: bytes, task_id: str, image_id: str,
                 deliver: Callable[[bytes], str | None]) -> None:
        """Deliver ``data`` after the link's transfer time.

        Task traffic goes to the ledger; control frames only count bytes. ``deliver``
        may return a task id to label an entry whose id was assigned on arrival.
        """
        sent = self.clock.now
        arrive = sent + link.transfer_us(len(data))

        def on_arrival() -> None:
            label = deliver(data)
            if task_id or image_id:
                self.ledger.record(label or task_id, image_id, direction, len(data), sent, self.clock.now)
            else:
                self.control_bytes[direction.value] += len(data)
            self._after_event()

        self.clock.call_at(arrive, on_arrival)

    # -- gateway -----------------------------------------------------------

    def _client_payload(self, image_id: str) -> tuple[ImagePayload, bool]:
        if self._payload_cache is None:
            self._payload_cache = client_image(self.scenario)
        image, prescaled = self._payload_cache
        return ImagePayload(image_id, image.width, image.height, image.format, image.data), prescaled

    def _submit(self, sub: Submission) -> None:
        image, prescaled = self._client_payload(sub.image_id)
        request = build_detect_request(image, sub.mode, prescaled=prescaled)
        self.clients[sub.image_id] = ClientRecord(sub.image_id, self.clock.now)
        self.transmit(self.scenario.client_link, Direction.GATEWAY_TO_MASTER, request, "", sub.image_id,
                      lambda raw: self._master_http(sub.image_id, raw))

    def _client_response(self, image_id: str, raw: bytes) -> None:
        rec = self.clients[image_id]
        head, _, body = raw.partition(b"\r\n\r\n")
        _, rest, _ = parse_http_head(head)
        rec.status = int(rest.split(" ", 1)[0])
        rec.recv_us = self.clock.now
        rec.body = json.loads(body)

    # -- master ------------------------------------------------------------

    def _respond(self, image_id: str, task_id: str, status: int, body: dict) -> None:
        raw = build_http_response(status, body)
        self.transmit(self.scenario.client_link, Direction.MASTER_TO_GATEWAY, raw, task_id, image_id,
                      lambda data: self._client_response(image_id, data))

    def _master_http(self, image_id: str, raw: bytes) -> str | None:
        now = self.clock.now
        head, _, body = raw.partition(b"\r\n\r\n")
        try:
            _, _, headers = parse_http_head(head)
            image, mode, prescaled = parse_detect_headers(headers, body, self.scenario.mode)
            task_id = self.scheduler.submit(image, mode, now, prescaled=prescaled)
        except (BadRequest, PreprocessError) as exc:
            self.ledger.completions.append(Completion("", image_id, "", 400, now, now, 0.0))
            self._respond(image_id, "", 400, {"image_id": image_id, "error": str(exc)})
            return None
        self._task_image[task_id] = image_id
        self._apply()
        return task_id

    def master_receive(self, worker_id: str, raw: bytes) -> None:
        now = self.clock.now
        frame = decode_frame(raw)
        sw = self.workers[worker_id]
        if frame.msg_type is MsgType.REGISTER:
            try:
                self.scheduler.register_worker(RegisterMsg.from_frame(frame), now)
                reply = RegisterMsg(worker_id).to_frame().encode()
                if sw.hb_timer is None:
                    sw.start_heartbeats()
            except DuplicateWorkerError as exc:
                reply = error_frame("duplicate_worker", str(exc)).encode()
            self.transmit(sw.link, Direction.MASTER_TO_WORKER, reply, "", "", sw.receive)
        elif frame.msg_type is MsgType.HEARTBEAT:
            if not self.scheduler.heartbeat(worker_id, now):
                self.transmit(sw.link, Direction.MASTER_TO_WORKER,
                              error_frame("reregister", "unknown or expired worker").encode(), "", "", sw.receive)
        elif frame.msg_type is MsgType.RESULT:
            self.scheduler.on_result(ResultEnvelope.from_frame(frame), now)
        elif frame.msg_type is MsgType.ERROR and frame.header.get("task_id"):
            self.scheduler.on_worker_error(frame.header["task_id"], worker_id, frame.header.get("message", ""), now)
        self._apply()

    def _apply(self) -> None:
        self._arm_expiry()
        for action in self.scheduler.take_actions():
            if isinstance(action, Dispatch):
                sw = self.workers[action.worker_id]
                self.dispatch_counts[action.worker_id] += 1
                env = action.envelope
                self.transmit(sw.link, Direction.MASTER_TO_WORKER, env.to_frame().encode(), env.task_id,
                              env.image_id, sw.receive)
            elif isinstance(action, Complete):
                task = self.scheduler.tasks[action.task_id]
                self.ledger.completions.append(
                    Completion(action.task_id, action.image_id, action.result.worker_id, 200,
                               task.enqueue_time, task.done_time, action.result.compute_ms)
                )
                body = detect_response_body(action.image_id, action.result, action.total_us / 1000)
                self._respond(action.image_id, action.task_id, 200, body)
            elif isinstance(action, Fail):
                task = self.scheduler.tasks[action.task_id]
                self.ledger.completions.append(
                    Completion(action.task_id, action.image_id, "", action.status, task.enqueue_time,
                               task.done_time, 0.0)
                )
                self._respond(action.image_id, action.task_id, action.status,
                              {"image_id": action.image_id, "error": action.reason})

    def _arm_expiry(self) -> None:
        # wake exactly when a starving task times out, like the server does
        at = self.scheduler.next_expiry()
        if at is not None and at >= self.clock.now and at not in self._expiry_armed:
            self._expiry_armed.add(at)
            self.clock.call_at(at, self._expire, at)

    def _expire(self, at: int) -> None:
        self._expiry_armed.discard(at)
        self.scheduler.expire_queued(self.clock.now)
        self._apply()
        self._after_event()

    def _tick(self, interval: int) -> None:
        self.scheduler.tick(self.clock.now)
        self._apply()
        self._after_event()
        self.clock.call_later(interval, self._tick, interval)

    def _after_event(self) -> None:
        live = self.scheduler.live_workers()
        if live:
            counts = [w.outstanding for w in live]
            self.max_spread = max(self.max_spread, max(counts) - min(counts))
        for w in live:
            dispatched = sum(1 for t in w.inflight if self.scheduler.tasks[t].state is TaskState.DISPATCHED
                             and self.scheduler.tasks[t].assigned_worker == w.worker_id)
            if dispatched != w.outstanding:
                self.mismatches += 1
        if self._observer is not None:
            self._observer(self)

    # -- driver ------------------------------------------------------------

    def run(self) -> SimResult:
        sc = self.scenario
        for sw in self.workers.values():
            self.clock.call_at(self.clock.now, sw.register)
        interval = sc.master.heartbeat_interval_ms * 1000
        self.clock.call_at(self.clock.now + interval, self._tick, interval)
        submissions = client_inject(sc.rate_per_min, sc.duration_s, sc.mode, sc.image_prefix)
        for sub in submissions:
            self.clock.call_at(sub.time_us, self._submit, sub)
        for fault in sc.faults:
            sw = self.workers[fault.worker_id]
            at = round(fault.at_s * US)
            if fault.kind == "kill":
                self.clock.call_at(at, sw.kill)
            else:
                self.clock.call_at(at, sw.stall, round(fault.duration_s * US))

        duration_us = round(sc.duration_s * US)
        total = len(submissions)

        def finished() -> bool:
            if self.clock.now < duration_us and total:
                return False
            if len(self.clients) < total:
                return False
            return all(r.recv_us is not None for r in self.clients.values())

        if total:
            self.clock.run(until_us=duration_us + round(sc.drain_s * US), stop=finished)
        for rec in self.clients.values():
            if rec.recv_us is None:
                rec.status = GATEWAY_TIMEOUT
                self.ledger.completions.append(Completion("", rec.image_id, "", GATEWAY_TIMEOUT, rec.sent_us,
                                                          self.clock.now, 0.0))
        busy = {"master": []}
        for wid, sw in self.workers.items():
            busy[wid] = sw.busy
        return SimResult(
            scenario=sc,
            ledger=self.ledger,
            clients=self.clients,
            busy=busy,
            transitions=self.transitions,
            control_bytes=self.control_bytes,
            duplicates_dropped=self.scheduler.duplicates_dropped,
            dispatch_counts=self.dispatch_counts,
            max_outstanding_spread=self.max_spread,
            outstanding_mismatches=self.mismatches,
            end_us=self.clock.now,
            events_run=self.clock.events_run,
        )


def run_simulation(scenario: Scenario) -> SimResult:
    return Simulation(scenario).run()
