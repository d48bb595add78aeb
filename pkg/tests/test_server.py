"""Master server over real loopback sockets."""

import asyncio
import io
import json

import pytest

from fogdetect.detection import BoundingBox, Detection
from fogdetect.harness.client import get_health, post_detect, wait_for_workers
from fogdetect.harness.clock import LOOPBACK
from fogdetect.harness.realnet import run_real
from fogdetect.harness.scenario import FaultSpec, PayloadSpec, Scenario, ScenarioError, WorkerSpec
from fogdetect.harness.sim import run_simulation
from fogdetect.master.scheduler import MasterConfig, TaskTransition
from fogdetect.master.server import MasterServer, parse_addr
from fogdetect.preprocess import ImageFormat, ImagePayload, Mode, synthetic_ppm
from fogdetect.protocol import FrameDecoder, MsgType, RegisterMsg
from fogdetect.worker import LatencyModel, MockDetector, Worker, WorkerAgent

DET = Detection(BoundingBox(0.5, 0.5, 0.2, 0.2), 0, 0.63)
IMAGE = ImagePayload("img-a", 4, 4, ImageFormat.OPAQUE, b"abcd")


def run(coro):
    return asyncio.run(asyncio.wait_for(coro, 30))


async def started(config=None, log=None) -> MasterServer:
    server = MasterServer(config or MasterConfig(), ("127.0.0.1", 0), ("127.0.0.1", 0), transition_log=log)
    await server.start()
    return server


def agent_for(server, worker_id="w1", latency="fixed:30"):
    worker = Worker(worker_id, "fog", MockDetector([DET], LatencyModel.parse(latency)))
    host, port = server.worker_addr
    return WorkerAgent(worker, host, port, heartbeat_interval_ms=100)


async def raw_http(server, request: bytes) -> tuple[int, dict]:
    reader, writer = await asyncio.open_connection(*server.http_addr)
    writer.write(request)
    await writer.drain()
    data = await reader.read()
    writer.close()
    head, _, body = data.partition(b"\r\n\r\n")
    status = int(head.split(b" ")[1])
    return status, json.loads(body) if body else {}


def test_parse_addr():
    assert parse_addr("0.0.0.0:8080") == ("0.0.0.0", 8080)
    assert parse_addr(":9000") == ("127.0.0.1", 9000)
    assert parse_addr("9000") == ("127.0.0.1", 9000)
    with pytest.raises(ValueError):
        parse_addr("host:port")


def test_health_without_workers():
    async def body():
        server = await started()
        try:
            return await get_health(*server.http_addr)
        finally:
            await server.close()

    health = run(body())
    assert health["alive"] == 0
    assert health["workers"] == []


def test_503_after_queue_wait_with_zero_workers():
    async def body():
        server = await started(MasterConfig(queue_wait_timeout_ms=300))
        try:
            loop = asyncio.get_running_loop()
            t0 = loop.time()
            reply = await post_detect(*server.http_addr, IMAGE, Mode.HIGH_ACCURACY, timeout=10)
            return reply, loop.time() - t0
        finally:
            await server.close()

    reply, waited = run(body())
    assert reply.status == 503
    assert reply.body["image_id"] == "img-a"
    assert 0.25 <= waited < 2.0


@pytest.mark.parametrize(
    "request_bytes,status",
    [
        (b"POST /v1/detect HTTP/1.1\r\nX-Image-Id: a\r\nX-Mode: accuracy\r\nX-Height: 4\r\nX-Format: ppm\r\n"
         b"Content-Length: 0\r\n\r\n", 400),
        (b"POST /v1/detect HTTP/1.1\r\nX-Image-Id: a\r\nX-Mode: fast\r\nX-Width: 4\r\nX-Height: 4\r\n"
         b"X-Format: ppm\r\nContent-Length: 0\r\n\r\n", 400),
        (b"GET /v1/nothing HTTP/1.1\r\n\r\n", 404),
        (b"GET /v1/detect HTTP/1.1\r\n\r\n", 405),
        (b"POST /v1/health HTTP/1.1\r\nContent-Length: 0\r\n\r\n", 405),
    ],
)
def test_http_errors(request_bytes, status):
    async def body():
        server = await started()
        try:
            return await raw_http(server, request_bytes)
        finally:
            await server.close()

    got, doc = run(body())
    assert got == status
    assert "error" in doc


def test_latency_mode_bad_ppm_is_400():
    async def body():
        server = await started()
        try:
            bad = ImagePayload("x", 10, 10, ImageFormat.PPM_P6, b"P6\n10 10\n255\n")
            return await post_detect(*server.http_addr, bad, Mode.LOW_LATENCY, timeout=5)
        finally:
            await server.close()

    reply = run(body())
    assert reply.status == 400
    assert "byte offset" in reply.body["error"]


def test_detect_round_trip_and_transition_log():
    log = io.StringIO()

    async def body():
        server = await started(log=log)
        agent = agent_for(server)
        task = asyncio.create_task(agent.run())
        try:
            await wait_for_workers(*server.http_addr, 1)
            image = ImagePayload("big", 400, 300, ImageFormat.PPM_P6, synthetic_ppm(400, 300))
            reply = await post_detect(*server.http_addr, image, Mode.LOW_LATENCY, timeout=10)
            health = await get_health(*server.http_addr)
            return reply, health, server.ledger
        finally:
            task.cancel()
            await server.close()

    reply, health, ledger = run(body())
    assert reply.status == 200
    assert reply.body["image_id"] == "big"
    assert [Detection.from_dict(d) for d in reply.body["detections"]] == [DET]
    assert reply.body["timing"]["worker_id"] == "w1"
    assert reply.body["timing"]["compute_ms"] >= 30
    assert health["tasks"]["Done"] == 1
    lines = [TaskTransition.parse_line(line) for line in log.getvalue().splitlines()]
    assert [(t.from_state, t.to_state) for t in lines] == [("-", "Queued"), ("Queued", "Dispatched"),
                                                           ("Dispatched", "Done")]
    # the worker received the master-side rescaled image
    to_worker = [e for e in ledger.entries if e.direction.value == "MasterToWorker"]
    assert len(to_worker) == 1 and to_worker[0].bytes_on_wire < 400 * 300 * 3


def test_duplicate_worker_id_rejected():
    async def body():
        server = await started()
        agent = agent_for(server)
        task = asyncio.create_task(agent.run())
        try:
            await wait_for_workers(*server.http_addr, 1)
            reader, writer = await asyncio.open_connection(*server.worker_addr)
            writer.write(RegisterMsg("w1", "fog", 1, "").to_frame().encode())
            await writer.drain()
            dec = FrameDecoder()
            frames = []
            while not frames:
                frames = dec.feed(await reader.read(4096))
            writer.close()
            return frames[0]
        finally:
            task.cancel()
            await server.close()

    frame = run(body())
    assert frame.msg_type is MsgType.ERROR
    assert frame.header["code"] == "duplicate_worker"


def test_lost_worker_connection_fails_over():
    async def body():
        server = await started()
        slow = agent_for(server, "w1", "fixed:5000")
        fast = agent_for(server, "w2", "fixed:20")
        t1 = asyncio.create_task(slow.run())
        await wait_for_workers(*server.http_addr, 1)
        t2 = asyncio.create_task(fast.run())
        try:
            await wait_for_workers(*server.http_addr, 2)
            pending = asyncio.create_task(post_detect(*server.http_addr, IMAGE, Mode.HIGH_ACCURACY, timeout=10))
            await asyncio.sleep(0.2)
            t1.cancel()  # closes the slow worker's socket mid-task
            return await pending
        finally:
            t2.cancel()
            await server.close()

    reply = run(body())
    assert reply.status == 200
    assert reply.body["timing"]["worker_id"] == "w2"


def sim_real_scenario():
    worker = WorkerSpec("fog-1", "fog", "mock", LatencyModel.parse("fixed:100"), LOOPBACK, canned=(DET,))
    return Scenario("loop", (worker,), rate_per_min=240, duration_s=3, client_link=LOOPBACK,
                    payload=PayloadSpec(declared_bytes=4956))


def test_sim_and_real_agree():
    sc = sim_real_scenario()
    sim = run_simulation(sc)
    real = run_real(sc, request_timeout=10)
    assert len(real.clients) == len(sim.clients) == 12
    assert real.detections_by_image() == sim.detections_by_image()
    for img, rec in sim.clients.items():
        assert real.clients[img].status == rec.status == 200
        assert abs(real.clients[img].response_ms - rec.response_ms) <= 50


def test_real_runner_rejects_faults():
    sc = sim_real_scenario()
    sc = sc.with_(faults=(FaultSpec("fog-1", "kill", 1.0),))
    with pytest.raises(ScenarioError):
        run_real(sc)
