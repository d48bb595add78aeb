"""Run a scenario over real loopback sockets.

The master and each worker get their own thread and event loop and talk only
through the wire protocol; the gateway client runs in the calling thread. Link
models are not applied, so the scenario's links should be loopback-like when
the outcome is compared against a simulated run. Faults are not injected here.
"""

from __future__ import annotations

import asyncio
import threading
from concurrent.futures import Future
from dataclasses import dataclass
from typing import Any, Coroutine

from ..master.scheduler import TaskTransition
from ..master.server import MasterServer
from ..metrics import RunLedger
from ..preprocess import ImagePayload
from ..worker.agent import WorkerAgent
from .client import run_schedule, wait_for_workers
from .scenario import Scenario, ScenarioError
from .sim import ClientRecord, client_image, client_inject, make_worker


class _LoopThread:
    def __init__(self, name: str):
        self.loop = asyncio.new_event_loop()
        self.thread = threading.Thread(target=self._run, name=name, daemon=True)
        self.thread.start()

    def _run(self) -> None:
        asyncio.set_event_loop(self.loop)
        self.loop.run_forever()

    def submit(self, coro: Coroutine[Any, Any, Any]) -> Future:
        return asyncio.run_coroutine_threadsafe(coro, self.loop)

    def stop(self) -> None:
        async def cancel_all() -> None:
            tasks = [t for t in asyncio.all_tasks() if t is not asyncio.current_task()]
            for t in tasks:
                t.cancel()
            await asyncio.gather(*tasks, return_exceptions=True)

        try:
            self.submit(cancel_all()).result(timeout=5)
        finally:
            self.loop.call_soon_threadsafe(self.loop.stop)
            self.thread.join(timeout=5)
            self.loop.close()


@dataclass
class RealResult:
    scenario: Scenario
    clients: dict[str, ClientRecord]
    ledger: RunLedger
    transitions: list[TaskTransition]

    def detections_by_image(self):
        return {img: rec.detections() for img, rec in self.clients.items() if rec.status == 200}


def run_real(scenario: Scenario, request_timeout: float = 120.0, startup_timeout: float = 10.0) -> RealResult:
    if scenario.faults:
        raise ScenarioError("real-socket runs do not inject faults")
    scenario.check_inputs()
    transitions: list[TaskTransition] = []
    master_thread = _LoopThread("master")
    worker_threads: list[_LoopThread] = []

    async def start_master() -> MasterServer:
        server = MasterServer(scenario.master, ("127.0.0.1", 0), ("127.0.0.1", 0),
                              on_transition=transitions.append)
        await server.start()
        return server

    server = master_thread.submit(start_master()).result(timeout=startup_timeout)
    try:
        http_host, http_port = server.http_addr
        worker_host, worker_port = server.worker_addr
        for spec in scenario.workers:
            agent = WorkerAgent(make_worker(spec), worker_host, worker_port, scenario.master.heartbeat_interval_ms)
            t = _LoopThread(f"worker-{spec.worker_id}")
            t.submit(agent.run())
            worker_threads.append(t)

        template, prescaled = client_image(scenario)

        def make_image(image_id: str) -> tuple[ImagePayload, bool]:
            return (ImagePayload(image_id, template.width, template.height, template.format, template.data),
                    prescaled)

        async def drive() -> dict[str, ClientRecord]:
            await wait_for_workers(http_host, http_port, len(scenario.workers), startup_timeout)
            subs = client_inject(scenario.rate_per_min, scenario.duration_s, scenario.mode, scenario.image_prefix)
            return await run_schedule(http_host, http_port, subs, make_image, request_timeout)

        clients = asyncio.run(drive())
    finally:
        for t in worker_threads:
            t.stop()
        master_thread.submit(server.close()).result(timeout=5)
        master_thread.stop()
    return RealResult(scenario, clients, server.ledger, transitions)
