"""The worker daemon.

Loop: register with the registry, wait to be recruited by one client,
unregister, serve that client's tasks until it releases us (or goes away),
then register again.  Ping is answered by the connection handler, so it is
answered even while a task is computing on the compute lane.
"""

import asyncio
import concurrent.futures
import functools
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional

from .errors import (ConnectionClosed, ProcessorPanic, RegistryUnreachable,
                     UnknownService)
from .processors import Processor, ProcessorFactory
from .protocol import (AssignTask, Endpoint, Ping, Pong, Recruit, RecruitAck,
                       Release, ServiceId, Task, TaskDone, TaskResult)
from .registry import DEFAULT_LEASE_MS, DEFAULT_RENEW_MS, RegistryClient
from .skeletons import NormalForm
from .transport import Network

log = logging.getLogger(__name__)


@dataclass
class WorkerConfig:
    registry_addr: Endpoint
    bind_addr: Endpoint
    processors: Mapping[str, ProcessorFactory]
    lease_ms: int = DEFAULT_LEASE_MS
    renew_ms: int = DEFAULT_RENEW_MS
    advertise_host: Optional[str] = None
    attributes: Dict[str, str] = field(default_factory=dict)
    backoff_initial_ms: int = 500
    backoff_cap_ms: int = 30_000

    def __post_init__(self):
        if not self.processors:
            raise ValueError('a worker needs at least one processor')
        if not 0 < self.renew_ms < self.lease_ms:
            raise ValueError('renew_ms must be positive and below lease_ms')


def serve_task(job: NormalForm, task: Task, instances: List[Processor],
               worker: ServiceId) -> TaskResult:
    """Push one task through every stage, left to right."""
    if len(instances) != len(job.stages):
        raise ValueError('need one processor instance per stage')
    payload = task.payload
    for name, inst in zip(job.stages, instances):
        try:
            inst.set_data(payload)
            inst.run()
            payload = inst.get_data()
        except Exception as e:
            raise ProcessorPanic('stage %r failed on task %d: %s' % (name, task.id, e)) from e
        if not isinstance(payload, (bytes, bytearray)):
            raise ProcessorPanic('stage %r returned %s, not bytes' % (name, type(payload).__name__))
    return TaskResult(task.id, bytes(payload), worker)


def thread_executor():
    """Run compute calls on one dedicated thread (a single compute lane)."""
    pool = concurrent.futures.ThreadPoolExecutor(max_workers=1, thread_name_prefix='compute')

    async def execute(fn):
        return await asyncio.get_running_loop().run_in_executor(pool, fn)
    execute.shutdown = pool.shutdown
    return execute


class Worker:
    """One service instance.

    ``executor`` is an ``async (fn) -> result`` hook that runs a compute call;
    the default sends it to a dedicated thread.
    """

    def __init__(self, cfg: WorkerConfig, network: Network, executor=None):
        self.cfg = cfg
        self.network = network
        self.registry = RegistryClient(network, cfg.registry_addr)
        self.executor = executor or thread_executor()
        self.endpoint = None
        self.service_id = None
        self.state = 'stopped'
        self.tasks_served = 0
        self.registrations: List[ServiceId] = []
        self._server = None
        self._renewer = None
        self._session_over = asyncio.Event()

    def supports(self, stages):
        return all(s in self.cfg.processors for s in stages)

    async def start(self):
        self._server = await self.network.serve(self.cfg.bind_addr, self._handle)
        host = self.cfg.advertise_host or self._server.endpoint.host
        self.endpoint = Endpoint(host, self._server.endpoint.port)
        log.info('worker listening on %s', self.endpoint)

    async def run(self):
        """Serve until cancelled; unregister on the way out."""
        if self._server is None:
            await self.start()
        try:
            while True:
                await self._register()
                self._renewer = asyncio.get_running_loop().create_task(self._renew_loop())
                await self._session_over.wait()
                self._session_over.clear()
        finally:
            await self._shutdown()

    async def _shutdown(self):
        self._stop_renewing()
        if self._server:
            self._server.close()
        if self.state == 'registered' and self.service_id is not None:
            try:
                await asyncio.wait_for(self.registry.unregister(self.service_id), 2.0)
            except (RegistryUnreachable, asyncio.TimeoutError, asyncio.CancelledError):
                pass
        self.state = 'stopped'

    async def _register(self):
        self.state = 'registering'
        delay = self.cfg.backoff_initial_ms
        while True:
            try:
                ack = await self.registry.register(self.endpoint, self.cfg.processors.keys(),
                                                   self.cfg.lease_ms, self.cfg.attributes)
                break
            except RegistryUnreachable as e:
                log.warning('registry unreachable (%s); retrying in %d ms', e, delay)
                await asyncio.sleep(delay / 1000.0)
                delay = min(delay * 2, self.cfg.backoff_cap_ms)
        self.service_id = ack.service_id
        self.registrations.append(ack.service_id)
        self.state = 'registered'
        log.info('registered as %s', ack.service_id)

    async def _renew_loop(self):
        while True:
            await asyncio.sleep(self.cfg.renew_ms / 1000.0)
            try:
                await self.registry.renew(self.service_id, self.cfg.lease_ms)
            except UnknownService:
                log.warning('lease lost; registering again')
                ack = await self.registry.register(self.endpoint, self.cfg.processors.keys(),
                                                   self.cfg.lease_ms, self.cfg.attributes)
                self.service_id = ack.service_id
                self.registrations.append(ack.service_id)
            except RegistryUnreachable as e:
                log.warning('renewal failed: %s', e)

    def _stop_renewing(self):
        if self._renewer is not None:
            self._renewer.cancel()
            self._renewer = None

    async def _handle(self, conn):
        msg = await conn.recv()
        while isinstance(msg, Ping):
            await conn.send(Pong())
            msg = await conn.recv()
        if not isinstance(msg, Recruit):
            log.warning('expected Recruit, got %s', type(msg).__name__)
            return
        if self.state != 'registered' or not self.supports(msg.job.stages):
            await conn.send(RecruitAck(False))
            return
        try:
            instances = [self.cfg.processors[name](msg.config.get(name, b''))
                         for name in msg.job.stages]
        except Exception as e:
            log.warning('cannot configure job %s: %s', msg.job.stages, e)
            await conn.send(RecruitAck(False))
            return

        # Leave the registry before acknowledging, so no query can see a
        # recruited worker.
        self.state = 'serving'
        sid = self.service_id
        self._stop_renewing()
        try:
            await self.registry.unregister(sid)
        except RegistryUnreachable as e:
            log.warning('unregister failed (%s); lease will lapse', e)
        try:
            await conn.send(RecruitAck(True))
            await self._serve(conn, msg.job, instances, sid)
        finally:
            self.state = 'released'
            self._session_over.set()

    async def _serve(self, conn, job, instances, sid):
        running = None
        try:
            while True:
                msg = await conn.recv()
                if isinstance(msg, Ping):
                    await conn.send(Pong())
                elif isinstance(msg, AssignTask):
                    if running is not None and not running.done():
                        log.warning('client sent a second task while one is in flight')
                        return
                    running = asyncio.get_running_loop().create_task(
                        self._compute(conn, job, msg.task, instances, sid))
                elif isinstance(msg, Release):
                    return
                else:
                    log.warning('unexpected %s while serving', type(msg).__name__)
                    return
        finally:
            if running is not None:
                running.cancel()

    async def _compute(self, conn, job, task, instances, sid):
        fn = functools.partial(serve_task, job, task, instances, sid)
        try:
            result = await self.executor(fn)
        except ProcessorPanic as e:
            # no error variant on the wire: dropping the connection sends the
            # client down its normal rescheduling path
            log.error('%s; closing client connection', e)
            conn.close()
            return
        self.tasks_served += 1
        try:
            await conn.send(TaskDone(result))
        except ConnectionClosed:
            pass
