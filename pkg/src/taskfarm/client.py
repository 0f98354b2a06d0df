"""Client runtime: recruit services, farm tasks out to them, collect results.

Each recruited service gets its own control loop.  Control loops pull task
ids from one shared ``TaskRepository``, so a fast service simply comes back
for work more often than a slow one.  When a service dies (connection lost,
or no Pong within the ping timeout) its in-flight task goes back to the front
of the pending queue and is recomputed from scratch elsewhere.
"""

import asyncio
import logging
import random
import threading
from collections import deque
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

from .errors import (ConnectionClosed, NoServicesAvailable, ProtocolError,
                     TaskFailed)
from .protocol import (AssignTask, Endpoint, JobSpec, Notify, Ping, Pong,
                       Recruit, RecruitAck, Release, ServiceDescriptor, ServiceId,
                       Task, TaskDone, TaskId, TaskResult)
from .registry import RegistryClient
from .skeletons import NormalForm, normalize
from .transport import Network, TcpNetwork

log = logging.getLogger(__name__)


class TaskRepository:
    """Synchronized store of pending, in-flight and completed tasks.

    Every task id is in exactly one of the three at all times.  Results are
    append-only: the first result for an id wins and later ones are dropped.
    """

    def __init__(self, n: int, max_retries: int = 5):
        if n < 1:
            raise ValueError('need at least one task')
        self.n = n
        self.max_retries = max_retries
        self._lock = threading.Lock()
        self.pending = deque(range(n))
        self.in_flight: Dict[TaskId, object] = {}
        self.results: Dict[TaskId, TaskResult] = {}
        self.retry_count = [0] * n
        self.failed: Optional[TaskId] = None

    def acquire(self, service) -> Optional[TaskId]:
        """Move the next pending id to in-flight under ``service``."""
        with self._lock:
            if not self.pending or self.failed is not None:
                return None
            tid = self.pending.popleft()
            self.in_flight[tid] = service
            return tid

    def complete(self, result: TaskResult) -> bool:
        """Record a result; False if the id already had one (duplicate)."""
        with self._lock:
            tid = result.id
            if not 0 <= tid < self.n:
                raise ValueError('result for unknown task %d' % tid)
            if tid in self.results:
                return False
            if self.in_flight.pop(tid, None) is None:
                # answered by a presumed-dead service after rescheduling
                self.pending.remove(tid)
            self.results[tid] = result
            return True

    def reschedule(self, tid: TaskId, service) -> bool:
        """Put ``tid`` back at the front of pending if ``service`` still holds it."""
        with self._lock:
            if self.in_flight.get(tid) != service:
                return False
            del self.in_flight[tid]
            self.retry_count[tid] += 1
            if self.retry_count[tid] > self.max_retries and self.failed is None:
                self.failed = tid
            self.pending.appendleft(tid)
            return True

    def done(self) -> bool:
        with self._lock:
            return len(self.results) == self.n

    def held_by(self, service) -> List[TaskId]:
        with self._lock:
            return [t for t, s in self.in_flight.items() if s == service]

    def check_partition(self):
        with self._lock:
            p, f, r = set(self.pending), set(self.in_flight), set(self.results)
            assert len(p) == len(self.pending), 'duplicate id in pending'
            assert not (p & f or p & r or f & r), 'task id in two places'
            assert p | f | r == set(range(self.n)), 'task id lost'

    def outputs(self) -> List[bytes]:
        with self._lock:
            return [self.results[i].payload for i in range(self.n)]


@dataclass
class ComputeConfig:
    registry_addr: Endpoint
    ping_interval_ms: int = 2_000
    ping_timeout_ms: int = 2_000
    task_timeout_ms: int = 0
    max_retries_per_task: int = 5
    min_services: int = 1
    startup_window_ms: int = 10_000

    def __post_init__(self):
        if self.ping_interval_ms <= 0 or self.ping_timeout_ms <= 0:
            raise ValueError('ping interval and timeout must be positive')
        if self.task_timeout_ms < 0 or self.max_retries_per_task < 0:
            raise ValueError('task_timeout_ms and max_retries_per_task must be >= 0')
        if self.min_services < 1:
            raise ValueError('min_services must be at least 1')


class _ServiceDead(Exception):
    pass


class FarmClient:
    """Runs one job over whatever services the registry can offer."""

    def __init__(self, job: JobSpec, inputs: Sequence[bytes], cfg: ComputeConfig,
                 network: Network = None, tracer=None, rng: random.Random = None):
        self.job = job
        self.inputs = [bytes(b) for b in inputs]
        if not self.inputs:
            raise ValueError('input must be non-empty')
        self.cfg = cfg
        self.network = network or TcpNetwork()
        self.tracer = tracer
        self.rng = rng or random.Random()
        self.nf: NormalForm = normalize(job.skeleton)
        self.repo = TaskRepository(len(self.inputs), cfg.max_retries_per_task)
        self.accepted = 0
        self.accepted_async = 0
        self.active = 0
        self.completed_by: Dict[ServiceId, int] = {}
        self._seen = set()
        self._tasks = []
        self._changed = None
        self._finished = False

    def _trace(self, kind, task=None, service=None):
        if self.tracer is not None:
            self.tracer.emit(kind, task=task, service=service)

    def _signal(self):
        self._changed.set()
        self._changed = asyncio.Event()

    async def _wait_change(self, timeout=None):
        ev = self._changed
        try:
            await asyncio.wait_for(ev.wait(), timeout)
        except asyncio.TimeoutError:
            pass

    def compute(self) -> List[bytes]:
        return asyncio.run(self.compute_async())

    async def compute_async(self) -> List[bytes]:
        loop = asyncio.get_running_loop()
        self._changed = asyncio.Event()
        registry = RegistryClient(self.network, self.cfg.registry_addr)
        stage0 = self.nf.stages[0]

        # subscribe first so no arrival slips between the query and the
        # subscription; duplicates are removed by service id
        observer, early = await registry.subscribe(stage0)
        listener = loop.create_task(self._listen(observer))
        try:
            for desc in await registry.query(stage0):
                self._consider(desc)
            for note in early:
                self._trace('Notified', service=note.service.service_id)
                self._consider(note.service, notified=True)
            await self._supervise()
            return self.repo.outputs()
        finally:
            self._finished = True
            self._signal()
            listener.cancel()
            observer.close()
            await self._drain_tasks()

    async def _supervise(self):
        loop = asyncio.get_running_loop()
        window = self.cfg.startup_window_ms / 1000.0
        started = loop.time()
        idle_since = started
        while not self.repo.done():
            if self.repo.failed is not None:
                tid = self.repo.failed
                raise TaskFailed(tid, self.repo.retry_count[tid])
            now = loop.time()
            if self.active:
                idle_since = None
            elif idle_since is None:
                idle_since = now
            # short of min_services, but an asynchronous arrival is enough to go on
            starved = self.accepted < self.cfg.min_services and not self.accepted_async
            if now - started >= window and starved:
                raise NoServicesAvailable('%d of %d required services recruited within %d ms'
                                          % (self.accepted, self.cfg.min_services,
                                             self.cfg.startup_window_ms))
            if idle_since is not None and now - idle_since >= window:
                raise NoServicesAvailable('no live service for %d ms' % self.cfg.startup_window_ms)
            deadlines = []
            if idle_since is not None:
                deadlines.append(idle_since + window)
            if starved:
                deadlines.append(started + window)
            await self._wait_change(max(0.0, min(deadlines) - now) if deadlines else None)

    async def _drain_tasks(self):
        pending = [t for t in self._tasks if not t.done()]
        if not pending:
            return
        grace = self.cfg.ping_timeout_ms / 1000.0
        done, still = await asyncio.wait(pending, timeout=grace)
        for t in still:
            t.cancel()
        if still:
            await asyncio.gather(*still, return_exceptions=True)

    async def _listen(self, observer):
        try:
            while True:
                msg = await observer.recv()
                if isinstance(msg, Notify):
                    self._trace('Notified', service=msg.service.service_id)
                    self._consider(msg.service, notified=True)
        except ConnectionClosed:
            log.warning('observer connection to registry lost')

    def _consider(self, desc: ServiceDescriptor, notified=False):
        """Recruit ``desc`` unless already seen or unable to run the job."""
        if self._finished or desc.service_id in self._seen or not desc.covers(self.nf.stages):
            return
        self._seen.add(desc.service_id)
        task = asyncio.get_running_loop().create_task(self._recruit(desc, notified))
        self._tasks.append(task)

    async def _recruit(self, desc, notified):
        try:
            conn = await self.network.connect(desc.endpoint)
        except (OSError, asyncio.TimeoutError) as e:
            log.info('cannot reach %s at %s: %s', desc.service_id, desc.endpoint, e)
            return
        try:
            await conn.send(Recruit(self.nf, self.job.stage_config(), self.rng.getrandbits(64)))
            ack = await asyncio.wait_for(conn.recv(), self.cfg.ping_timeout_ms / 1000.0 * 5)
        except (ConnectionClosed, asyncio.TimeoutError):
            conn.close()
            return
        if not isinstance(ack, RecruitAck) or not ack.accept:
            conn.close()
            return
        self.accepted += 1
        self.accepted_async += notified
        self.active += 1
        self._trace('Recruited', service=desc.service_id)
        self._signal()
        try:
            await self._control(desc.service_id, conn)
        finally:
            self.active -= 1
            self._signal()

    async def _control(self, sid, conn):
        repo = self.repo
        try:
            while True:
                tid = repo.acquire(sid)
                if tid is None:
                    if repo.done() or self._finished or repo.failed is not None:
                        break
                    # idle, but stay recruited: a failed peer's task may come back
                    await self._wait_change()
                    continue
                self._trace('Assigned', task=tid, service=sid)
                try:
                    await conn.send(AssignTask(Task(tid, self.inputs[tid])))
                    result = await self._await_result(conn, tid)
                except (ConnectionClosed, _ServiceDead, ProtocolError) as e:
                    log.info('service %s failed: %s', sid, e)
                    self._trace('Failed', service=sid)
                    if repo.reschedule(tid, sid):
                        self._trace('Rescheduled', task=tid)
                    self._signal()
                    return
                if self.handle_result(result):
                    self._trace('Completed', task=tid, service=sid)
                    self.completed_by[sid] = self.completed_by.get(sid, 0) + 1
                self._signal()
            try:
                await conn.send(Release())
                self._trace('Released', service=sid)
            except ConnectionClosed:
                pass
        finally:
            conn.close()

    def handle_result(self, result: TaskResult) -> bool:
        """Store a result unless its task already has one."""
        accepted = self.repo.complete(result)
        if not accepted:
            log.debug('discarding duplicate result for task %d', result.id)
        return accepted

    async def _await_result(self, conn, tid) -> TaskResult:
        loop = asyncio.get_running_loop()
        interval = self.cfg.ping_interval_ms / 1000.0
        ping_timeout = self.cfg.ping_timeout_ms / 1000.0
        task_timeout = self.cfg.task_timeout_ms / 1000.0
        started = loop.time()
        ping_sent = None
        while True:
            now = loop.time()
            deadline = (now + interval) if ping_sent is None else (ping_sent + ping_timeout)
            if task_timeout:
                deadline = min(deadline, started + task_timeout)
            try:
                msg = await asyncio.wait_for(conn.recv(), max(0.0, deadline - now))
            except asyncio.TimeoutError:
                now = loop.time()
                if task_timeout and now >= started + task_timeout:
                    raise _ServiceDead('task %d timed out' % tid)
                if ping_sent is not None:
                    raise _ServiceDead('no pong within %d ms' % self.cfg.ping_timeout_ms)
                await conn.send(Ping())
                ping_sent = now
                continue
            if isinstance(msg, Pong):
                ping_sent = None
            elif isinstance(msg, TaskDone):
                if msg.result.id == tid:
                    return msg.result
                self.handle_result(msg.result)
            else:
                raise ProtocolError('unexpected %s from service' % type(msg).__name__)


def compute(job: JobSpec, inputs: Sequence[bytes], cfg: ComputeConfig,
            network: Network = None) -> List[bytes]:
    """Run ``job`` over ``inputs`` on recruited services; outputs in input order."""
    return FarmClient(job, inputs, cfg, network).compute()
