"""Scripted end-to-end runs of registry + workers + client on virtual time."""

import asyncio
import base64
import logging
import random
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

from ..client import ComputeConfig, FarmClient
from ..errors import TaskFarmError
from ..processors import BUILTIN, Processor
from ..protocol import Endpoint, JobSpec
from ..registry import RegistryServer
from ..skeletons import leaves, parse
from ..trace import Event, Tracer, completed_by_service, of_kind
from ..worker import Worker, WorkerConfig
from .sim import SimNetwork, run_virtual

log = logging.getLogger(__name__)

REGISTRY = Endpoint('registry', 7000)


@dataclass(frozen=True)
class CrashAfterKTasks:
    """Fail-stop when the (k+1)-th task arrives, so one task dies in flight."""
    k: int

    def __post_init__(self):
        if self.k < 0:
            raise ValueError('k must be >= 0')


@dataclass(frozen=True)
class CrashAtTime:
    t_ms: float


@dataclass(frozen=True)
class DropAfterAssign:
    """Go silent on the first task: no result, no Pong, no connection reset."""


Fault = Union[CrashAfterKTasks, CrashAtTime, DropAfterAssign]


@dataclass
class WorkerSpec:
    processors: Tuple[str, ...] = ('identity',)
    service_ms: float = 10.0
    fault: Optional[Fault] = None


@dataclass
class Scenario:
    job: JobSpec
    input: List[bytes]
    workers: List[WorkerSpec]
    arrivals: List[Tuple[int, float]] = field(default_factory=list)
    seed: int = 0
    latency_ms: float = 1.0
    client_start_ms: float = 50.0
    cfg: ComputeConfig = None

    def __post_init__(self):
        if self.cfg is None:
            self.cfg = ComputeConfig(REGISTRY)
        for idx, t in self.arrivals:
            if not 0 <= idx < len(self.workers) or t < 0:
                raise ValueError('bad arrival (%r, %r)' % (idx, t))
        if self.latency_ms < 0 or self.client_start_ms < 0:
            raise ValueError('times must be non-negative')


class _Delay(Processor):
    """``delay`` without the wall-clock sleep: service time is modelled instead."""
    name = 'delay'

    def compute(self, data):
        return data


def sim_processors():
    table = dict(BUILTIN)
    table['delay'] = _Delay
    return table


@dataclass
class ScenarioResult:
    outputs: List[bytes]
    trace: List[Event]
    completed_by_worker: List[int]
    service_ids: List[List[str]]
    end_ms: float

    def dumps_trace(self):
        return ''.join(e.format() + '\n' for e in self.trace)


class _SimLane:
    """Compute lane of a simulated worker: models service time and faults."""

    def __init__(self, spec, ctl):
        self.spec = spec
        self.ctl = ctl
        self.count = 0

    async def __call__(self, fn):
        fault = self.spec.fault
        if isinstance(fault, CrashAfterKTasks) and self.count >= fault.k:
            self.ctl.crash()
            await asyncio.Event().wait()
        if isinstance(fault, DropAfterAssign):
            self.ctl.hang()
            await asyncio.Event().wait()
        await asyncio.sleep(self.spec.service_ms / 1000.0)
        result = fn()
        self.count += 1
        return result


class _SimWorker:
    def __init__(self, index, spec, net, table):
        self.index = index
        self.spec = spec
        self.host = 'w%d' % index
        self.net = net
        cfg = WorkerConfig(REGISTRY, Endpoint(self.host, 7100),
                           {p: table[p] for p in spec.processors})
        self.worker = Worker(cfg, net.node(self.host), executor=_SimLane(spec, self))
        self.task = None
        self.dead = False

    def start(self):
        if self.dead:
            return
        self.task = asyncio.get_running_loop().create_task(self.worker.run())

    def _stop(self):
        if self.task is not None:
            self.task.cancel()

    def crash(self):
        self.dead = True
        self.net.crash(self.host)
        self._stop()

    def hang(self):
        self.dead = True
        self.net.hang(self.host)
        self._stop()


def run_scenario(s: Scenario, processors=None) -> ScenarioResult:
    """Run ``s`` to completion on virtual time.

    Client errors propagate with the partial trace attached as ``exc.trace``.
    """
    return run_virtual(_run(s, processors or sim_processors()))


async def _run(s, table):
    loop = asyncio.get_running_loop()
    rng = random.Random(s.seed)
    tracer = Tracer(origin=loop.time())
    net = SimNetwork(latency_ms=s.latency_ms)

    registry = RegistryServer(net.node(REGISTRY.host), REGISTRY,
                              id_source=lambda: rng.getrandbits(128), tracer=tracer)
    await registry.start()

    workers = [_SimWorker(i, spec, net, table) for i, spec in enumerate(s.workers)]
    late = dict(s.arrivals)
    for w in workers:
        delay = late.get(w.index, 0.0) / 1000.0
        loop.call_later(delay, w.start)
        if isinstance(w.spec.fault, CrashAtTime):
            loop.call_later(w.spec.fault.t_ms / 1000.0, w.crash)

    await asyncio.sleep(s.client_start_ms / 1000.0)
    cfg = s.cfg
    if cfg.registry_addr != REGISTRY:
        cfg = ComputeConfig(REGISTRY, cfg.ping_interval_ms, cfg.ping_timeout_ms,
                            cfg.task_timeout_ms, cfg.max_retries_per_task,
                            cfg.min_services, cfg.startup_window_ms)
    client = FarmClient(s.job, s.input, cfg, net.node('client'), tracer=tracer,
                        rng=random.Random(rng.getrandbits(64)))
    try:
        outputs = await client.compute_async()
    except TaskFarmError as e:
        e.trace = list(tracer.events)
        raise
    finally:
        end_ms = (loop.time() - tracer._origin) * 1000.0
        for w in workers:
            w._stop()
        registry.close()

    by_sid = completed_by_service(tracer.events)
    sids = [[str(sid) for sid in w.worker.registrations] for w in workers]
    counts = [sum(by_sid.get(sid, 0) for sid in ids) for ids in sids]
    return ScenarioResult(outputs, list(tracer.events), counts, sids, end_ms)


@dataclass
class SpeedupReport:
    workers: int
    tasks: int
    service_ms: float
    makespan_ms: float
    efficiency: float
    result: ScenarioResult


def makespan_ms(trace: Sequence[Event]) -> float:
    """From the first assignment to the last completion."""
    assigned = of_kind(trace, 'Assigned')
    completed = of_kind(trace, 'Completed')
    if not assigned or not completed:
        return 0.0
    return completed[-1].time_ms - assigned[0].time_ms


def speedup_report(s: Scenario) -> SpeedupReport:
    """Parallel efficiency n*service / (w*makespan) of a fault-free farm.

    With mixed service times the fastest one is used as ``service``, so a
    slow worker shows up as lost efficiency.
    """
    if not s.workers or any(w.fault for w in s.workers):
        raise ValueError('speedup_report needs fault-free workers')
    n, w = len(s.input), len(s.workers)
    if n < 20 * w:
        raise ValueError('speedup_report needs at least 20 tasks per worker')
    service = min(spec.service_ms for spec in s.workers)
    result = run_scenario(s)
    span = makespan_ms(result.trace)
    eff = (n * service) / (w * span) if span > 0 else 0.0
    return SpeedupReport(w, n, service, span, eff, result)


# -- scenario text format ---------------------------------------------------

def _parse_worker(value):
    fields = value.split()
    if len(fields) < 2:
        raise ValueError('worker line needs "<processors> <service_ms> [options]"')
    spec = WorkerSpec(tuple(p for p in fields[0].split(',') if p), float(fields[1]))
    arrive = None
    for opt in fields[2:]:
        key, _, val = opt.partition('=')
        if key == 'crash_after':
            spec.fault = CrashAfterKTasks(int(val))
        elif key == 'crash_at':
            spec.fault = CrashAtTime(float(val))
        elif key == 'drop_after_assign':
            spec.fault = DropAfterAssign()
        elif key == 'arrive':
            arrive = float(val)
        else:
            raise ValueError('unknown worker option %r' % key)
    return spec, arrive


_CFG_KEYS = ('ping_interval_ms', 'ping_timeout_ms', 'task_timeout_ms',
             'max_retries_per_task', 'min_services', 'startup_window_ms')


def parse_scenario(text: str) -> Scenario:
    """Read the line-oriented scenario format (see docs/scenario-format.md)."""
    skeleton, config, inputs, workers, arrivals = None, {}, [], [], []
    opts, cfg = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition(':')
        key, value = key.strip(), value.strip()
        if not sep:
            raise ValueError('line %d: expected "key: value"' % lineno)
        try:
            if key == 'skeleton':
                skeleton = parse(value)
            elif key == 'config':
                name, _, blob = value.partition(' ')
                config[name] = blob.strip().encode('utf-8')
            elif key == 'input':
                inputs.append(value.encode('utf-8'))
            elif key == 'input64':
                inputs.append(base64.b64decode(value, validate=True))
            elif key == 'tasks':
                inputs.extend(b'task-%d' % i for i in range(int(value)))
            elif key == 'worker':
                spec, arrive = _parse_worker(value)
                if arrive is not None:
                    arrivals.append((len(workers), arrive))
                workers.append(spec)
            elif key in ('seed',):
                opts[key] = int(value)
            elif key in ('latency_ms', 'client_start_ms'):
                opts[key] = float(value)
            elif key in _CFG_KEYS:
                cfg[key] = int(value)
            else:
                raise ValueError('unknown key %r' % key)
        except ValueError as e:
            raise ValueError('line %d: %s' % (lineno, e)) from None
    if skeleton is None:
        raise ValueError('scenario has no skeleton')
    if not inputs:
        raise ValueError('scenario has no input')
    if not workers:
        raise ValueError('scenario has no workers')
    missing = [n for n in set(leaves(skeleton)) if not any(n in w.processors for w in workers)]
    if missing:
        log.warning('no worker offers %s', ', '.join(sorted(missing)))
    return Scenario(JobSpec(skeleton, config), inputs, workers, arrivals,
                    cfg=ComputeConfig(REGISTRY, **cfg), **opts)
