import hashlib
import os
import random
import re
import signal
import subprocess
import sys
import time

import pytest

from taskfarm import processors as builtin
from taskfarm.harness import sim_processors
from taskfarm.processors import Processor
from taskfarm.protocol import (AssignTask, Endpoint, NormalForm, Notify, Ping, Pong,
                               Query, QueryReply, Recruit, RecruitAck, Register,
                               RegisterAck, Release, Renew, RenewAck, ServiceDescriptor,
                               ServiceId, Subscribe, Task, TaskDone, TaskResult,
                               Unregister)
from taskfarm.skeletons import Farm, Pipe, Seq


# -- deterministic test processors ------------------------------------------

def _rev(b):
    return b[::-1]


def _inc(b):
    return bytes((x + 1) % 256 for x in b)


def _sha(b):
    return hashlib.sha256(b).digest()[:6]


def _dup(b):
    return b + b[:3]


PURE = {
    'identity': lambda b: b,
    'rev': _rev,
    'inc': _inc,
    'sha': _sha,
    'dup': _dup,
}


def _as_processor(name, fn):
    return type('P_' + name, (Processor,), {'name': name, 'compute': lambda self, d: fn(d)})


class Poison(Processor):
    name = 'poison'

    def compute(self, data):
        if data == b'bad':
            raise RuntimeError('poisoned task')
        return data


def sim_table():
    """Simulator processor table: built-ins plus the pure test functions."""
    table = sim_processors()
    for name, fn in PURE.items():
        if name not in table:
            table[name] = _as_processor(name, fn)
    table['poison'] = Poison
    return table


# -- random generators --------------------------------------------------------

def random_skeleton(rng, max_depth=5, names=tuple(PURE)):
    """Random farm/pipe/seq tree of depth <= max_depth."""
    if max_depth <= 1 or rng.random() < 0.3:
        return Seq(rng.choice(names))
    if rng.random() < 0.4:
        return Farm(random_skeleton(rng, max_depth - 1, names))
    return Pipe([random_skeleton(rng, max_depth - 1, names)
                 for _ in range(rng.randint(1, 3))])


def random_payload(rng, max_len=24):
    return bytes(rng.getrandbits(8) for _ in range(rng.randint(0, max_len)))


def _name(rng):
    return ''.join(rng.choice('abcdefghijklmnopqrstuvwxyz-é') for _ in range(rng.randint(1, 10)))


def _sid(rng):
    return ServiceId(rng.choice([0, (1 << 128) - 1, rng.getrandbits(128)]))


def _endpoint(rng):
    return Endpoint(rng.choice(['127.0.0.1', 'worker-%d' % rng.randint(0, 99), '::1']),
                    rng.randint(0, 65535))


def _attrs(rng):
    return {_name(rng): _name(rng) for _ in range(rng.randint(0, 3))}


def _descriptor(rng):
    return ServiceDescriptor(_sid(rng), _endpoint(rng),
                             {_name(rng) for _ in range(rng.randint(1, 4))},
                             rng.getrandbits(64), _attrs(rng))


def random_message(rng):
    kind = rng.randrange(16)
    u64 = lambda: rng.choice([0, (1 << 64) - 1, rng.getrandbits(64)])
    if kind == 0:
        return Register(_endpoint(rng), {_name(rng) for _ in range(rng.randint(0, 4))},
                        u64(), _attrs(rng))
    if kind == 1:
        return RegisterAck(_sid(rng), u64())
    if kind == 2:
        return Unregister(_sid(rng))
    if kind == 3:
        return Query(rng.choice(['', _name(rng)]))
    if kind == 4:
        return QueryReply([_descriptor(rng) for _ in range(rng.randint(0, 4))])
    if kind == 5:
        return Subscribe(rng.choice(['', _name(rng)]))
    if kind == 6:
        return Notify(_descriptor(rng))
    if kind == 7:
        return Renew(_sid(rng), u64())
    if kind == 8:
        return RenewAck(u64())
    if kind == 9:
        return Recruit(NormalForm([_name(rng) for _ in range(rng.randint(1, 5))]),
                       {_name(rng): random_payload(rng) for _ in range(rng.randint(0, 3))},
                       u64())
    if kind == 10:
        return RecruitAck(rng.random() < 0.5)
    if kind == 11:
        return AssignTask(Task(u64(), random_payload(rng, 200)))
    if kind == 12:
        return TaskDone(TaskResult(u64(), random_payload(rng, 200), _sid(rng)))
    return [Release(), Ping(), Pong()][kind - 13]


# -- real processes -------------------------------------------------------------

_LISTENING = re.compile(r'listening on (\S+)')


class Proc:
    def __init__(self, args, env=None):
        self.p = subprocess.Popen([sys.executable, '-m', 'taskfarm'] + args,
                                  stdout=subprocess.PIPE, stderr=subprocess.PIPE,
                                  text=True, env=env)
        line = self.p.stdout.readline()
        m = _LISTENING.search(line)
        if not m:
            self.stop()
            raise RuntimeError('process did not start: %r %r' % (line, self.p.stderr.read()))
        self.endpoint = m.group(1)

    def stop(self):
        if self.p.poll() is None:
            self.p.send_signal(signal.SIGINT)
            try:
                self.p.wait(5)
            except subprocess.TimeoutExpired:
                self.p.kill()
                self.p.wait()
        return self.p.returncode


class Cluster:
    """A registry plus workers, each a real OS process on loopback."""

    def __init__(self):
        self.registry = Proc(['registry', '--bind', '127.0.0.1:0', '--sweep-interval', '1000'])
        self.workers = []

    def add_worker(self, processors='identity,delay,mandelbrot-row,hash-search', *extra):
        w = Proc(['worker', '--registry', self.registry.endpoint, '--processors', processors,
                  '--lease-ms', '5000', '--renew-ms', '1000'] + list(extra))
        self.workers.append(w)
        return w

    def wait_registered(self, n, timeout=5.0):
        import asyncio
        from taskfarm.registry import RegistryClient
        from taskfarm.transport import TcpNetwork

        async def count():
            return len(await RegistryClient(TcpNetwork(), Endpoint.parse(self.registry.endpoint)).query())
        deadline = time.time() + timeout
        while time.time() < deadline:
            if asyncio.run(count()) >= n:
                return
            time.sleep(0.05)
        raise RuntimeError('only some workers registered')

    def close(self):
        for w in self.workers:
            w.stop()
        self.registry.stop()


@pytest.fixture
def cluster():
    c = Cluster()
    try:
        yield c
    finally:
        c.close()


@pytest.fixture
def rng():
    return random.Random(1234)
