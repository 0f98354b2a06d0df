"""Virtual time and an in-memory network for deterministic runs.

``VirtualTimeLoop`` is an ordinary selector event loop whose clock only
moves when nothing is runnable: it then jumps straight to the next timer.
Everything awaiting ``asyncio.sleep``/``wait_for`` therefore runs exactly as
in production, only instantly and in a reproducible order.

``SimNetwork`` carries encoded frames between ``SimConnection`` ends with a
constant per-link latency, preserving order on every link.  Hosts can be
crashed (connections reset, listeners gone) or hung (all traffic silently
dropped) to inject fail-stop faults.
"""

import asyncio
import selectors
from collections import deque

from ..errors import ConnectionClosed, SimulationDeadlock
from ..protocol import Endpoint, decode, encode
from ..transport import Connection, Network, Server, run_handler


class _VirtualSelector(selectors.BaseSelector):
    def __init__(self, loop):
        self._loop = loop
        self._real = selectors.DefaultSelector()

    def register(self, fileobj, events, data=None):
        return self._real.register(fileobj, events, data)

    def unregister(self, fileobj):
        return self._real.unregister(fileobj)

    def modify(self, fileobj, events, data=None):
        return self._real.modify(fileobj, events, data)

    def get_map(self):
        return self._real.get_map()

    def close(self):
        self._real.close()

    def select(self, timeout=None):
        ready = self._real.select(0)
        if ready:
            return ready
        if timeout is None:
            raise SimulationDeadlock('no runnable callbacks and no timers')
        if timeout > 0:
            self._loop._advance(timeout)
        return []


class VirtualTimeLoop(asyncio.SelectorEventLoop):
    """Event loop on a virtual clock (seconds, starting at 0)."""

    def __init__(self):
        self._now = 0.0
        super().__init__(_VirtualSelector(self))
        self._clock_resolution = 1e-9

    def time(self):
        return self._now

    def _advance(self, dt):
        self._now += dt


def run_virtual(coro):
    """``asyncio.run`` on a fresh VirtualTimeLoop."""
    loop = VirtualTimeLoop()
    try:
        asyncio.set_event_loop(loop)
        return loop.run_until_complete(coro)
    finally:
        try:
            _cancel_all(loop)
            loop.run_until_complete(loop.shutdown_asyncgens())
        finally:
            asyncio.set_event_loop(None)
            loop.close()


def _cancel_all(loop):
    tasks = asyncio.all_tasks(loop)
    if not tasks:
        return
    for t in tasks:
        t.cancel()
    loop.run_until_complete(asyncio.gather(*tasks, return_exceptions=True))


_EOF = object()


class SimConnection(Connection):
    def __init__(self, net, host, remote_host):
        super().__init__()
        self.net = net
        self.host = host
        self.remote_host = remote_host
        self.peer = None
        self._outbound = deque()

    def _transmit(self, item):
        # deliveries pop from the head of the link queue, so the link stays
        # FIFO even when several timers share the same deadline
        self._outbound.append(item)
        loop = asyncio.get_running_loop()
        delay = self.net.latency
        if delay > 0:
            loop.call_later(delay, self._arrive)
        else:
            loop.call_soon(self._arrive)

    def _arrive(self):
        item = self._outbound.popleft()
        peer = self.peer
        if item is _EOF:
            peer._peer_gone()
        elif not self.net.dropping(self.host, self.remote_host):
            msg, n = decode(item)
            assert n == len(item)
            peer._deliver(msg)

    def _peer_gone(self):
        if not self._closed:
            self._closed = True
            self._eof()

    async def send(self, msg):
        if self._closed:
            raise ConnectionClosed('send on closed connection')
        frame = encode(msg)
        if not self.net.dropping(self.host, self.remote_host):
            self._transmit(frame)
        await asyncio.sleep(0)

    def close(self):
        if self._closed:
            return
        self._closed = True
        self._eof()
        if self.host not in self.net.hung:
            self._transmit(_EOF)
        self.net._forget(self)


class SimNetwork:
    """Shared medium; hand each component its own ``node(host)`` view."""

    def __init__(self, latency_ms=1.0, epoch_ms=0, connect_timeout_ms=5_000):
        self.latency = latency_ms / 1000.0
        self.epoch_ms = epoch_ms
        self.connect_timeout = connect_timeout_ms / 1000.0
        self.listeners = {}
        self.crashed = set()
        self.hung = set()
        self._conns = {}
        self._next_port = {}

    def node(self, host):
        return SimNode(self, host)

    def dropping(self, a, b):
        return a in self.hung or b in self.hung

    def _track(self, conn):
        self._conns.setdefault(conn.host, []).append(conn)

    def _forget(self, conn):
        conns = self._conns.get(conn.host)
        if conns and conn in conns:
            conns.remove(conn)

    def crash(self, host):
        """Fail-stop: reset every connection of ``host`` and drop its listeners."""
        self.crashed.add(host)
        for key in [k for k in self.listeners if k[0] == host]:
            del self.listeners[key]
        for conn in list(self._conns.get(host, ())):
            conn.close()

    def hang(self, host):
        """Stop all traffic to and from ``host`` without closing anything."""
        self.hung.add(host)
        for key in [k for k in self.listeners if k[0] == host]:
            del self.listeners[key]

    async def connect(self, src, endpoint):
        if src in self.crashed:
            raise ConnectionRefusedError('local host %s is down' % src)
        await asyncio.sleep(self.latency)
        if src in self.hung or endpoint.host in self.hung:
            await asyncio.sleep(self.connect_timeout)
            raise asyncio.TimeoutError('connect to %s timed out' % endpoint)
        handler = self.listeners.get((endpoint.host, endpoint.port))
        if handler is None or endpoint.host in self.crashed:
            raise ConnectionRefusedError('nothing listening at %s' % endpoint)
        local = SimConnection(self, src, endpoint.host)
        remote = SimConnection(self, endpoint.host, src)
        local.peer, remote.peer = remote, local
        self._track(local)
        self._track(remote)
        asyncio.get_running_loop().create_task(run_handler(handler, remote))
        return local

    async def serve(self, host, endpoint, handler):
        if endpoint.host != host:
            raise OSError('cannot bind %s from host %s' % (endpoint, host))
        port = endpoint.port
        if port == 0:
            port = self._next_port.get(host, 40000)
            self._next_port[host] = port + 1
        key = (host, port)
        if key in self.listeners:
            raise OSError('address already in use: %s:%d' % key)
        self.listeners[key] = handler
        ep = Endpoint(host, port)
        return Server(ep, lambda: self.listeners.pop(key, None))

    def now_ms(self):
        return self.epoch_ms + int(round(asyncio.get_running_loop().time() * 1000))


class SimNode(Network):
    def __init__(self, net, host):
        self.net = net
        self.host = host

    async def connect(self, endpoint):
        return await self.net.connect(self.host, endpoint)

    async def serve(self, endpoint, handler):
        return await self.net.serve(self.host, endpoint, handler)

    def now_ms(self):
        return self.net.now_ms()
