"""The lookup service.

Workers register leased descriptors; clients either query the live entries
(synchronous recruitment) or subscribe to be told about new arrivals
(asynchronous recruitment).  Only arrivals are announced: departures are
detected by clients through their own liveness checks.

``RegistryState`` is the thread-safe core with an injected clock.
``RegistryServer`` exposes it over a ``Network``; ``RegistryClient`` is the
request/response helper used by workers and clients.
"""

import asyncio
import logging
import secrets
import threading
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Mapping, NamedTuple, Tuple

from .errors import (ConnectionClosed, InvalidLease, MalformedDescriptor,
                     ProtocolError, RegistryUnreachable, UnknownService)
from .protocol import (Endpoint, Notify, Ping, Pong, Query, QueryReply, Register,
                       RegisterAck, Renew, RenewAck, ServiceDescriptor, ServiceId,
                       Subscribe, Unregister)
from .transport import Network, request

log = logging.getLogger(__name__)

MIN_LEASE_MS = 1_000
MAX_LEASE_MS = 3_600_000

DEFAULT_LEASE_MS = 30_000
DEFAULT_RENEW_MS = 10_000
DEFAULT_SWEEP_MS = 5_000


def matches(filter_name: str, processors: Iterable[str]) -> bool:
    return not filter_name or filter_name in processors


class JournalEntry(NamedTuple):
    op: str
    args: tuple
    result: object
    now: int
    thread: int


@dataclass
class _Subscription:
    handle: int
    filter: str
    deliver: Callable[[ServiceDescriptor], None]


class RegistryState:
    """Leased service entries plus arrival subscriptions.

    ``clock`` returns the current time in milliseconds.  Every mutation runs
    under one lock; subscriber callbacks run after it is released.  A callback
    that raises is treated as a dead observer and unsubscribed.

    If ``journal`` is a list, each applied operation is appended to it as a
    JournalEntry, in the order the lock serialized them.
    """

    def __init__(self, clock: Callable[[], int], max_lease_ms: int = MAX_LEASE_MS,
                 id_source: Callable[[], int] = None, journal: list = None):
        if not MIN_LEASE_MS <= max_lease_ms <= MAX_LEASE_MS:
            raise ValueError('max_lease_ms must lie in [%d, %d]' % (MIN_LEASE_MS, MAX_LEASE_MS))
        self.clock = clock
        self.max_lease_ms = max_lease_ms
        self._id_source = id_source or (lambda: secrets.randbits(128))
        self._lock = threading.Lock()
        self._entries: Dict[ServiceId, ServiceDescriptor] = {}
        self._issued = set()
        self._subs: Dict[int, _Subscription] = {}
        self._next_handle = 1
        self.journal = journal

    def _log(self, op, args, result, now):
        if self.journal is not None:
            self.journal.append(JournalEntry(op, args, result, now, threading.get_ident()))

    def _fresh_id(self):
        while True:
            sid = ServiceId(self._id_source() & ((1 << 128) - 1))
            if sid not in self._issued:
                self._issued.add(sid)
                return sid

    def _lease(self, lease_ms):
        if not isinstance(lease_ms, int) or not MIN_LEASE_MS <= lease_ms <= MAX_LEASE_MS:
            raise InvalidLease('lease %r ms outside [%d, %d]' % (lease_ms, MIN_LEASE_MS, MAX_LEASE_MS))
        return min(lease_ms, self.max_lease_ms)

    def register(self, endpoint: Endpoint, processors: Iterable[str], lease_ms: int,
                 attributes: Mapping[str, str] = None) -> Tuple[ServiceId, int]:
        processors = frozenset(processors)
        if not processors or not all(isinstance(p, str) and p for p in processors):
            raise MalformedDescriptor('descriptor needs at least one non-empty processor name')
        if not isinstance(endpoint, Endpoint):
            raise MalformedDescriptor('bad endpoint %r' % (endpoint,))
        granted = self._lease(lease_ms)
        with self._lock:
            now = self.clock()
            sid = self._fresh_id()
            desc = ServiceDescriptor(sid, endpoint, processors, now + granted, attributes or {})
            self._entries[sid] = desc
            targets = [s for s in self._subs.values() if matches(s.filter, processors)]
            self._log('register', (endpoint, processors, lease_ms), (sid, desc.lease_expiry), now)
        self._notify(targets, desc)
        return sid, desc.lease_expiry

    def _notify(self, targets, desc):
        for sub in targets:
            try:
                sub.deliver(desc)
            except Exception:
                log.debug('observer %d failed; dropping subscription', sub.handle)
                self.unsubscribe(sub.handle)

    def unregister(self, sid: ServiceId) -> None:
        with self._lock:
            self._entries.pop(sid, None)
            self._log('unregister', (sid,), None, self.clock())

    def renew(self, sid: ServiceId, lease_ms: int) -> int:
        granted = self._lease(lease_ms)
        with self._lock:
            now = self.clock()
            desc = self._entries.get(sid)
            if desc is None or desc.lease_expiry < now:
                self._entries.pop(sid, None)
                self._log('renew', (sid, lease_ms), None, now)
                raise UnknownService(str(sid))
            expiry = now + granted
            self._entries[sid] = ServiceDescriptor(desc.service_id, desc.endpoint,
                                                   desc.processors, expiry, desc.attributes)
            self._log('renew', (sid, lease_ms), expiry, now)
            return expiry

    def query(self, filter_name: str = '') -> List[ServiceDescriptor]:
        with self._lock:
            now = self.clock()
            out = [d for d in self._entries.values()
                   if d.lease_expiry >= now and matches(filter_name, d.processors)]
            self._log('query', (filter_name,),
                      frozenset((d.service_id, d.lease_expiry) for d in out), now)
            return out

    def sweep(self) -> List[ServiceId]:
        """Drop every entry whose lease has expired; return the dropped ids."""
        with self._lock:
            now = self.clock()
            dead = [sid for sid, d in self._entries.items() if d.lease_expiry < now]
            for sid in dead:
                del self._entries[sid]
            self._log('sweep', (), frozenset(dead), now)
            return dead

    def subscribe(self, filter_name: str, deliver: Callable[[ServiceDescriptor], None]) -> int:
        with self._lock:
            handle = self._next_handle
            self._next_handle += 1
            self._subs[handle] = _Subscription(handle, filter_name, deliver)
            return handle

    def unsubscribe(self, handle: int) -> None:
        with self._lock:
            self._subs.pop(handle, None)

    def __len__(self):
        with self._lock:
            return len(self._entries)

    @property
    def subscriptions(self):
        with self._lock:
            return len(self._subs)


class RegistryServer:
    """Serves a RegistryState on one endpoint and sweeps leases periodically."""

    def __init__(self, network: Network, bind: Endpoint, sweep_interval_ms: int = DEFAULT_SWEEP_MS,
                 max_lease_ms: int = MAX_LEASE_MS, id_source=None, tracer=None):
        self.network = network
        self.bind = bind
        self.sweep_interval_ms = sweep_interval_ms
        self.state = RegistryState(network.now_ms, max_lease_ms, id_source)
        self.tracer = tracer
        self.endpoint = None
        self._server = None
        self._sweeper = None

    async def start(self):
        self._server = await self.network.serve(self.bind, self._handle)
        self.endpoint = self._server.endpoint
        self._sweeper = asyncio.get_running_loop().create_task(self._sweep_loop())
        log.info('registry listening on %s', self.endpoint)
        return self

    def close(self):
        if self._sweeper:
            self._sweeper.cancel()
        if self._server:
            self._server.close()

    async def _sweep_loop(self):
        while True:
            await asyncio.sleep(self.sweep_interval_ms / 1000.0)
            dead = self.state.sweep()
            if dead:
                log.info('lease expired for %d service(s)', len(dead))

    async def _handle(self, conn):
        handle = None
        loop = asyncio.get_running_loop()

        def deliver(desc):
            if conn.closed:
                raise ConnectionClosed('observer gone')
            loop.create_task(_send_quietly(conn, Notify(desc)))

        try:
            while True:
                msg = await conn.recv()
                reply = None
                if isinstance(msg, Register):
                    try:
                        sid, expiry = self.state.register(msg.endpoint, msg.processors,
                                                          msg.lease_duration_ms, msg.attributes)
                    except (InvalidLease, MalformedDescriptor) as e:
                        log.warning('rejecting registration from %s: %s', msg.endpoint, e)
                        return
                    if self.tracer:
                        self.tracer.emit('Registered', service=sid)
                    reply = RegisterAck(sid, expiry)
                elif isinstance(msg, Unregister):
                    self.state.unregister(msg.service_id)
                elif isinstance(msg, Renew):
                    try:
                        reply = RenewAck(self.state.renew(msg.service_id, msg.lease_duration_ms))
                    except UnknownService:
                        reply = RenewAck(0)
                    except InvalidLease:
                        return
                elif isinstance(msg, Query):
                    reply = QueryReply(self.state.query(msg.filter))
                elif isinstance(msg, Subscribe):
                    if handle is not None:
                        self.state.unsubscribe(handle)
                    handle = self.state.subscribe(msg.filter, deliver)
                elif isinstance(msg, Ping):
                    reply = Pong()
                else:
                    log.warning('registry ignoring unexpected %s', type(msg).__name__)
                    return
                if reply is not None:
                    await conn.send(reply)
        finally:
            if handle is not None:
                self.state.unsubscribe(handle)


async def _send_quietly(conn, msg):
    try:
        await conn.send(msg)
    except ConnectionClosed:
        pass


class RegistryClient:
    """One short-lived connection per call.

    Connection failures surface as RegistryUnreachable.
    """

    def __init__(self, network: Network, address: Endpoint):
        self.network = network
        self.address = address

    async def _open(self):
        try:
            return await self.network.connect(self.address)
        except (OSError, asyncio.TimeoutError) as e:
            raise RegistryUnreachable('%s: %s' % (self.address, e)) from None

    async def _call(self, msg, expect):
        conn = await self._open()
        try:
            return await request(conn, msg, expect)
        except ConnectionClosed as e:
            raise RegistryUnreachable('%s: %s' % (self.address, e)) from None
        finally:
            conn.close()

    async def register(self, endpoint, processors, lease_ms, attributes=None) -> RegisterAck:
        ack = await self._call(Register(endpoint, processors, lease_ms, attributes or {}), RegisterAck)
        return ack

    async def unregister(self, sid: ServiceId) -> None:
        # No ack variant exists; a Pong on the same connection proves the
        # registry has already applied the Unregister.
        conn = await self._open()
        try:
            await conn.send(Unregister(sid))
            await request(conn, Ping(), Pong)
        except ConnectionClosed as e:
            raise RegistryUnreachable(str(e)) from None
        finally:
            conn.close()

    async def renew(self, sid: ServiceId, lease_ms: int) -> int:
        ack = await self._call(Renew(sid, lease_ms), RenewAck)
        if ack.lease_expiry == 0:
            raise UnknownService(str(sid))
        return ack.lease_expiry

    async def query(self, filter_name: str = '') -> List[ServiceDescriptor]:
        reply = await self._call(Query(filter_name), QueryReply)
        return list(reply.services)

    async def subscribe(self, filter_name: str = ''):
        """Open an observer connection.

        Returns ``(conn, early)``: the connection that will carry Notify
        messages, and any Notify that raced ahead of the confirmation.
        """
        conn = await self._open()
        early = []
        try:
            await conn.send(Subscribe(filter_name))
            await conn.send(Ping())
            while True:
                msg = await conn.recv()
                if isinstance(msg, Pong):
                    break
                if not isinstance(msg, Notify):
                    raise ProtocolError('unexpected %s on observer connection' % type(msg).__name__)
                early.append(msg)
        except ConnectionClosed as e:
            conn.close()
            raise RegistryUnreachable(str(e)) from None
        return conn, early
