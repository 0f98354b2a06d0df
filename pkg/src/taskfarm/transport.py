"""Message connections over a pluggable network.

Registry, worker and client code only see ``Network`` and ``Connection``.
``TcpNetwork`` runs them over real stream sockets; the harness supplies an
in-memory network driven by a virtual clock.
"""

import asyncio
import logging
import struct
import time

from .errors import ConnectionClosed, ProtocolError
from .protocol import DEFAULT_MAX_FRAME, Endpoint, decode, encode

log = logging.getLogger(__name__)

_CLOSED = object()


class Connection:
    """A bidirectional, ordered stream of protocol messages.

    ``recv`` raises ConnectionClosed once the peer is gone; so does ``send``.
    """

    def __init__(self):
        self._inbox = asyncio.Queue()
        self._closed = False

    @property
    def closed(self):
        return self._closed

    def _deliver(self, msg):
        if not self._closed:
            self._inbox.put_nowait(msg)

    def _eof(self):
        self._inbox.put_nowait(_CLOSED)

    async def recv(self):
        item = await self._inbox.get()
        if item is _CLOSED:
            self._inbox.put_nowait(_CLOSED)
            raise ConnectionClosed('connection closed')
        return item

    async def send(self, msg):
        raise NotImplementedError

    def close(self):
        raise NotImplementedError


class Server:
    def __init__(self, endpoint, closer):
        self.endpoint = endpoint
        self._closer = closer

    def close(self):
        self._closer()


class Network:
    async def connect(self, endpoint: Endpoint) -> Connection:
        raise NotImplementedError

    async def serve(self, endpoint: Endpoint, handler) -> Server:
        """Accept connections at ``endpoint``; run ``await handler(conn)`` for each."""
        raise NotImplementedError

    def now_ms(self) -> int:
        """Wall-clock milliseconds used for lease timestamps."""
        raise NotImplementedError


async def run_handler(handler, conn):
    try:
        await handler(conn)
    except ConnectionClosed:
        pass
    except asyncio.CancelledError:
        raise
    except Exception:
        log.exception('connection handler failed')
    finally:
        conn.close()


async def request(conn: Connection, msg, expect=None):
    """Send ``msg`` and wait for one reply, optionally of type ``expect``."""
    await conn.send(msg)
    reply = await conn.recv()
    if expect is not None and not isinstance(reply, expect):
        raise ProtocolError('expected %s, got %s' % (expect.__name__, type(reply).__name__))
    return reply


# -- real sockets ---------------------------------------------------------

_LEN = struct.Struct('>I')


class StreamConnection(Connection):
    def __init__(self, reader, writer, max_frame=DEFAULT_MAX_FRAME):
        super().__init__()
        self._reader = reader
        self._writer = writer
        self.max_frame = max_frame
        self._send_lock = asyncio.Lock()
        self._pump_task = asyncio.get_running_loop().create_task(self._pump())

    async def _pump(self):
        try:
            while True:
                header = await self._reader.readexactly(4)
                (length,) = _LEN.unpack(header)
                if 4 + length > self.max_frame:
                    log.warning('peer sent oversized frame (%d bytes); closing', length)
                    break
                body = await self._reader.readexactly(length)
                msg, _ = decode(header + body, self.max_frame)
                self._deliver(msg)
        except (asyncio.IncompleteReadError, ConnectionError, OSError):
            pass
        except ProtocolError as e:
            log.warning('dropping connection after bad frame: %s', e)
        finally:
            self._eof()
            if not self._closed:
                self.close()

    async def send(self, msg):
        if self._closed:
            raise ConnectionClosed('send on closed connection')
        frame = encode(msg, self.max_frame)
        try:
            async with self._send_lock:
                self._writer.write(frame)
                await self._writer.drain()
        except (ConnectionError, OSError) as e:
            self.close()
            raise ConnectionClosed(str(e)) from None

    def close(self):
        if self._closed:
            return
        self._closed = True
        self._eof()
        self._writer.close()
        if asyncio.current_task() is not self._pump_task:
            self._pump_task.cancel()


class TcpNetwork(Network):
    def __init__(self, max_frame=DEFAULT_MAX_FRAME, connect_timeout=5.0):
        self.max_frame = max_frame
        self.connect_timeout = connect_timeout

    async def connect(self, endpoint):
        reader, writer = await asyncio.wait_for(
            asyncio.open_connection(endpoint.host, endpoint.port),
            self.connect_timeout)
        return StreamConnection(reader, writer, self.max_frame)

    async def serve(self, endpoint, handler):
        async def on_client(reader, writer):
            await run_handler(handler, StreamConnection(reader, writer, self.max_frame))

        server = await asyncio.start_server(on_client, endpoint.host, endpoint.port)
        port = server.sockets[0].getsockname()[1]
        return Server(Endpoint(endpoint.host, port), server.close)

    def now_ms(self):
        return int(time.time() * 1000)
