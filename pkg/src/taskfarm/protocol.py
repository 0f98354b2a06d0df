"""Domain types and the binary wire protocol.

Every message travels as one frame::

    +----------------+-----+----------------+
    | length: u32 BE | tag | body ...       |
    +----------------+-----+----------------+

``length`` counts the tag byte plus the body.  All integers are big-endian.
See docs/wire-format.md for the body layout of each variant.
"""

import struct
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Mapping, Tuple, Union

from .errors import Incomplete, MalformedFrame, OversizedMessage
from .skeletons import NormalForm, SkeletonExpr, leaves

DEFAULT_MAX_FRAME = 16 * 1024 * 1024

_U8 = struct.Struct('>B')
_U16 = struct.Struct('>H')
_U32 = struct.Struct('>I')
_U64 = struct.Struct('>Q')


# -- domain types ---------------------------------------------------------

@dataclass(frozen=True, order=True)
class ServiceId:
    """128-bit registry-assigned identifier."""

    value: int

    def __post_init__(self):
        if not 0 <= self.value < 1 << 128:
            raise ValueError('ServiceId out of 128-bit range: %r' % self.value)

    def __str__(self):
        return '%032x' % self.value

    def short(self):
        return str(self)[:8]


@dataclass(frozen=True)
class Endpoint:
    host: str
    port: int

    def __post_init__(self):
        if not self.host:
            raise ValueError('empty host')
        if not 0 <= self.port < 1 << 16:
            raise ValueError('port out of range: %r' % self.port)

    @classmethod
    def parse(cls, text):
        host, sep, port = text.strip().rpartition(':')
        if not sep or not host:
            raise ValueError('expected host:port, got %r' % text)
        try:
            return cls(host, int(port))
        except ValueError:
            raise ValueError('expected host:port, got %r' % text) from None

    def __str__(self):
        return '%s:%d' % (self.host, self.port)


@dataclass(frozen=True)
class ServiceDescriptor:
    service_id: ServiceId
    endpoint: Endpoint
    processors: FrozenSet[str]
    lease_expiry: int  # ms since epoch
    attributes: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, 'processors', frozenset(self.processors))
        object.__setattr__(self, 'attributes', dict(self.attributes))

    def covers(self, stages):
        return set(stages) <= self.processors


TaskId = int


@dataclass(frozen=True)
class Task:
    id: TaskId
    payload: bytes


@dataclass(frozen=True)
class TaskResult:
    id: TaskId
    payload: bytes
    worker: ServiceId


@dataclass(frozen=True)
class JobSpec:
    """What to compute: a skeleton plus per-processor configuration blobs.

    Processors missing from ``processor_config`` run with an empty config.
    """

    skeleton: SkeletonExpr
    processor_config: Mapping[str, bytes] = field(default_factory=dict)

    def config_for(self, name):
        return self.processor_config.get(name, b'')

    def stage_config(self):
        return {name: self.config_for(name) for name in set(leaves(self.skeleton))}


# -- messages -------------------------------------------------------------
# Registry plane.

@dataclass(frozen=True)
class Register:
    endpoint: Endpoint
    processors: FrozenSet[str]
    lease_duration_ms: int
    attributes: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, 'processors', frozenset(self.processors))
        object.__setattr__(self, 'attributes', dict(self.attributes))


@dataclass(frozen=True)
class RegisterAck:
    service_id: ServiceId
    lease_expiry: int


@dataclass(frozen=True)
class Unregister:
    service_id: ServiceId


@dataclass(frozen=True)
class Query:
    filter: str = ''


@dataclass(frozen=True)
class QueryReply:
    services: Tuple[ServiceDescriptor, ...]

    def __post_init__(self):
        object.__setattr__(self, 'services', tuple(self.services))


@dataclass(frozen=True)
class Subscribe:
    filter: str = ''


@dataclass(frozen=True)
class Notify:
    service: ServiceDescriptor


@dataclass(frozen=True)
class Renew:
    service_id: ServiceId
    lease_duration_ms: int


@dataclass(frozen=True)
class RenewAck:
    lease_expiry: int  # 0 means the service id is unknown or expired


# Work plane.

@dataclass(frozen=True)
class Recruit:
    job: NormalForm
    config: Mapping[str, bytes]
    nonce: int

    def __post_init__(self):
        object.__setattr__(self, 'config', dict(self.config))


@dataclass(frozen=True)
class RecruitAck:
    accept: bool


@dataclass(frozen=True)
class AssignTask:
    task: Task


@dataclass(frozen=True)
class TaskDone:
    result: TaskResult


@dataclass(frozen=True)
class Release:
    pass


@dataclass(frozen=True)
class Ping:
    pass


@dataclass(frozen=True)
class Pong:
    pass


Message = Union[Register, RegisterAck, Unregister, Query, QueryReply, Subscribe,
                Notify, Renew, RenewAck, Recruit, RecruitAck, AssignTask,
                TaskDone, Release, Ping, Pong]


# -- body codecs ----------------------------------------------------------

class _Writer:
    def __init__(self):
        self.parts = []

    def u8(self, v):
        self.parts.append(_U8.pack(v))

    def u16(self, v):
        self.parts.append(_U16.pack(v))

    def u32(self, v):
        self.parts.append(_U32.pack(v))

    def u64(self, v):
        self.parts.append(_U64.pack(v))

    def raw(self, b):
        self.parts.append(bytes(b))

    def blob(self, b):
        self.u32(len(b))
        self.raw(b)

    def text(self, s):
        self.blob(s.encode('utf-8'))

    def sid(self, sid):
        self.raw(sid.value.to_bytes(16, 'big'))

    def endpoint(self, ep):
        self.text(ep.host)
        self.u16(ep.port)

    def names(self, names):
        # sets go out sorted so encoding is canonical
        names = sorted(names)
        self.u32(len(names))
        for n in names:
            self.text(n)

    def str_map(self, m):
        self.u32(len(m))
        for k in sorted(m):
            self.text(k)
            self.text(m[k])

    def blob_map(self, m):
        self.u32(len(m))
        for k in sorted(m):
            self.text(k)
            self.blob(m[k])

    def descriptor(self, d):
        self.sid(d.service_id)
        self.endpoint(d.endpoint)
        self.names(d.processors)
        self.u64(d.lease_expiry)
        self.str_map(d.attributes)

    def getvalue(self):
        return b''.join(self.parts)


class _Reader:
    def __init__(self, buf):
        self.buf = memoryview(buf)
        self.pos = 0

    def _take(self, n):
        end = self.pos + n
        if end > len(self.buf):
            raise MalformedFrame('body too short')
        chunk = self.buf[self.pos:end]
        self.pos = end
        return chunk

    def u8(self):
        return self._take(1)[0]

    def u16(self):
        return _U16.unpack(self._take(2))[0]

    def u32(self):
        return _U32.unpack(self._take(4))[0]

    def u64(self):
        return _U64.unpack(self._take(8))[0]

    def blob(self):
        return bytes(self._take(self.u32()))

    def text(self):
        try:
            return self.blob().decode('utf-8')
        except UnicodeDecodeError as e:
            raise MalformedFrame('invalid utf-8: %s' % e) from None

    def boolean(self):
        v = self.u8()
        if v > 1:
            raise MalformedFrame('bad boolean byte %#x' % v)
        return bool(v)

    def sid(self):
        return ServiceId(int.from_bytes(self._take(16), 'big'))

    def endpoint(self):
        host = self.text()
        port = self.u16()
        try:
            return Endpoint(host, port)
        except ValueError as e:
            raise MalformedFrame(str(e)) from None

    def names(self):
        return [self.text() for _ in range(self.u32())]

    def str_map(self):
        return {self.text(): self.text() for _ in range(self.u32())}

    def blob_map(self):
        out = {}
        for _ in range(self.u32()):
            k = self.text()
            out[k] = self.blob()
        return out

    def descriptor(self):
        return ServiceDescriptor(self.sid(), self.endpoint(), self.names(),
                                 self.u64(), self.str_map())

    def finish(self):
        if self.pos != len(self.buf):
            raise MalformedFrame('%d trailing bytes in body' % (len(self.buf) - self.pos))


def _enc_register(w, m):
    w.endpoint(m.endpoint)
    w.names(m.processors)
    w.u64(m.lease_duration_ms)
    w.str_map(m.attributes)


def _enc_recruit(w, m):
    stages = m.job.stages
    w.u32(len(stages))
    for s in stages:
        w.text(s)
    w.blob_map(m.config)
    w.u64(m.nonce)


def _dec_recruit(r):
    stages = [r.text() for _ in range(r.u32())]
    if not stages:
        raise MalformedFrame('recruit with zero stages')
    return Recruit(NormalForm(stages), r.blob_map(), r.u64())


def _enc_task(w, t):
    w.u64(t.id)
    w.blob(t.payload)


def _enc_result(w, res):
    w.u64(res.id)
    w.blob(res.payload)
    w.sid(res.worker)


def _enc_reply(w, m):
    w.u32(len(m.services))
    for d in m.services:
        w.descriptor(d)


# tag -> (class, encoder, decoder); the table is the single source of tags
_VARIANTS = {
    0x01: (Register, _enc_register,
           lambda r: Register(r.endpoint(), r.names(), r.u64(), r.str_map())),
    0x02: (RegisterAck, lambda w, m: (w.sid(m.service_id), w.u64(m.lease_expiry)),
           lambda r: RegisterAck(r.sid(), r.u64())),
    0x03: (Unregister, lambda w, m: w.sid(m.service_id),
           lambda r: Unregister(r.sid())),
    0x04: (Query, lambda w, m: w.text(m.filter), lambda r: Query(r.text())),
    0x05: (QueryReply, _enc_reply,
           lambda r: QueryReply([r.descriptor() for _ in range(r.u32())])),
    0x06: (Subscribe, lambda w, m: w.text(m.filter), lambda r: Subscribe(r.text())),
    0x07: (Notify, lambda w, m: w.descriptor(m.service), lambda r: Notify(r.descriptor())),
    0x08: (Renew, lambda w, m: (w.sid(m.service_id), w.u64(m.lease_duration_ms)),
           lambda r: Renew(r.sid(), r.u64())),
    0x09: (RenewAck, lambda w, m: w.u64(m.lease_expiry), lambda r: RenewAck(r.u64())),
    0x10: (Recruit, _enc_recruit, _dec_recruit),
    0x11: (RecruitAck, lambda w, m: w.u8(1 if m.accept else 0),
           lambda r: RecruitAck(r.boolean())),
    0x12: (AssignTask, lambda w, m: _enc_task(w, m.task),
           lambda r: AssignTask(Task(r.u64(), r.blob()))),
    0x13: (TaskDone, lambda w, m: _enc_result(w, m.result),
           lambda r: TaskDone(TaskResult(r.u64(), r.blob(), r.sid()))),
    0x14: (Release, lambda w, m: None, lambda r: Release()),
    0x15: (Ping, lambda w, m: None, lambda r: Ping()),
    0x16: (Pong, lambda w, m: None, lambda r: Pong()),
}

TAGS = {cls: tag for tag, (cls, _, _) in _VARIANTS.items()}
assert len(TAGS) == len(_VARIANTS), 'duplicate message class in tag table'


def encode(msg: Message, max_frame: int = DEFAULT_MAX_FRAME) -> bytes:
    """Serialize one message into a self-delimiting frame."""
    try:
        tag = TAGS[type(msg)]
    except KeyError:
        raise TypeError('not a protocol message: %r' % (msg,)) from None
    w = _Writer()
    try:
        _VARIANTS[tag][1](w, msg)
    except struct.error as e:
        raise ValueError('field out of range in %s: %s' % (type(msg).__name__, e)) from None
    body = w.getvalue()
    length = 1 + len(body)
    if 4 + length > max_frame:
        raise OversizedMessage('frame of %d bytes exceeds limit %d' % (4 + length, max_frame))
    return _U32.pack(length) + _U8.pack(tag) + body


def decode(buf, max_frame: int = DEFAULT_MAX_FRAME) -> Tuple[Message, int]:
    """Decode the first frame in ``buf``.

    Returns ``(message, consumed)``; bytes past the frame are left alone.
    Raises Incomplete if the frame is not fully buffered yet.
    """
    if len(buf) < 4:
        raise Incomplete(4 - len(buf))
    (length,) = _U32.unpack_from(buf, 0)
    if 4 + length > max_frame:
        raise OversizedMessage('frame of %d bytes exceeds limit %d' % (4 + length, max_frame))
    if length == 0:
        raise MalformedFrame('zero-length frame has no tag')
    if len(buf) < 4 + length:
        raise Incomplete(4 + length - len(buf))
    tag = buf[4]
    try:
        _, _, dec = _VARIANTS[tag]
    except KeyError:
        raise MalformedFrame('unknown tag %#04x' % tag) from None
    r = _Reader(bytes(buf[5:4 + length]))
    try:
        msg = dec(r)
    except ValueError as e:
        raise MalformedFrame(str(e)) from None
    r.finish()
    return msg, 4 + length


def decode_all(buf, max_frame: int = DEFAULT_MAX_FRAME) -> List[Message]:
    """Decode a buffer holding only whole frames."""
    out, pos = [], 0
    view = memoryview(buf)
    while pos < len(buf):
        msg, n = decode(view[pos:], max_frame)
        out.append(msg)
        pos += n
    return out


class FrameDecoder:
    """Incremental decoder for a byte stream."""

    def __init__(self, max_frame: int = DEFAULT_MAX_FRAME):
        self.max_frame = max_frame
        self._buf = bytearray()

    def feed(self, data: bytes) -> List[Message]:
        self._buf += data
        out = []
        while True:
            try:
                msg, n = decode(self._buf, self.max_frame)
            except Incomplete:
                return out
            del self._buf[:n]
            out.append(msg)

    @property
    def buffered(self):
        return len(self._buf)


def tag_table() -> Dict[str, int]:
    """Tag byte of every variant, keyed by class name."""
    return {cls.__name__: tag for cls, tag in TAGS.items()}
