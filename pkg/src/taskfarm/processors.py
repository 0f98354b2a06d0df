"""Worker-side processor contract and the built-in processors.

A processor follows a three-step lifecycle per task: ``set_data(payload)``,
``run()``, then ``get_data()``.  Instances are reused across tasks, so
``set_data`` must fully reset per-task state.
"""

import hashlib
import time
from typing import Callable, Dict, Iterable, List

from .errors import UnknownProcessor


class Processor:
    """Base class for worker code.  ``config`` is the job's blob for this name."""

    name = None

    def __init__(self, config: bytes = b''):
        self.config = config
        self._input = None
        self._output = None

    def set_data(self, task: bytes):
        self._input = task
        self._output = None

    def run(self):
        self._output = self.compute(self._input)

    def get_data(self) -> bytes:
        if self._output is None:
            raise RuntimeError('get_data() before run()')
        return self._output

    def compute(self, data: bytes) -> bytes:
        raise NotImplementedError


class Identity(Processor):
    name = 'identity'

    def compute(self, data):
        return data


class Delay(Processor):
    """Echo the payload after sleeping ``config`` milliseconds (ASCII int)."""

    name = 'delay'

    def __init__(self, config=b''):
        super().__init__(config)
        self.delay_ms = int(config) if config.strip() else 0
        if self.delay_ms < 0:
            raise ValueError('negative delay')

    def compute(self, data):
        if self.delay_ms:
            time.sleep(self.delay_ms / 1000.0)
        return data


def mandelbrot_row(x0: float, x1: float, y: float, n: int, maxiter: int) -> List[int]:
    """Escape-time iteration counts for ``n`` points from x0 to x1 at height y.

    Points are spaced evenly with both ends included (a single point sits at
    x0).  A point that has not escaped after ``maxiter`` steps counts maxiter.
    """
    counts = []
    step = (x1 - x0) / (n - 1) if n > 1 else 0.0
    for i in range(n):
        cx = x0 + i * step
        zx = zy = 0.0
        k = 0
        while k < maxiter:
            zx2 = zx * zx
            zy2 = zy * zy
            if zx2 + zy2 > 4.0:
                break
            zy = 2.0 * zx * zy + y
            zx = zx2 - zy2 + cx
            k += 1
        counts.append(k)
    return counts


def format_row_spec(x0, x1, y, n, maxiter) -> bytes:
    return ('%r %r %r %d %d' % (float(x0), float(x1), float(y), n, maxiter)).encode('ascii')


def parse_row_spec(payload: bytes):
    try:
        x0, x1, y, n, maxiter = payload.decode('ascii').split()
        spec = float(x0), float(x1), float(y), int(n), int(maxiter)
    except (UnicodeDecodeError, ValueError):
        raise ValueError('bad mandelbrot row spec %r; want "x0 x1 y n maxiter"'
                         % payload[:64]) from None
    if spec[3] < 0 or spec[4] < 0:
        raise ValueError('negative width or maxiter')
    return spec


def pack_counts(counts: Iterable[int]) -> bytes:
    return b''.join(c.to_bytes(4, 'big') for c in counts)


def unpack_counts(data: bytes) -> List[int]:
    return [int.from_bytes(data[i:i + 4], 'big') for i in range(0, len(data), 4)]


class MandelbrotRow(Processor):
    """Payload ``x0 x1 y n maxiter``; output n big-endian u32 counts."""

    name = 'mandelbrot-row'

    def compute(self, data):
        return pack_counts(mandelbrot_row(*parse_row_spec(data)))


def hash_search(prefix: str, start: int, end: int):
    """First i in [start, end) whose sha256(str(i)) hex digest starts with prefix."""
    for i in range(start, end):
        if hashlib.sha256(str(i).encode('ascii')).hexdigest().startswith(prefix):
            return i
    return None


class HashSearch(Processor):
    """Brute-force preimage search.

    Config is the target hex-digest prefix; the payload is ``start end``.
    Output is the first hit in decimal, or empty when the range has none.
    """

    name = 'hash-search'

    def __init__(self, config=b''):
        super().__init__(config)
        self.prefix = config.decode('ascii').strip().lower()

    def compute(self, data):
        start, end = (int(v) for v in data.split())
        hit = hash_search(self.prefix, start, end)
        return b'' if hit is None else str(hit).encode('ascii')


ProcessorFactory = Callable[[bytes], Processor]

BUILTIN = {cls.name: cls for cls in (Identity, Delay, MandelbrotRow, HashSearch)}


def select(names: Iterable[str], table: Dict[str, ProcessorFactory] = None) -> Dict[str, ProcessorFactory]:
    """Subset of ``table`` (default: the built-ins) for a worker's --processors."""
    table = BUILTIN if table is None else table
    out = {}
    for name in names:
        if name not in table:
            raise UnknownProcessor(name)
        out[name] = table[name]
    return out


def as_function(factory: ProcessorFactory, config: bytes = b'') -> Callable[[bytes], bytes]:
    """Wrap a processor as a plain ``bytes -> bytes`` function (fresh instance)."""
    def fn(data):
        p = factory(config)
        p.set_data(data)
        p.run()
        return p.get_data()
    return fn
