"""Mandelbrot demo: one task per image row, assembled into a binary PGM."""

from typing import List, Sequence, Tuple

from .processors import format_row_spec, mandelbrot_row, pack_counts, unpack_counts
from .protocol import JobSpec
from .skeletons import Farm, Seq

DEFAULT_REGION = (-2.0, 1.0, -1.5, 1.5)
MAX_PGM_VALUE = 65535

JOB = JobSpec(Farm(Seq('mandelbrot-row')))


def parse_region(text: str) -> Tuple[float, float, float, float]:
    parts = [float(v) for v in text.split(',')]
    if len(parts) != 4:
        raise ValueError('region must be x0,x1,y0,y1')
    return tuple(parts)


def row_tasks(width: int, height: int, region=DEFAULT_REGION, maxiter: int = 256) -> List[bytes]:
    if width < 1 or height < 1:
        raise ValueError('image dimensions must be positive')
    if not 0 <= maxiter <= MAX_PGM_VALUE:
        raise ValueError('maxiter must lie in [0, %d]' % MAX_PGM_VALUE)
    x0, x1, y0, y1 = region
    step = (y1 - y0) / (height - 1) if height > 1 else 0.0
    return [format_row_spec(x0, x1, y0 + j * step, width, maxiter) for j in range(height)]


def to_pgm(width: int, height: int, maxiter: int, rows: Sequence[bytes]) -> bytes:
    """Binary PGM whose grey levels are the raw iteration counts."""
    maxval = max(1, maxiter)
    wide = maxval > 255
    out = bytearray(b'P5\n%d %d\n%d\n' % (width, height, maxval))
    for row in rows:
        counts = unpack_counts(row)
        if len(counts) != width:
            raise ValueError('row has %d pixels, expected %d' % (len(counts), width))
        for c in counts:
            out += c.to_bytes(2 if wide else 1, 'big')
    return bytes(out)


def render_local(width, height, region=DEFAULT_REGION, maxiter=256) -> bytes:
    """Reference image computed in-process, row by row."""
    x0, x1, y0, y1 = region
    step = (y1 - y0) / (height - 1) if height > 1 else 0.0
    rows = [pack_counts(mandelbrot_row(x0, x1, y0 + j * step, width, maxiter))
            for j in range(height)]
    return to_pgm(width, height, maxiter, rows)


def read_pgm(data: bytes):
    """Parse what ``to_pgm`` writes: returns (width, height, maxval, pixels)."""
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1
    if fields[0] != b'P5':
        raise ValueError('not a binary PGM')
    w, h, maxval = (int(f) for f in fields[1:])
    size = 2 if maxval > 255 else 1
    body = data[pos:]
    pixels = [int.from_bytes(body[i:i + size], 'big') for i in range(0, len(body), size)]
    if len(pixels) != w * h:
        raise ValueError('pixel count mismatch')
    return w, h, maxval, pixels
