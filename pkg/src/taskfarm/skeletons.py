"""Farm / pipe / seq skeleton algebra.

Any composition of farms and pipelines is reduced before execution to a
*normal form*: a single farm whose worker runs the leaf stages one after the
other.  ``eval_sequential`` is the reference semantics used to check that the
reduction never changes what a job computes.
"""

import re
from dataclasses import dataclass
from typing import Callable, Iterator, Mapping, Sequence, Tuple, Union

from .errors import EmptyExpression, SkeletonSyntaxError, UnknownProcessor


@dataclass(frozen=True)
class Seq:
    processor: str

    def __str__(self):
        return 'seq(%s)' % self.processor


@dataclass(frozen=True)
class Pipe:
    stages: Tuple['SkeletonExpr', ...]

    def __init__(self, stages):
        object.__setattr__(self, 'stages', tuple(stages))

    def __str__(self):
        return 'pipe(%s)' % ', '.join(str(s) for s in self.stages)


@dataclass(frozen=True)
class Farm:
    inner: 'SkeletonExpr'

    def __str__(self):
        return 'farm(%s)' % self.inner


SkeletonExpr = Union[Seq, Pipe, Farm]


@dataclass(frozen=True)
class NormalForm:
    """A farm whose worker applies ``stages`` in order to every task."""

    stages: Tuple[str, ...]

    def __init__(self, stages):
        stages = tuple(stages)
        if not stages:
            raise EmptyExpression('normal form needs at least one stage')
        object.__setattr__(self, 'stages', stages)


def leaves(expr: SkeletonExpr) -> Iterator[str]:
    """Yield processor names of the Seq leaves, left to right."""
    stack = [expr]
    while stack:
        node = stack.pop()
        if isinstance(node, Seq):
            yield node.processor
        elif isinstance(node, Farm):
            stack.append(node.inner)
        elif isinstance(node, Pipe):
            if not node.stages:
                raise EmptyExpression('pipe with zero stages')
            stack.extend(reversed(node.stages))
        else:
            raise TypeError('not a skeleton node: %r' % (node,))


def normalize(expr: SkeletonExpr) -> NormalForm:
    """Erase farms, flatten pipes: the leaves in order become the stages."""
    return NormalForm(leaves(expr))


def as_expr(nf: NormalForm) -> SkeletonExpr:
    """The skeleton tree a normal form stands for."""
    return Farm(Pipe([Seq(name) for name in nf.stages]))


def depth(expr: SkeletonExpr) -> int:
    if isinstance(expr, Seq):
        return 1
    if isinstance(expr, Farm):
        return 1 + depth(expr.inner)
    return 1 + max(depth(s) for s in expr.stages)


ProcessorFn = Callable[[bytes], bytes]


def eval_sequential(expr: SkeletonExpr, tasks: Sequence[bytes],
                    processors: Mapping[str, ProcessorFn]) -> list:
    """Evaluate ``expr`` over ``tasks`` one at a time, in input order.

    ``processors`` maps names to pure ``bytes -> bytes`` functions.  Farm is
    the identity wrapper here; it only changes how work is spread, never what
    is computed.
    """
    def apply(node, data):
        if isinstance(node, Seq):
            try:
                fn = processors[node.processor]
            except KeyError:
                raise UnknownProcessor(node.processor) from None
            return fn(data)
        if isinstance(node, Farm):
            return apply(node.inner, data)
        if isinstance(node, Pipe):
            if not node.stages:
                raise EmptyExpression('pipe with zero stages')
            for stage in node.stages:
                data = apply(stage, data)
            return data
        raise TypeError('not a skeleton node: %r' % (node,))

    return [apply(expr, t) for t in tasks]


# -- textual syntax: farm(x) | pipe(x, y, ...) | seq(name) ---------------

_TOKEN = re.compile(r'\s*(?:(?P<word>[A-Za-z0-9_.\-]+)|(?P<punct>[(),]))')


def _tokenize(text):
    pos = 0
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise SkeletonSyntaxError('unexpected character at offset %d: %r'
                                      % (pos, text[pos:pos + 10]))
        yield m.group('word') or m.group('punct'), m.start(m.lastindex)
        pos = m.end()


def parse(text: str) -> SkeletonExpr:
    """Parse ``farm(...)``, ``pipe(..., ...)`` and ``seq(name)``."""
    tokens = list(_tokenize(text))
    if not tokens:
        raise SkeletonSyntaxError('empty skeleton expression')
    pos = 0

    def expect(tok):
        nonlocal pos
        if pos >= len(tokens) or tokens[pos][0] != tok:
            found = tokens[pos][0] if pos < len(tokens) else 'end of input'
            raise SkeletonSyntaxError('expected %r, found %r' % (tok, found))
        pos += 1

    def node():
        nonlocal pos
        if pos >= len(tokens):
            raise SkeletonSyntaxError('unexpected end of input')
        kw = tokens[pos][0]
        pos += 1
        expect('(')
        if kw == 'seq':
            if pos >= len(tokens) or tokens[pos][0] in '(),':
                raise SkeletonSyntaxError('seq() needs a processor name')
            name = tokens[pos][0]
            pos += 1
            expect(')')
            return Seq(name)
        if kw == 'farm':
            inner = node()
            expect(')')
            return Farm(inner)
        if kw == 'pipe':
            if pos < len(tokens) and tokens[pos][0] == ')':
                raise EmptyExpression('pipe with zero stages')
            stages = [node()]
            while pos < len(tokens) and tokens[pos][0] == ',':
                pos += 1
                stages.append(node())
            expect(')')
            return Pipe(stages)
        raise SkeletonSyntaxError('unknown skeleton %r' % kw)

    expr = node()
    if pos != len(tokens):
        raise SkeletonSyntaxError('trailing input after expression: %r' % tokens[pos][0])
    return expr
