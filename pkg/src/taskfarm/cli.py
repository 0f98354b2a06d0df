"""Command-line entry points: registry, worker, run, demo-mandelbrot, harness."""

import argparse
import asyncio
import base64
import binascii
import logging
import os
import signal
import sys
import tempfile
from dataclasses import dataclass, field
from typing import Dict, List, Optional

from . import mandelbrot, processors
from .client import ComputeConfig, FarmClient
from .errors import (NoServicesAvailable, SkeletonError,
                     TaskFailed, TaskFarmError, UnknownProcessor)
from .protocol import Endpoint, JobSpec
from .registry import (DEFAULT_LEASE_MS, DEFAULT_RENEW_MS, DEFAULT_SWEEP_MS,
                       MAX_LEASE_MS, RegistryServer)
from .skeletons import SkeletonExpr, parse
from .transport import TcpNetwork
from .worker import Worker, WorkerConfig

log = logging.getLogger('taskfarm')

REGISTRY_ENV = 'TASKFARM_REGISTRY'
DEFAULT_REGISTRY = '127.0.0.1:7000'

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_TASK_FAILED = 2
EXIT_NO_SERVICES = 3


# -- job files --------------------------------------------------------------

@dataclass
class JobFile:
    skeleton: SkeletonExpr
    processor_config: Dict[str, bytes] = field(default_factory=dict)
    inputs: List[bytes] = field(default_factory=list)
    output: Optional[str] = None

    @property
    def job(self):
        return JobSpec(self.skeleton, self.processor_config)


def _b64(text, where):
    try:
        return base64.b64decode(text.strip(), validate=True)
    except (binascii.Error, ValueError):
        raise ValueError('%s: not valid base64: %r' % (where, text[:40])) from None


def parse_jobfile(text: str, base_dir: str = '.') -> JobFile:
    """Parse a job file.

    Keys (one per line, ``#`` starts a comment)::

        skeleton:   farm(pipe(seq(a), seq(b)))
        config:     <processor> <value>       (repeatable)
        input:      <base64 payload>          (repeatable)
        text:       <payload as utf-8 text>   (repeatable)
        input-file: <path of base64 lines>    (relative to the job file)
        output:     <path>
    """
    skeleton, config, inputs, output = None, {}, [], None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition(':')
        key, value = key.strip(), value.strip()
        where = 'line %d' % lineno
        if not sep:
            raise ValueError('%s: expected "key: value"' % where)
        if key == 'skeleton':
            skeleton = parse(value)
        elif key == 'config':
            name, _, blob = value.partition(' ')
            config[name] = blob.strip().encode('utf-8')
        elif key == 'input':
            inputs.append(_b64(value, where))
        elif key == 'text':
            inputs.append(value.encode('utf-8'))
        elif key == 'input-file':
            path = os.path.join(base_dir, value)
            with open(path) as fh:
                for n, payload in enumerate(fh, 1):
                    if payload.strip():
                        inputs.append(_b64(payload, '%s:%d' % (value, n)))
        elif key == 'output':
            output = os.path.join(base_dir, value)
        else:
            raise ValueError('%s: unknown key %r' % (where, key))
    if skeleton is None:
        raise ValueError('job file has no skeleton')
    if not inputs:
        raise ValueError('job file has no input')
    return JobFile(skeleton, config, inputs, output)


def write_atomic(path, data: bytes):
    """Write via a temp file in the same directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix='.taskfarm-')
    try:
        with os.fdopen(fd, 'wb') as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- helpers ----------------------------------------------------------------

def _endpoint(text):
    try:
        return Endpoint.parse(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e))


def _compute_config(args):
    return ComputeConfig(args.registry, args.ping_interval, args.ping_timeout,
                         args.task_timeout, args.max_retries, args.min_services,
                         args.startup_window)


def _run_forever(coro_factory):
    """Run a long-lived coroutine; SIGINT/SIGTERM end it cleanly."""
    async def main():
        loop = asyncio.get_running_loop()
        task = asyncio.current_task()
        for sig in (signal.SIGINT, signal.SIGTERM):
            try:
                loop.add_signal_handler(sig, task.cancel)
            except (NotImplementedError, RuntimeError):
                pass
        try:
            await coro_factory()
        except asyncio.CancelledError:
            pass
    asyncio.run(main())


def _farm(args, job, inputs):
    client = FarmClient(job, inputs, _compute_config(args), TcpNetwork())
    return client.compute()


def _farm_exit_code(exc):
    if isinstance(exc, TaskFailed):
        return EXIT_TASK_FAILED
    if isinstance(exc, NoServicesAvailable):
        return EXIT_NO_SERVICES
    return EXIT_ERROR


# -- subcommands ------------------------------------------------------------

def cmd_registry(args):
    async def serve():
        server = RegistryServer(TcpNetwork(), args.bind, args.sweep_interval, args.max_lease)
        await server.start()
        print('registry listening on %s' % server.endpoint, flush=True)
        try:
            await asyncio.Event().wait()
        finally:
            server.close()

    try:
        _run_forever(serve)
    except OSError as e:
        print('registry: cannot bind %s: %s' % (args.bind, e), file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


def cmd_worker(args):
    try:
        table = processors.select([p for p in args.processors.split(',') if p])
        cfg = WorkerConfig(args.registry, args.bind, table, args.lease_ms, args.renew_ms,
                           advertise_host=args.advertise_host)
    except (UnknownProcessor, ValueError) as e:
        print('worker: %s' % e, file=sys.stderr)
        return EXIT_ERROR

    async def serve():
        worker = Worker(cfg, TcpNetwork())
        await worker.start()
        print('worker listening on %s' % worker.endpoint, flush=True)
        await worker.run()

    try:
        _run_forever(serve)
    except OSError as e:
        print('worker: cannot bind %s: %s' % (args.bind, e), file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


def cmd_run(args):
    try:
        with open(args.jobfile) as fh:
            jobfile = parse_jobfile(fh.read(), os.path.dirname(os.path.abspath(args.jobfile)))
    except (OSError, ValueError, SkeletonError) as e:
        print('run: %s' % e, file=sys.stderr)
        return EXIT_ERROR
    output = args.output or jobfile.output
    if not output:
        print('run: no output path (use --output or an output: line)', file=sys.stderr)
        return EXIT_ERROR
    try:
        results = _farm(args, jobfile.job, jobfile.inputs)
    except TaskFarmError as e:
        print('run: %s: %s' % (type(e).__name__, e), file=sys.stderr)
        return _farm_exit_code(e)
    write_atomic(output, b''.join(base64.b64encode(r) + b'\n' for r in results))
    return EXIT_OK


def cmd_demo_mandelbrot(args):
    try:
        region = mandelbrot.parse_region(args.region)
        tasks = mandelbrot.row_tasks(args.width, args.height, region, args.maxiter)
    except ValueError as e:
        print('demo-mandelbrot: %s' % e, file=sys.stderr)
        return EXIT_ERROR
    try:
        rows = _farm(args, mandelbrot.JOB, tasks)
    except TaskFarmError as e:
        print('demo-mandelbrot: %s: %s' % (type(e).__name__, e), file=sys.stderr)
        return _farm_exit_code(e)
    write_atomic(args.output, mandelbrot.to_pgm(args.width, args.height, args.maxiter, rows))
    return EXIT_OK


def cmd_harness(args):
    from .harness import parse_scenario, run_scenario
    from .harness.report import plot_timeline, write_summary

    try:
        with open(args.scenario) as fh:
            scenario = parse_scenario(fh.read())
    except (OSError, ValueError, SkeletonError) as e:
        print('harness: %s' % e, file=sys.stderr)
        return EXIT_ERROR
    try:
        result = run_scenario(scenario)
    except TaskFarmError as e:
        if args.trace and getattr(e, 'trace', None) is not None:
            write_atomic(args.trace, ''.join(ev.format() + '\n' for ev in e.trace).encode())
        print('harness: %s: %s' % (type(e).__name__, e), file=sys.stderr)
        return _farm_exit_code(e)
    if args.trace:
        write_atomic(args.trace, result.dumps_trace().encode())
    if args.report:
        write_summary(args.report, result)
    if args.figure:
        plot_timeline(result, args.figure, title=os.path.basename(args.scenario))
    print('%d tasks, %d workers, %.3f ms virtual; completed per worker: %s'
          % (len(result.outputs), len(result.completed_by_worker), result.end_ms,
             ' '.join(str(c) for c in result.completed_by_worker)))
    return EXIT_OK


# -- argument parsing -------------------------------------------------------

def build_parser():
    default_registry = os.environ.get(REGISTRY_ENV, DEFAULT_REGISTRY)
    parser = argparse.ArgumentParser(prog='taskfarm', description=__doc__)
    parser.add_argument('-v', '--verbose', action='count', default=0)
    sub = parser.add_subparsers(dest='command', required=True)

    def registry_flag(p):
        p.add_argument('--registry', type=_endpoint, default=_endpoint(default_registry),
                       help='registry host:port (default $%s or %s)' % (REGISTRY_ENV, DEFAULT_REGISTRY))

    def compute_flags(p):
        registry_flag(p)
        p.add_argument('--ping-interval', type=int, default=2000, metavar='MS')
        p.add_argument('--ping-timeout', type=int, default=2000, metavar='MS')
        p.add_argument('--task-timeout', type=int, default=0, metavar='MS', help='0 disables')
        p.add_argument('--max-retries', type=int, default=5)
        p.add_argument('--min-services', type=int, default=1)
        p.add_argument('--startup-window', type=int, default=10_000, metavar='MS')

    p = sub.add_parser('registry', help='run the lookup service')
    p.add_argument('--bind', type=_endpoint, default=_endpoint(DEFAULT_REGISTRY))
    p.add_argument('--sweep-interval', type=int, default=DEFAULT_SWEEP_MS, metavar='MS')
    p.add_argument('--max-lease', type=int, default=MAX_LEASE_MS, metavar='MS')
    p.set_defaults(func=cmd_registry)

    p = sub.add_parser('worker', help='run a worker service')
    registry_flag(p)
    p.add_argument('--bind', type=_endpoint, default=_endpoint('127.0.0.1:0'))
    p.add_argument('--advertise-host', default=None,
                   help='host to publish in the registry (default: the bind host)')
    p.add_argument('--processors', default=','.join(processors.BUILTIN))
    p.add_argument('--lease-ms', type=int, default=DEFAULT_LEASE_MS)
    p.add_argument('--renew-ms', type=int, default=DEFAULT_RENEW_MS)
    p.set_defaults(func=cmd_worker)

    p = sub.add_parser('run', help='farm out a job file')
    p.add_argument('jobfile')
    p.add_argument('-o', '--output', default=None, help='overrides the job file output path')
    compute_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser('demo-mandelbrot', help='render a Mandelbrot PGM, one task per row')
    p.add_argument('--width', type=int, default=256)
    p.add_argument('--height', type=int, default=256)
    p.add_argument('--region', default=','.join(str(v) for v in mandelbrot.DEFAULT_REGION),
                   help='x0,x1,y0,y1')
    p.add_argument('--maxiter', type=int, default=256)
    p.add_argument('-o', '--output', default='mandelbrot.pgm')
    compute_flags(p)
    p.set_defaults(func=cmd_demo_mandelbrot)

    p = sub.add_parser('harness', help='deterministic simulation runs')
    hsub = p.add_subparsers(dest='harness_command', required=True)
    hp = hsub.add_parser('run', help='run a scenario file on virtual time')
    hp.add_argument('scenario')
    hp.add_argument('--trace', default=None, help='write the event trace here')
    hp.add_argument('--report', default=None, help='write a per-worker TSV summary here')
    hp.add_argument('--figure', default=None, help='write a timeline figure (png/pdf/svg) here')
    hp.set_defaults(func=cmd_harness)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format='%(asctime)s %(name)s %(levelname)s %(message)s')
    return args.func(args)


if __name__ == '__main__':
    sys.exit(main())
