import asyncio
import csv

import pytest

from taskfarm.errors import SimulationDeadlock
from taskfarm.harness import (CrashAfterKTasks, CrashAtTime, DropAfterAssign, Scenario,
                              WorkerSpec, makespan_ms, parse_scenario, run_scenario,
                              run_virtual, speedup_report)
from taskfarm.harness.report import SUMMARY_FIELDS, plot_timeline, write_summary
from taskfarm.protocol import JobSpec
from taskfarm.skeletons import Farm, Pipe, Seq
from taskfarm.trace import Event, busy_intervals, loads, of_kind

IDENT = JobSpec(Farm(Seq('identity')))


def tasks(n):
    return [b'task-%d' % i for i in range(n)]


def check_trace(trace):
    times = [e.time_ms for e in trace]
    assert times == sorted(times)
    open_ = set()
    for e in trace:
        if e.kind == 'Assigned':
            open_.add((e.task, e.service))
        elif e.kind == 'Completed':
            assert (e.task, e.service) in open_


class TestVirtualLoop:
    def test_sleep_is_instant_and_exact(self):
        async def main():
            loop = asyncio.get_running_loop()
            await asyncio.sleep(3600)
            return loop.time()
        assert run_virtual(main()) == pytest.approx(3600)

    def test_deadlock_detected(self):
        async def main():
            await asyncio.Event().wait()
        with pytest.raises(SimulationDeadlock):
            run_virtual(main())

    def test_timeouts_fire(self):
        async def main():
            with pytest.raises(asyncio.TimeoutError):
                await asyncio.wait_for(asyncio.Event().wait(), 5)
            return asyncio.get_running_loop().time()
        assert run_virtual(main()) == pytest.approx(5)


def test_single_task():
    res = run_scenario(Scenario(IDENT, [b'only'], [WorkerSpec()]))
    assert res.outputs == [b'only']
    assert len(of_kind(res.trace, 'Assigned')) == 1
    assert len(of_kind(res.trace, 'Completed')) == 1
    check_trace(res.trace)


def test_same_seed_same_trace():
    def once():
        s = Scenario(IDENT, tasks(120), [WorkerSpec(service_ms=t) for t in (5, 7, 11)]
                     + [WorkerSpec(fault=CrashAfterKTasks(4))], arrivals=[(2, 300)], seed=42)
        return run_scenario(s).dumps_trace()
    a, b = once(), once()
    assert a == b and a


def test_different_seed_different_ids():
    def sids(seed):
        return run_scenario(Scenario(IDENT, tasks(5), [WorkerSpec()], seed=seed)).service_ids
    assert sids(1) != sids(2)


def test_crash_first_task_then_late_arrival():
    s = Scenario(IDENT, tasks(10), [WorkerSpec(fault=CrashAfterKTasks(0)), WorkerSpec()],
                 arrivals=[(1, 100)], client_start_ms=10)
    res = run_scenario(s)
    assert len(of_kind(res.trace, 'Rescheduled')) == 1
    assert res.outputs == tasks(10)
    assert res.completed_by_worker == [0, 10]
    check_trace(res.trace)


def test_trace_lines_roundtrip():
    res = run_scenario(Scenario(IDENT, tasks(20), [WorkerSpec()] * 2))
    text = res.dumps_trace()
    assert loads(text) == [Event.parse(e.format()) for e in res.trace]
    first = text.splitlines()[0].split()
    assert first[1] == 'Registered' and first[2].startswith('service=')


def test_busy_intervals():
    trace = loads('0.000 Assigned task=0 service=a\n'
                  '5.000 Assigned task=1 service=b\n'
                  '10.000 Completed task=0 service=a\n'
                  '12.000 Failed service=b\n')
    assert busy_intervals(trace) == {'a': [(0.0, 10.0, 0)]}


class TestSpeedup:
    def test_one_worker_is_fully_efficient(self):
        rep = speedup_report(Scenario(IDENT, tasks(40), [WorkerSpec()], latency_ms=0))
        assert rep.efficiency == pytest.approx(1.0, abs=0.02)

    def test_four_workers_zero_latency(self):
        rep = speedup_report(Scenario(IDENT, tasks(200), [WorkerSpec()] * 4, latency_ms=0))
        # lower bound from the event model: ceil(n / w) * service
        assert rep.makespan_ms == pytest.approx(50 * 10)
        assert rep.efficiency >= 0.95

    def test_slow_worker_lowers_efficiency(self):
        homog = speedup_report(Scenario(IDENT, tasks(200), [WorkerSpec()] * 4, latency_ms=0))
        mixed = speedup_report(Scenario(IDENT, tasks(200), [WorkerSpec()] * 3 + [WorkerSpec(service_ms=30)],
                                        latency_ms=0))
        assert mixed.efficiency < homog.efficiency
        assert mixed.result.outputs == tasks(200)

    def test_preconditions(self):
        with pytest.raises(ValueError):
            speedup_report(Scenario(IDENT, tasks(10), [WorkerSpec()]))
        with pytest.raises(ValueError):
            speedup_report(Scenario(IDENT, tasks(40), [WorkerSpec(fault=DropAfterAssign())]))

    def test_makespan_empty(self):
        assert makespan_ms([]) == 0.0


SCENARIO = '''
# two fast workers, one that crashes, one that joins late
skeleton: farm(pipe(seq(identity), seq(delay)))
config: delay 20
tasks: 30
input: extra
input64: AAEC
worker: identity,delay 10
worker: identity,delay 10 crash_after=2
worker: identity,delay 15 arrive=200
seed: 7
latency_ms: 0.5
ping_timeout_ms: 500
'''


class TestScenarioFormat:
    def test_parse(self):
        s = parse_scenario(SCENARIO)
        assert s.job.skeleton == Farm(Pipe([Seq('identity'), Seq('delay')]))
        assert s.job.processor_config == {'delay': b'20'}
        assert len(s.input) == 32 and s.input[-2:] == [b'extra', b'\x00\x01\x02']
        assert s.workers[1].fault == CrashAfterKTasks(2)
        assert s.arrivals == [(2, 200.0)]
        assert (s.seed, s.latency_ms, s.cfg.ping_timeout_ms) == (7, 0.5, 500)

    def test_parsed_scenario_runs(self):
        s = parse_scenario(SCENARIO)
        res = run_scenario(s)
        assert res.outputs == s.input
        assert res.completed_by_worker[1] == 2

    def test_other_faults(self):
        s = parse_scenario('skeleton: seq(identity)\ninput: a\n'
                           'worker: identity 10 crash_at=50\nworker: identity 10 drop_after_assign\n')
        assert s.workers[0].fault == CrashAtTime(50.0)
        assert s.workers[1].fault == DropAfterAssign()

    @pytest.mark.parametrize('text', [
        'input: a\nworker: identity 10\n',
        'skeleton: seq(identity)\nworker: identity 10\n',
        'skeleton: seq(identity)\ninput: a\n',
        'skeleton: seq(identity)\ninput: a\nworker: identity\n',
        'skeleton: seq(identity)\ninput: a\nworker: identity 10 explode=1\n',
        'skeleton: seq(identity)\ninput: a\nworker: identity 10\ncolour: blue\n',
        'skeleton: seq(identity)\ninput: a\nworker: identity 10\nno colon\n',
        'skeleton: seq(identity)\ninput: a\nworker: identity 10 crash_after=-1\n',
        'skeleton: seq(identity)\ninput: a\nworker: identity 10 arrive=5\nworker: identity 10 arrive=-5\n',
    ])
    def test_rejects(self, text):
        with pytest.raises(ValueError):
            parse_scenario(text)


def test_report_outputs(tmp_path):
    s = Scenario(IDENT, tasks(40), [WorkerSpec(), WorkerSpec(service_ms=30),
                                    WorkerSpec(fault=CrashAfterKTasks(3))])
    res = run_scenario(s)
    tsv, png = tmp_path / 'summary.tsv', tmp_path / 'timeline.png'
    write_summary(tsv, res)
    plot_timeline(res, png, title='three workers')
    with open(tsv) as fh:
        rows = list(csv.DictReader(fh, delimiter='\t'))
    assert list(rows[0]) == list(SUMMARY_FIELDS)
    assert [int(r['completed']) for r in rows] == res.completed_by_worker
    assert all(0.0 <= float(r['utilization']) <= 1.0 for r in rows)
    assert png.read_bytes()[:8] == b'\x89PNG\r\n\x1a\n'
