import random
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taskfarm.client import ComputeConfig, TaskRepository
from taskfarm.errors import NoServicesAvailable, TaskFailed
from taskfarm.harness import (REGISTRY, CrashAfterKTasks, CrashAtTime, DropAfterAssign,
                              Scenario, WorkerSpec, run_scenario)
from taskfarm.protocol import JobSpec, ServiceId, TaskResult
from taskfarm.skeletons import Farm, Pipe, Seq, eval_sequential
from taskfarm.trace import of_kind

from conftest import PURE, sim_table

IDENT = JobSpec(Farm(Seq('identity')))


def cfg(**kw):
    return ComputeConfig(REGISTRY, **kw)


def run(job, inputs, workers, **kw):
    return run_scenario(Scenario(job, inputs, workers, **kw), sim_table())


def tasks(n):
    return [b'task-%d' % i for i in range(n)]


class TestTaskRepository:
    def test_acquire_in_order_then_empty(self):
        repo = TaskRepository(3)
        assert [repo.acquire('a') for _ in range(4)] == [0, 1, 2, None]
        assert repo.held_by('a') == [0, 1, 2]
        repo.check_partition()

    def test_complete_and_outputs(self):
        repo = TaskRepository(2)
        for _ in range(2):
            tid = repo.acquire('a')
            assert repo.complete(TaskResult(tid, b'r%d' % tid, ServiceId(1)))
        assert repo.done()
        assert repo.outputs() == [b'r0', b'r1']

    def test_reschedule_goes_to_front(self):
        repo = TaskRepository(3)
        repo.acquire('a')
        repo.acquire('b')
        assert repo.reschedule(1, 'b')
        assert repo.acquire('c') == 1
        assert repo.retry_count[1] == 1
        repo.check_partition()

    def test_reschedule_only_by_holder(self):
        repo = TaskRepository(1)
        repo.acquire('a')
        assert not repo.reschedule(0, 'b')
        assert repo.held_by('a') == [0]

    def test_late_result_after_reschedule_wins(self):
        repo = TaskRepository(2)
        repo.acquire('a')
        repo.reschedule(0, 'a')
        assert repo.complete(TaskResult(0, b'late', ServiceId(1)))
        assert list(repo.pending) == [1]
        repo.check_partition()

    def test_duplicate_result_dropped(self):
        repo = TaskRepository(1)
        repo.acquire('a')
        assert repo.complete(TaskResult(0, b'first', ServiceId(1)))
        assert not repo.complete(TaskResult(0, b'second', ServiceId(2)))
        assert repo.outputs() == [b'first']

    def test_retry_limit(self):
        repo = TaskRepository(1, max_retries=2)
        for _ in range(3):
            repo.acquire('a')
            repo.reschedule(0, 'a')
        assert repo.failed == 0
        assert repo.acquire('a') is None

    def test_unknown_id(self):
        with pytest.raises(ValueError):
            TaskRepository(1).complete(TaskResult(5, b'', ServiceId(0)))

    def test_threads_never_break_partition(self):
        repo = TaskRepository(500, max_retries=10**6)
        stop = threading.Event()
        errors = []

        def worker(k):
            rng = random.Random(k)
            while not repo.done():
                tid = repo.acquire(k)
                if tid is None:
                    continue
                if rng.random() < 0.2:
                    repo.reschedule(tid, k)
                else:
                    repo.complete(TaskResult(tid, b'%d' % tid, ServiceId(k)))

        def checker():
            while not stop.is_set():
                try:
                    repo.check_partition()
                except AssertionError as e:
                    errors.append(e)

        chk = threading.Thread(target=checker)
        chk.start()
        ts = [threading.Thread(target=worker, args=(k,)) for k in range(6)]
        for t in ts:
            t.start()
        for t in ts:
            t.join()
        stop.set()
        chk.join()
        assert errors == []
        assert repo.outputs() == [b'%d' % i for i in range(500)]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(['acquire', 'complete', 'reschedule']),
                          st.integers(0, 3), st.integers(0, 9)), max_size=80))
def test_repository_matches_model(ops):
    repo = TaskRepository(10, max_retries=10**6)
    pending, held, done = list(range(10)), {}, {}
    for op, svc, tid in ops:
        if op == 'acquire':
            got = repo.acquire(svc)
            want = pending.pop(0) if pending else None
            assert got == want
            if want is not None:
                held[want] = svc
        elif op == 'complete':
            ok = repo.complete(TaskResult(tid, b'', ServiceId(svc)))
            assert ok == (tid not in done)
            if ok:
                if tid in held:
                    del held[tid]
                else:
                    pending.remove(tid)
                done[tid] = svc
        else:
            ok = repo.reschedule(tid, svc)
            assert ok == (held.get(tid) == svc)
            if ok:
                del held[tid]
                pending.insert(0, tid)
        repo.check_partition()
        assert list(repo.pending) == pending


# -- client behaviour on virtual time --------------------------------------------

def test_outputs_in_input_order():
    inputs = tasks(60)
    res = run(IDENT, inputs, [WorkerSpec(service_ms=s) for s in (3, 10, 25)])
    assert res.outputs == inputs
    assert sum(res.completed_by_worker) == 60
    assert all(c > 0 for c in res.completed_by_worker)


def test_pipeline_job_with_config():
    skel = Pipe([Farm(Seq('rev')), Farm(Pipe([Seq('inc'), Seq('sha')]))])
    inputs = tasks(20)
    res = run(JobSpec(skel), inputs, [WorkerSpec(('rev', 'inc', 'sha'))] * 2)
    assert res.outputs == eval_sequential(skel, inputs, PURE)


def test_worker_lacking_a_stage_is_not_recruited():
    skel = Farm(Pipe([Seq('rev'), Seq('inc')]))
    res = run(JobSpec(skel), tasks(10),
              [WorkerSpec(('rev',)), WorkerSpec(('rev', 'inc'))])
    assert res.completed_by_worker == [0, 10]
    assert len(of_kind(res.trace, 'Recruited')) == 1


def test_every_recruited_service_is_released():
    res = run(IDENT, tasks(30), [WorkerSpec()] * 4)
    recruited = {e.service for e in of_kind(res.trace, 'Recruited')}
    released = {e.service for e in of_kind(res.trace, 'Released')}
    assert recruited == released and len(recruited) == 4
    assert len(of_kind(res.trace, 'Recruited')) == 4


def test_crash_reschedules_in_flight_task():
    inputs = tasks(40)
    res = run(IDENT, inputs, [WorkerSpec(fault=CrashAfterKTasks(3)), WorkerSpec()])
    assert res.outputs == inputs
    assert res.completed_by_worker == [3, 37]
    dead = res.service_ids[0][0]
    fourth = [e.task for e in of_kind(res.trace, 'Assigned') if e.service == dead][3]
    [resched] = of_kind(res.trace, 'Rescheduled')
    assert resched.task == fourth


def test_crash_at_time():
    inputs = tasks(40)
    res = run(IDENT, inputs, [WorkerSpec(fault=CrashAtTime(150)), WorkerSpec()])
    assert res.outputs == inputs
    assert len(of_kind(res.trace, 'Failed')) == 1


def test_silent_worker_detected_by_ping():
    c = cfg(ping_interval_ms=500, ping_timeout_ms=300)
    res = run(IDENT, tasks(10), [WorkerSpec(fault=DropAfterAssign()), WorkerSpec()], cfg=c)
    [failed] = of_kind(res.trace, 'Failed')
    dead = failed.service
    assigned = [e for e in of_kind(res.trace, 'Assigned') if e.service == dead]
    assert len(assigned) == 1
    assert failed.time_ms - assigned[0].time_ms == pytest.approx(800, abs=5)
    assert res.outputs == tasks(10)


def test_task_timeout_gives_up():
    c = cfg(task_timeout_ms=100, max_retries_per_task=2, ping_interval_ms=50)
    with pytest.raises(TaskFailed) as info:
        run(IDENT, tasks(3), [WorkerSpec(service_ms=1_000)], cfg=c)
    assert info.value.task_id == 0 and info.value.retries == 3


def test_poison_task_fails_the_job():
    inputs = [b'ok', b'bad', b'ok']
    with pytest.raises(TaskFailed) as info:
        run(JobSpec(Farm(Seq('poison'))), inputs, [WorkerSpec(('poison',))] * 2,
            cfg=cfg(max_retries_per_task=3))
    assert info.value.task_id == 1
    assert len(of_kind(info.value.trace, 'Rescheduled')) == 4


def test_no_workers():
    with pytest.raises(NoServicesAvailable) as info:
        run(IDENT, tasks(5), [WorkerSpec()], arrivals=[(0, 10**7)],
            cfg=cfg(startup_window_ms=2_000))
    assert info.value.trace == [] or of_kind(info.value.trace, 'Recruited') == []


def test_min_services_not_met():
    with pytest.raises(NoServicesAvailable):
        run(IDENT, tasks(500), [WorkerSpec()] * 2, cfg=cfg(min_services=3, startup_window_ms=1_000))


def test_min_services_met_late():
    res = run(IDENT, tasks(300), [WorkerSpec()] * 3, arrivals=[(2, 500)],
              cfg=cfg(min_services=3, startup_window_ms=1_000))
    assert res.outputs == tasks(300)


def test_all_workers_dead():
    with pytest.raises(NoServicesAvailable):
        run(IDENT, tasks(50), [WorkerSpec(fault=CrashAfterKTasks(2))] * 2,
            cfg=cfg(startup_window_ms=1_000))


def test_late_arrival_joins_via_notify():
    res = run(IDENT, tasks(200), [WorkerSpec(service_ms=20)] * 2, arrivals=[(1, 800)])
    assert res.completed_by_worker[1] > 0
    assert len(of_kind(res.trace, 'Notified')) >= 1


def test_async_arrival_satisfies_startup():
    res = run(IDENT, tasks(300), [WorkerSpec()] * 2, arrivals=[(1, 300)],
              cfg=cfg(min_services=3, startup_window_ms=1_000))
    assert res.outputs == tasks(300)


@pytest.mark.parametrize('seed', range(10))
def test_self_scheduling_balance(seed):
    rng = random.Random(seed)
    times = [rng.choice([5, 10, 20, 40]) for _ in range(rng.randint(2, 5))]
    n = 400
    res = run(IDENT, tasks(n), [WorkerSpec(service_ms=t) for t in times], latency_ms=0, seed=seed)
    rate = sum(1 / t for t in times)
    for t, got in zip(times, res.completed_by_worker):
        assert abs(got - n * (1 / t) / rate) <= len(times) + 0.1 * n
