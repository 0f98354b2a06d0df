"""Per-worker summaries of a scenario run, as TSV and as a timeline figure."""

import csv

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402

from ..trace import busy_intervals, of_kind  # noqa: E402

SUMMARY_FIELDS = ('worker', 'service_ids', 'completed', 'busy_ms', 'utilization')


def summary_rows(result):
    spans = busy_intervals(result.trace)
    rows = []
    for i, sids in enumerate(result.service_ids):
        busy = sum(end - start for sid in sids for start, end, _ in spans.get(sid, ()))
        util = busy / result.end_ms if result.end_ms > 0 else 0.0
        rows.append({
            'worker': i,
            'service_ids': ','.join(s[:8] for s in sids),
            'completed': result.completed_by_worker[i],
            'busy_ms': round(busy, 3),
            'utilization': round(util, 4),
        })
    return rows


def write_summary(path, result):
    with open(path, 'w', newline='') as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS, delimiter='\t')
        writer.writeheader()
        writer.writerows(summary_rows(result))


def plot_timeline(result, path, title=None):
    """Gantt chart of task spans per worker, with failures marked."""
    spans = busy_intervals(result.trace)
    n = len(result.service_ids)
    fig, ax = plt.subplots(figsize=(8, 1.0 + 0.5 * max(n, 1)))
    owner = {}
    for i, sids in enumerate(result.service_ids):
        for sid in sids:
            owner[sid] = i
            bars = [(start, end - start) for start, end, _ in spans.get(sid, ())]
            if bars:
                ax.broken_barh(bars, (i - 0.4, 0.8), facecolors='C%d' % (i % 10),
                               edgecolor='white', linewidth=0.3)
    for e in of_kind(result.trace, 'Failed'):
        if e.service in owner:
            ax.plot(e.time_ms, owner[e.service], 'kx', markersize=8)
    ax.set_yticks(range(n))
    ax.set_yticklabels(['w%d (%d)' % (i, c) for i, c in enumerate(result.completed_by_worker)])
    ax.set_xlabel('virtual time (ms)')
    ax.set_xlim(0, max(result.end_ms, 1.0))
    ax.set_ylim(-0.6, n - 0.4)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
