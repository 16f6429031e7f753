"""Run staged plugins at their configured frequencies until told to stop."""

import logging
import time
from dataclasses import dataclass, field

from plugcell.runner.cycle import run_cycle

log = logging.getLogger(__name__)

DEFAULT_TICK_S = 0.1


class RealClock:
    def now(self):
        return time.monotonic()

    def sleep(self, seconds):
        if seconds > 0:
            time.sleep(seconds)


class FakeClock:
    """Deterministic clock: time moves only through ``sleep`` and ``advance``."""

    def __init__(self, start=0.0):
        self.t = float(start)

    def now(self):
        return self.t

    def sleep(self, seconds):
        self.t += max(0.0, seconds)

    def advance(self, seconds):
        self.t += seconds


@dataclass
class LoopStats:
    cycles: int = 0
    records: int = 0
    runs: dict = field(default_factory=dict)
    stopped_by: str = ""


def schedule_loop(plugins, view, clock, control, emit, *, runner=run_cycle, tick=DEFAULT_TICK_S,
                  fanout=4):
    """Run plugins on a fixed grid until ``control`` yields ``stop``.

    ``control()`` returns the verbs received since the last call.  Every plugin
    is first due at the loop start and then every ``freq_s``; a cycle runs all
    plugins that are due.  ``run-once`` forces an immediate cycle of every
    plugin without shifting their schedules.  A ``stop`` seen while a cycle is
    in flight takes effect after that cycle's records are emitted.
    """
    plugins = list(plugins)
    stats = LoopStats(runs={p.name: 0 for p in plugins})
    start = clock.now()
    due_at = {p.name: start for p in plugins}
    while True:
        verbs = control()
        if "stop" in verbs:
            stats.stopped_by = "stop"
            break
        now = clock.now()
        if "run-once" in verbs:
            batch = plugins
        else:
            batch = [p for p in plugins if due_at[p.name] <= now]
        if batch:
            records = runner(batch, view, stats.cycles, fanout=fanout)
            emit(records)
            stats.records += len(records)
            for p in batch:
                stats.runs[p.name] += 1
                while due_at[p.name] <= now:
                    due_at[p.name] += p.freq_s
            stats.cycles += 1
            continue
        wait = min(due_at.values()) - now if due_at else tick
        clock.sleep(min(tick, wait))
    return stats
