"""Allocator in the style of ``stress -m 1``: a child grabs and touches
memory until it dies, and the parent respawns it for the whole window."""

import os
import time

from plugcell.harness.payloads._common import duration, report

CHUNK = 16 * 1024 * 1024


def allocate_forever():
    hoard = []
    while True:
        hoard.append(b"\x5a" * CHUNK)


def respawn(work):
    deadline = time.monotonic() + duration()
    spawned = 0
    while time.monotonic() < deadline:
        try:
            pid = os.fork()
        except OSError as e:
            report("fork", False, e)
            time.sleep(0.05)
            continue
        if pid == 0:
            try:
                work()
            finally:
                os._exit(1)
        spawned += 1
        os.waitpid(pid, 0)
    report("respawn", True, children=spawned)


if __name__ == "__main__":
    respawn(allocate_forever)
