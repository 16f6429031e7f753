"""Spinners in the style of ``stress -c``."""

import os
import time

from plugcell.harness.payloads._common import duration, report

WORKERS = 2


def spin(deadline):
    x = 0
    while time.monotonic() < deadline:
        for _ in range(10000):
            x += 1


if __name__ == "__main__":
    deadline = time.monotonic() + duration()
    kids = []
    for _ in range(WORKERS):
        pid = os.fork()
        if pid == 0:
            spin(deadline)
            os._exit(0)
        kids.append(pid)
    report("spin", True, workers=WORKERS)
    for pid in kids:
        os.waitpid(pid, 0)
