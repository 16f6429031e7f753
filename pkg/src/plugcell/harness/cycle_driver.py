"""Runs the reference collectors in a loop and reports timings.

The same driver runs inside a sandbox and directly in a guest, so that the
two locations execute identical code.  Prints one JSON object when done;
with ``--linger`` it then stays alive so the caller can read its cgroup's
memory before it goes away.
"""

import argparse
import json
import os
import sys
import time

from plugcell.runner.cycle import GuestView, run_cycle
from plugcell.runner.fetch import DEFAULT_STORE, StagedPlugin

COLLECTORS = ("os", "procs", "open_files", "connections", "metrics")


def store_plugins(names=COLLECTORS, store=DEFAULT_STORE):
    return [StagedPlugin(name=n, path=os.path.join(store, n), digest="") for n in names]


def main(argv=None):
    ap = argparse.ArgumentParser(prog="plugcell-cycle-driver")
    ap.add_argument("--cycles", type=int, default=10)
    ap.add_argument("--duration-s", type=float, default=0.0,
                    help="keep cycling for this long instead of a fixed count")
    ap.add_argument("--interval-s", type=float, default=0.0)
    ap.add_argument("--guest-root", default="/guest")
    ap.add_argument("--guest-cgroup", default="/guest-cgroup")
    ap.add_argument("--label", default="guest")
    ap.add_argument("--records", action="store_true", help="include the last cycle's records")
    ap.add_argument("--linger", action="store_true")
    ap.add_argument("--fanout", type=int, default=4)
    args = ap.parse_args(argv)

    view = GuestView(label=args.label, root=args.guest_root, cgroup_root=args.guest_cgroup)
    plugins = store_plugins()
    times, records = [], []
    end = time.monotonic() + args.duration_s
    cycle = 0
    while (cycle < args.cycles) if not args.duration_s else (time.monotonic() < end):
        t0 = time.monotonic()
        records = run_cycle(plugins, view, cycle=cycle, fanout=args.fanout)
        times.append((time.monotonic() - t0) * 1000.0)
        cycle += 1
        if args.interval_s:
            time.sleep(args.interval_s)
    out = {"cycles": cycle, "cycle_ms": times}
    if args.records:
        out["records"] = [r.to_dict() for r in records]
    sys.stdout.write("RESULT " + json.dumps(out, sort_keys=True) + "\n")
    sys.stdout.flush()
    if args.linger:
        time.sleep(600)
    return 0


if __name__ == "__main__":
    sys.exit(main())
