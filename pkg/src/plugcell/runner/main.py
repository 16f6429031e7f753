"""The plugin-runner process that lives inside the sandbox.

It reads /comm/plugins-to-run, stages the plugins during the fetch window,
signals the host, then runs collection cycles until a ``stop`` verb shows up
in /comm/control.  Records are appended to /comm/output.ndjson; progress
events go to /comm/status.
"""

import argparse
import json
import logging
import os
import sys
import time

from plugcell.errors import PlugcellError
from plugcell.runner.cycle import DEFAULT_FANOUT, GUEST_CGROUP_ROOT, GUEST_ROOT, GuestView
from plugcell.runner.fetch import DEFAULT_STORE, FetchPolicy, fetch_plugins
from plugcell.runner.manifest import PluginManifest, parse_manifest
from plugcell.runner.schedule import RealClock, schedule_loop

log = logging.getLogger("plugcell.runner")

FETCH_CLOSED = "fetch-closed"


class ControlReader:
    """Tails the append-only control file, returning new verbs per call."""

    def __init__(self, path):
        self.path = path
        self.offset = 0
        self.partial = b""

    def __call__(self):
        try:
            with open(self.path, "rb") as f:
                f.seek(self.offset)
                data = f.read()
        except FileNotFoundError:
            return []
        self.offset += len(data)
        data = self.partial + data
        lines = data.split(b"\n")
        self.partial = lines.pop()
        return [ln.decode(errors="replace").strip() for ln in lines if ln.strip()]


class AppendFile:
    """Whole-line appends; the runner is the file's only writer."""

    def __init__(self, path):
        self.fd = os.open(path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)

    def line(self, text):
        os.write(self.fd, text.encode() + b"\n")

    def close(self):
        os.close(self.fd)


def _status(status, event, **fields):
    status.line(json.dumps({"event": event, "time": time.time(), **fields}, sort_keys=True))


def _wait_for_verb(control, verb, timeout, pending):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        verbs = control()
        if verb in verbs:
            pending.extend(v for v in verbs if v != verb)
            return True
        pending.extend(verbs)
        time.sleep(0.02)
    return False


def _parse(argv):
    ap = argparse.ArgumentParser(prog="plugcell-runner")
    ap.add_argument("--comm", default="/comm")
    ap.add_argument("--staging", default="/staging")
    ap.add_argument("--store", default=DEFAULT_STORE)
    ap.add_argument("--label", default="guest")
    ap.add_argument("--guest-root", default=GUEST_ROOT)
    ap.add_argument("--guest-cgroup", default=GUEST_CGROUP_ROOT)
    ap.add_argument("--fanout", type=int, default=DEFAULT_FANOUT)
    ap.add_argument("--tick", type=float, default=0.1)
    ap.add_argument("--fetch-timeout-s", type=float, default=10.0)
    ap.add_argument("--seal-wait-s", type=float, default=120.0)
    return ap.parse_args(argv)


def main(argv=None):
    args = _parse(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(asctime)s runner %(levelname)s %(message)s")
    comm = args.comm
    status = AppendFile(os.path.join(comm, "status"))
    output = AppendFile(os.path.join(comm, "output.ndjson"))
    control = ControlReader(os.path.join(comm, "control"))
    pending = []

    try:
        with open(os.path.join(comm, "plugins-to-run"), "rb") as f:
            manifest = parse_manifest(f.read())
    except FileNotFoundError:
        manifest = PluginManifest()
    except PlugcellError as e:
        _status(status, "manifest-error", **e.to_dict())
        return 2
    _status(status, "manifest", plugins=manifest.names())

    def seal(staged):
        _status(status, "fetch-done", staged=[{"name": p.name, "digest": p.digest} for p in staged])
        if not _wait_for_verb(control, FETCH_CLOSED, args.seal_wait_s, pending):
            raise PlugcellError("host never closed the fetch window")

    policy = FetchPolicy(staging_dir=args.staging, store_dir=args.store,
                         timeout_s=args.fetch_timeout_s, seal=seal)
    try:
        plugins = fetch_plugins(manifest, policy)
    except PlugcellError as e:
        _status(status, "fetch-failed", **e.to_dict())
        return 3
    _status(status, "collecting")

    view = GuestView(label=args.label, root=args.guest_root, cgroup_root=args.guest_cgroup)

    def verbs():
        out = pending[:] + control()
        pending.clear()
        return out

    def emit(records):
        for r in records:
            output.line(r.to_line())

    stats = schedule_loop(plugins, view, RealClock(), verbs, emit, tick=args.tick, fanout=args.fanout)
    _status(status, "stopped", cycles=stats.cycles, records=stats.records, runs=stats.runs)
    output.close()
    status.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
