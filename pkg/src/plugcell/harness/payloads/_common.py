"""Helpers shared by the attack payloads.

Payloads run either inside a sandbox (guest root at /guest) or directly in
the guest (guest root at /).  They print one JSON line per attempted
operation; the harness keeps those as evidence only and decides outcomes
from its own probes.
"""

import errno
import json
import os
import sys
import time


def guest_root():
    return os.environ.get("PLUGCELL_GUEST_ROOT", "/guest")


def in_guest(path):
    return os.path.join(guest_root(), path.lstrip("/"))


def duration():
    return float(os.environ.get("PLUGCELL_ATTACK_SECONDS", "5"))


def target():
    host, _, port = os.environ.get("PLUGCELL_ATTACK_TARGET", "").rpartition(":")
    return host, int(port or 0)


def report(op, ok, err=None, **extra):
    line = {"op": op, "ok": ok, **extra}
    if err is not None:
        line["errno"] = errno.errorcode.get(getattr(err, "errno", None) or 0, type(err).__name__)
        line["error"] = str(err)[:200]
    sys.stdout.write(json.dumps(line, sort_keys=True) + "\n")
    sys.stdout.flush()


def attempt(op, fn, *args, **extra):
    try:
        result = fn(*args)
    except Exception as e:  # noqa: BLE001 - every failure is a data point
        report(op, False, e, **extra)
        return None
    report(op, True, **extra)
    return True if result is None else result


def hold(seconds=None):
    """Keep the payload alive for the attack window."""
    time.sleep(duration() if seconds is None else seconds)


def victim_info():
    with open(in_guest("/srv/victim.json")) as f:
        info = json.load(f)
    # outside the guest's pid namespace the harness passes the host pid
    if os.environ.get("PLUGCELL_VICTIM_PID"):
        info["pid"] = int(os.environ["PLUGCELL_VICTIM_PID"])
    return info
