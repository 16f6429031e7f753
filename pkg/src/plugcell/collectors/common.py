"""Shared plumbing for the reference collectors.

Every collector is a plugin: invoked as ``<exe> --args-json <json>``, it
prints one JSON record per line.  The view of the guest comes from the
environment so that the same code runs in the sandbox (guest root at
/guest) and in the guest's own context (guest root at /).
"""

import argparse
import json
import os
import sys
from dataclasses import dataclass


@dataclass(frozen=True)
class View:
    root: str = "/guest"
    cgroup_root: str = "/guest-cgroup"
    proc_root: str = "/proc"
    label: str = "guest"


def view_from_env(env=None):
    env = os.environ if env is None else env
    return View(
        root=env.get("PLUGCELL_GUEST_ROOT", "/guest"),
        cgroup_root=env.get("PLUGCELL_GUEST_CGROUP", "/guest-cgroup"),
        proc_root=env.get("PLUGCELL_PROC", "/proc"),
        label=env.get("PLUGCELL_LABEL", "guest"),
    )


def record(feature_type, key, payload):
    return {"feature_type": feature_type, "feature_key": str(key), "payload": payload}


def error(key, reason, **detail):
    return record("error", key, {"reason": reason, **detail})


def _memory_cgroup(proc_root, pid):
    with open(f"{proc_root}/{pid}/cgroup") as f:
        for line in f:
            _, ctrls, path = line.rstrip("\n").split(":", 2)
            if "memory" in ctrls.split(","):
                return path
    return None


def _beneath(path, parent):
    return path == parent or path.startswith(parent.rstrip("/") + "/")


def guest_pids(view):
    """Pids that belong to the guest, in ascending order.

    Membership is decided by the memory cgroup: a process is the guest's when
    its cgroup is the guest init's cgroup or below it.  That leaves out the
    sandbox (runner, plugins) and anything else sharing the pid namespace,
    and the calling process is always left out.
    """
    try:
        init_cg = _memory_cgroup(view.proc_root, 1)
    except OSError:
        init_cg = None
    me = os.getpid()
    out = []
    for name in os.listdir(view.proc_root):
        if not name.isdigit():
            continue
        pid = int(name)
        if pid == me:
            continue
        try:
            cg = _memory_cgroup(view.proc_root, pid)
        except OSError:
            continue
        if init_cg is not None and (cg is None or not _beneath(cg, init_cg)):
            continue
        out.append(pid)
    return sorted(out)


def read_stat(proc_root, pid):
    """(comm, ppid, start_time_ticks) from /proc/<pid>/stat."""
    with open(f"{proc_root}/{pid}/stat", "rb") as f:
        raw = f.read().decode(errors="replace")
    lpar, rpar = raw.index("("), raw.rindex(")")
    comm = raw[lpar + 1:rpar]
    rest = raw[rpar + 2:].split()
    return comm, int(rest[1]), int(rest[19])


def plugin_main(collect, argv=None):
    """Entry point shared by all collectors."""
    ap = argparse.ArgumentParser()
    ap.add_argument("--args-json", default="{}")
    ns = ap.parse_args(sys.argv[1:] if argv is None else argv)
    try:
        args = json.loads(ns.args_json)
    except ValueError:
        args = {}
    out = sys.stdout
    for rec in collect(view_from_env(), args if isinstance(args, dict) else {}):
        out.write(json.dumps(rec, sort_keys=True) + "\n")
    out.flush()
    return 0
