"""Run code or commands inside another process's namespaces.

``run_in_ns`` forks, joins the namespaces in the child and calls a Python
function there, shipping the result back over a pipe.  The ``main`` entry
point is an nsenter-like helper used for commands that must also live in a
target's pid namespace (setns on a pid namespace only affects children).
"""

import argparse
import os
import pickle
import sys

from plugcell.kernel import caps, libc, proc

# joining order matters: user first, mount last so /proc paths stay valid
NS_ORDER = ("user", "ipc", "uts", "net", "pid", "cgroup", "mnt")


def open_ns(pid, kinds):
    return {k: os.open(f"/proc/{pid}/ns/{k}", os.O_RDONLY | os.O_CLOEXEC) for k in kinds}


def join(fds):
    for kind in NS_ORDER:
        if kind in fds:
            libc.setns(fds[kind], libc.NS_FLAGS[kind])


def run_in_ns(target, kinds, fn, *args):
    """Call ``fn(*args)`` in a forked child inside ``target``'s namespaces.

    ``target`` is a pid or a ready dict of kind -> namespace fd.  Exceptions
    raised in the child are re-raised in the caller.
    """
    fds = target if isinstance(target, dict) else open_ns(target, kinds)
    own = not isinstance(target, dict)
    r, w = os.pipe()
    try:
        pid = os.fork()
    except BaseException:
        os.close(r)
        os.close(w)
        raise
    if pid == 0:
        os.close(r)
        try:
            join(fds)
            if "mnt" in fds:
                os.chdir("/")
            result = (True, fn(*args))
        except BaseException as e:  # noqa: BLE001 - shipped to the parent
            result = (False, e)
        try:
            data = pickle.dumps(result)
        except Exception as e:  # unpicklable result
            data = pickle.dumps((False, RuntimeError(repr(e))))
        with os.fdopen(w, "wb") as f:
            f.write(data)
        os._exit(0)
    os.close(w)
    with os.fdopen(r, "rb") as f:
        data = f.read()
    os.waitpid(pid, 0)
    if own:
        for fd in fds.values():
            os.close(fd)
    if not data:
        raise RuntimeError("namespace helper died without a result")
    ok, value = pickle.loads(data)
    if not ok:
        raise value
    return value


def _adopt_caps(masks):
    for cap in range(caps.last_cap() + 1):
        if not masks["CapBnd"] >> cap & 1:
            libc.capbset_drop(cap)
    libc.capset(masks["CapEff"], masks["CapPrm"], masks["CapInh"])


def _parse(argv):
    ap = argparse.ArgumentParser(prog="plugcell-nsexec")
    ap.add_argument("--target", type=int, required=True)
    ap.add_argument("--ns", default="ipc,uts,net,pid,mnt")
    ap.add_argument("--cgroup-procs", action="append", default=[],
                    help="cgroup.procs file to join before exec")
    ap.add_argument("--uid", type=int)
    ap.add_argument("--gid", type=int)
    ap.add_argument("--cwd", default="/")
    ap.add_argument("--drop-caps", action="store_true",
                    help="clear every capability before exec")
    ap.add_argument("--match-caps", action="store_true",
                    help="adopt the target's bounding and effective capability sets")
    ap.add_argument("cmd", nargs=argparse.REMAINDER)
    args = ap.parse_args(argv)
    if args.cmd and args.cmd[0] == "--":
        args.cmd = args.cmd[1:]
    if not args.cmd:
        ap.error("missing command")
    return args


def main(argv=None):
    args = _parse(sys.argv[1:] if argv is None else argv)
    for path in args.cgroup_procs:
        with open(path, "w") as f:
            f.write(str(os.getpid()))
    kinds = [k for k in args.ns.split(",") if k]
    target_caps = proc.cap_masks(args.target) if args.match_caps else None
    fds = open_ns(args.target, kinds)
    root_fd = os.open(f"/proc/{args.target}/root", os.O_RDONLY | os.O_DIRECTORY)
    join(fds)
    os.fchdir(root_fd)
    os.chroot(".")
    os.chdir(args.cwd)
    pid = os.fork()
    if pid == 0:
        if args.gid is not None:
            os.setgroups([])
            os.setresgid(args.gid, args.gid, args.gid)
        if args.uid is not None:
            os.setresuid(args.uid, args.uid, args.uid)
        if target_caps is not None:
            _adopt_caps(target_caps)
        if args.drop_caps:
            libc.capset(0, 0, 0)
        try:
            os.execvp(args.cmd[0], args.cmd)
        except OSError as e:
            print(f"nsexec: {args.cmd[0]}: {e}", file=sys.stderr)
            os._exit(127)
    _, status = os.waitpid(pid, 0)
    return os.waitstatus_to_exitcode(status)


if __name__ == "__main__":
    sys.exit(main())
