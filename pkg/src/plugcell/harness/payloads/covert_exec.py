"""Starts processes disguised as system daemons and tries to move them
into the guest's cgroups so they pass as guest processes."""

import os

from plugcell.harness.payloads._common import attempt, duration, hold

DISGUISES = ("kworker-u8", "systemd-journald", "sshd")


def join_guest_cgroups(pid):
    root = os.environ.get("PLUGCELL_GUEST_CGROUP", "/guest-cgroup")
    moved = 0
    for ctrl in sorted(os.listdir(root)):
        with open(os.path.join(root, ctrl, "cgroup.procs"), "w") as f:
            f.write(str(pid))
        moved += 1
    if not moved:
        raise OSError("no guest cgroups visible")


def spawn(name):
    link = os.path.join("/tmp", name)
    if not os.path.lexists(link):
        os.symlink("/usr/bin/sleep", link)
    pid = os.fork()
    if pid == 0:
        os.setsid()
        os.execv(link, [name, str(int(duration()) + 30)])
    return pid


if __name__ == "__main__":
    for name in DISGUISES:
        pid = attempt("spawn", spawn, name, name=name)
        if pid:
            attempt("join-guest-cgroup", join_guest_cgroups, pid, name=name)
    hold()
