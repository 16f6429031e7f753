"""Read-only helpers over /proc."""

import os

CGROUP_ROOT = "/sys/fs/cgroup"


def ns_id(pid, kind):
    """Inode number identifying ``pid``'s namespace of ``kind``."""
    return os.stat(f"/proc/{pid}/ns/{kind}").st_ino


def start_time(pid):
    """Start time in clock ticks since boot (field 22 of /proc/<pid>/stat)."""
    with open(f"/proc/{pid}/stat", "rb") as f:
        raw = f.read()
    # comm may contain spaces and parens; fields resume after the last ')'
    rest = raw[raw.rindex(b")") + 2:].split()
    return int(rest[19])


def proc_state(pid):
    with open(f"/proc/{pid}/stat", "rb") as f:
        raw = f.read()
    return raw[raw.rindex(b")") + 2:].split()[0].decode()


def status_fields(pid):
    out = {}
    with open(f"/proc/{pid}/status") as f:
        for line in f:
            key, _, value = line.partition(":")
            out[key] = value.strip()
    return out


def real_uid(pid):
    return int(status_fields(pid)["Uid"].split()[0])


def cap_masks(pid):
    st = status_fields(pid)
    return {k: int(st[k], 16) for k in ("CapInh", "CapPrm", "CapEff", "CapBnd", "CapAmb")}


def ns_pid_chain(pid):
    """NSpid line: the pid as seen from each nested pid namespace."""
    return [int(x) for x in status_fields(pid).get("NSpid", str(pid)).split()]


def cgroup_membership(pid):
    """Map controller -> cgroup path (relative to the hierarchy root)."""
    out = {}
    with open(f"/proc/{pid}/cgroup") as f:
        for line in f:
            _, controllers, path = line.rstrip("\n").split(":", 2)
            for ctrl in controllers.split(","):
                if ctrl:
                    out[ctrl] = path
    return out


def controller_mounts():
    """Map v1 controller name -> mount point of its hierarchy."""
    out = {}
    with open("/proc/self/mountinfo") as f:
        for line in f:
            fields = line.split()
            sep = fields.index("-")
            fstype = fields[sep + 1]
            if fstype != "cgroup":
                continue
            mnt = fields[4]
            for opt in fields[sep + 3].split(","):
                if opt in ("rw", "ro") or "=" in opt:
                    continue
                out.setdefault(opt, mnt)
    return out


def cgroup_dirs(pid, controllers):
    """Absolute host directories of ``pid``'s cgroups for each controller."""
    mounts = controller_mounts()
    member = cgroup_membership(pid)
    out = {}
    for ctrl in controllers:
        if ctrl in mounts and ctrl in member:
            out[ctrl] = os.path.join(mounts[ctrl], member[ctrl].lstrip("/"))
    return out


def list_pids():
    return sorted(int(d) for d in os.listdir("/proc") if d.isdigit())


def pids_in_ns(ns_inode, kind="pid"):
    out = []
    for pid in list_pids():
        try:
            if ns_id(pid, kind) == ns_inode:
                out.append(pid)
        except OSError:
            continue
    return out


def mount_table():
    with open("/proc/self/mountinfo") as f:
        return f.read()
