"""cgroup v1 management: one directory per controller, created and removed
together."""

import errno
import logging
import os
import signal
import time

from plugcell.kernel import libc
from plugcell.kernel.proc import CGROUP_ROOT, controller_mounts

log = logging.getLogger(__name__)

SANDBOX_CONTROLLERS = ("cpu", "cpuacct", "memory", "pids", "blkio", "net_cls", "freezer", "cpuset")
CFS_PERIOD_US = 100000


def ensure_net_cls():
    """Mount the net_cls hierarchy if the host does not have it yet."""
    if "net_cls" in controller_mounts():
        return
    path = os.path.join(CGROUP_ROOT, "net_cls")
    os.makedirs(path, exist_ok=True)
    libc.mount("net_cls", path, "cgroup", 0, "net_cls")


def _write(path, value):
    with open(path, "w") as f:
        f.write(str(value))


def _read(path):
    with open(path) as f:
        return f.read().strip()


def block_devices():
    """major:minor of every non-virtual disk, for blkio throttling."""
    out = []
    for name in sorted(os.listdir("/sys/block")):
        if name.startswith(("loop", "ram", "zram", "dm-")):
            continue
        try:
            out.append(_read(f"/sys/block/{name}/dev"))
        except OSError:
            continue
    return out


class CgroupSet:
    """The same relative path under each managed controller hierarchy."""

    def __init__(self, relpath, controllers=SANDBOX_CONTROLLERS):
        self.relpath = relpath.strip("/")
        mounts = controller_mounts()
        self.dirs = {c: os.path.join(mounts[c], self.relpath) for c in controllers if c in mounts}

    def path(self, controller):
        return self.dirs[controller]

    def exists(self):
        return any(os.path.isdir(d) for d in self.dirs.values())

    def create(self):
        for ctrl, d in self.dirs.items():
            for attempt in range(5):
                try:
                    self._mkdirs(ctrl, d)
                    break
                except FileNotFoundError:
                    # a concurrent teardown removed an empty parent; retry
                    if attempt == 4:
                        raise
                    time.sleep(0.01)

    @staticmethod
    def _mkdirs(ctrl, d):
        root = controller_mounts()[ctrl]
        rel = os.path.relpath(d, root).split(os.sep)
        cur = root
        for part in rel:
            parent = cur
            cur = os.path.join(cur, part)
            try:
                os.mkdir(cur)
            except FileExistsError:
                continue
            if ctrl == "cpuset":
                for knob in ("cpuset.cpus", "cpuset.mems"):
                    _write(os.path.join(cur, knob), _read(os.path.join(parent, knob)))

    def apply_limits(self, limits, classid=None):
        d = self.dirs
        if "cpu" in d:
            quota = max(1000, int(limits.cpu_quota * CFS_PERIOD_US))
            _write(os.path.join(d["cpu"], "cpu.cfs_period_us"), CFS_PERIOD_US)
            _write(os.path.join(d["cpu"], "cpu.cfs_quota_us"), quota)
            _write(os.path.join(d["cpu"], "cpu.shares"), max(2, int(limits.cpu_shares)))
        if "memory" in d:
            _write(os.path.join(d["memory"], "memory.limit_in_bytes"), int(limits.memory_bytes))
            swap = os.path.join(d["memory"], "memory.memsw.limit_in_bytes")
            if os.path.exists(swap):
                _write(swap, int(limits.memory_bytes))
        if "pids" in d:
            _write(os.path.join(d["pids"], "pids.max"), int(limits.pids_max))
        if "blkio" in d:
            for dev in block_devices():
                for knob in ("blkio.throttle.write_bps_device", "blkio.throttle.read_bps_device"):
                    _write(os.path.join(d["blkio"], knob), f"{dev} {int(limits.blkio_bps)}")
        if classid is not None and "net_cls" in d:
            _write(os.path.join(d["net_cls"], "net_cls.classid"), classid)

    def add_pid(self, pid):
        for d in self.dirs.values():
            _write(os.path.join(d, "cgroup.procs"), pid)

    def pids(self, controller="pids"):
        d = self.dirs.get(controller) or next(iter(self.dirs.values()))
        try:
            return [int(x) for x in _read(os.path.join(d, "cgroup.procs")).split()]
        except FileNotFoundError:
            return []

    def all_pids(self):
        seen = set()
        for ctrl, d in self.dirs.items():
            for sub, _, files in os.walk(d):
                if "cgroup.procs" in files:
                    try:
                        seen.update(int(x) for x in _read(os.path.join(sub, "cgroup.procs")).split())
                    except OSError:
                        continue
        return sorted(seen)

    def read(self, controller, knob):
        return _read(os.path.join(self.dirs[controller], knob))

    def kill_all(self, timeout=5.0):
        """Freeze, SIGKILL every member, thaw; waits until the group is empty."""
        freezer = self.dirs.get("freezer")
        frozen = False
        if freezer and os.path.isdir(freezer):
            try:
                _write(os.path.join(freezer, "freezer.state"), "FROZEN")
                frozen = True
            except OSError:
                pass
        deadline = time.monotonic() + timeout
        while True:
            members = self.all_pids()
            for pid in members:
                try:
                    os.kill(pid, signal.SIGKILL)
                except ProcessLookupError:
                    pass
            if frozen:
                _write(os.path.join(freezer, "freezer.state"), "THAWED")
                frozen = False
            if not members:
                return True
            if time.monotonic() > deadline:
                log.warning("cgroup %s still has members %s", self.relpath, members)
                return False
            time.sleep(0.01)

    def remove(self, timeout=5.0):
        """rmdir every controller directory (children first).  Returns the
        list of directories that could not be removed."""
        left = []
        for d in self.dirs.values():
            if not os.path.isdir(d):
                continue
            subdirs = sorted((s for s, _, _ in os.walk(d)), key=len, reverse=True)
            for sub in subdirs:
                deadline = time.monotonic() + timeout
                while True:
                    try:
                        os.rmdir(sub)
                        break
                    except FileNotFoundError:
                        break
                    except OSError as e:
                        if e.errno != errno.EBUSY or time.monotonic() > deadline:
                            left.append(sub)
                            break
                        time.sleep(0.01)
        return left

    def prune_parents(self):
        """Remove now-empty ancestor directories up to the hierarchy root."""
        mounts = controller_mounts()
        for ctrl, d in self.dirs.items():
            root = mounts[ctrl]
            cur = os.path.dirname(d)
            while cur.startswith(root + "/"):
                try:
                    os.rmdir(cur)
                except OSError:
                    break
                cur = os.path.dirname(cur)


def cgroup_tree_snapshot(controllers=SANDBOX_CONTROLLERS):
    """Sorted list of every cgroup directory under the managed hierarchies."""
    out = []
    for ctrl, root in sorted(controller_mounts().items()):
        if ctrl not in controllers:
            continue
        for sub, _, _ in os.walk(root):
            out.append(f"{ctrl}:{os.path.relpath(sub, root)}")
    return sorted(set(out))
