"""Resolve a container identifier into the kernel handles the sandbox needs."""

import http.client
import json
import logging
import os
import socket
from dataclasses import dataclass, field
from urllib.parse import quote

from plugcell.errors import EngineUnavailable, NotFound, NotRunning
from plugcell.kernel import proc

log = logging.getLogger(__name__)

# controllers whose guest subtree is exposed to plugins
# cpuacct carries the usage counters of the cpu controller on split v1 mounts
GUEST_CONTROLLERS = ("cpu", "cpuacct", "memory", "pids", "blkio")


@dataclass(frozen=True)
class GuestTarget:
    container_id: str
    rootfs_path: str
    pid_ns_ref: str
    net_ns_ref: str
    cgroup_paths: dict = field(default_factory=dict)
    owner_uid: int = 0
    init_pid: int = 0
    pid_ns_id: int = 0
    net_ns_id: int = 0
    start_time: int = 0

    def __hash__(self):
        return hash((self.container_id, self.init_pid, self.pid_ns_id, self.start_time))

    def to_dict(self):
        return {
            "container_id": self.container_id,
            "rootfs_path": self.rootfs_path,
            "pid_ns_ref": self.pid_ns_ref,
            "net_ns_ref": self.net_ns_ref,
            "cgroup_paths": dict(self.cgroup_paths),
            "owner_uid": self.owner_uid,
            "init_pid": self.init_pid,
            "pid_ns_id": self.pid_ns_id,
            "net_ns_id": self.net_ns_id,
            "start_time": self.start_time,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class EngineAdapter:
    """Answers one question: where does container ``cid`` live on the host."""

    def inspect(self, container_id):
        """Return (init_pid, rootfs_path) or raise NotFound/NotRunning."""
        raise NotImplementedError


class ExplicitAdapter(EngineAdapter):
    """Engine-less adapter for a guest given as an explicit pid and rootfs."""

    def __init__(self, init_pid, rootfs_path):
        self.init_pid = int(init_pid)
        self.rootfs_path = rootfs_path

    def inspect(self, container_id):
        if not os.path.isdir(self.rootfs_path):
            raise NotFound(f"rootfs {self.rootfs_path} does not exist")
        if not os.path.exists(f"/proc/{self.init_pid}"):
            raise NotRunning(f"pid {self.init_pid} is not running")
        if proc.proc_state(self.init_pid) in ("Z", "X"):
            raise NotRunning(f"pid {self.init_pid} is a zombie")
        return self.init_pid, self.rootfs_path


class _UnixHTTPConnection(http.client.HTTPConnection):
    def __init__(self, path, timeout=5.0):
        super().__init__("localhost", timeout=timeout)
        self._path = path

    def connect(self):
        self.sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        self.sock.settimeout(self.timeout)
        self.sock.connect(self._path)


class DockerAdapter(EngineAdapter):
    """Read-only metadata queries against a Docker-compatible API socket.

    Only GET requests are ever issued.
    """

    def __init__(self, socket_path="/var/run/docker.sock"):
        self.socket_path = socket_path

    def _get(self, path):
        conn = _UnixHTTPConnection(self.socket_path)
        try:
            conn.request("GET", path)
            resp = conn.getresponse()
            body = resp.read()
        except OSError as e:
            raise EngineUnavailable(f"cannot query {self.socket_path}: {e}") from e
        finally:
            conn.close()
        return resp.status, body

    def inspect(self, container_id):
        status, body = self._get(f"/containers/{quote(container_id, safe='')}/json")
        if status == 404:
            raise NotFound(f"no such container: {container_id}")
        if status != 200:
            raise EngineUnavailable(f"engine answered {status}")
        try:
            info = json.loads(body)
            state = info["State"]
            pid = int(state.get("Pid") or 0)
            running = bool(state.get("Running"))
        except (ValueError, KeyError, TypeError) as e:
            raise EngineUnavailable(f"unparseable inspect output: {e}") from e
        if not running or pid <= 0:
            raise NotRunning(f"container {container_id} is not running")
        # the merged overlay dir is what the guest sees; /proc/<pid>/root works
        # for any storage driver
        rootfs = (info.get("GraphDriver") or {}).get("Data", {}).get("MergedDir")
        if not rootfs or not os.path.isdir(rootfs):
            rootfs = f"/proc/{pid}/root"
        return pid, rootfs


def resolve_guest(container_id, engine):
    pid, rootfs = engine.inspect(container_id)
    rootfs = os.path.abspath(rootfs)
    if not os.path.isdir(rootfs):
        raise NotFound(f"rootfs {rootfs} is not a directory")
    try:
        target = GuestTarget(
            container_id=container_id,
            rootfs_path=rootfs,
            pid_ns_ref=f"/proc/{pid}/ns/pid",
            net_ns_ref=f"/proc/{pid}/ns/net",
            cgroup_paths=proc.cgroup_dirs(pid, GUEST_CONTROLLERS),
            owner_uid=proc.real_uid(pid),
            init_pid=pid,
            pid_ns_id=proc.ns_id(pid, "pid"),
            net_ns_id=proc.ns_id(pid, "net"),
            start_time=proc.start_time(pid),
        )
    except FileNotFoundError as e:
        raise NotRunning(f"guest init {pid} vanished during resolution") from e
    log.debug("resolved %s -> pid %d rootfs %s", container_id, pid, rootfs)
    return target


def guest_alive(g):
    """True iff the guest's init is the same process that was resolved."""
    try:
        return (
            proc.start_time(g.init_pid) == g.start_time
            and proc.ns_id(g.init_pid, "pid") == g.pid_ns_id
            and proc.proc_state(g.init_pid) not in ("Z", "X")
        )
    except (OSError, ValueError, IndexError):
        return False
