"""Sandbox lifecycle: build against a guest, exec the runner, tear down."""

import enum
import json
import logging
import os
import select
import shutil
import signal
import subprocess
import sys
import time
import uuid
from dataclasses import dataclass, field

import plugcell
from plugcell.errors import (
    BuildFailed, ExecFailed, GuestGone, PolicyInvalid, SandboxNotReady, TornDown,
)
from plugcell.guest import guest_alive
from plugcell.kernel import libc, proc
from plugcell.kernel.cgroups import CgroupSet, ensure_net_cls
from plugcell.policy import render_firewall, render_seccomp, validate_policy
from plugcell.policy.model import GUEST_MOUNT, LocalhostMode, MountMode, Sharing
from plugcell.runtime import firewall

log = logging.getLogger(__name__)

DEFAULT_BASE_DIR = "/run/plugcell"
DEFAULT_CGROUP_PARENT = "plugcell"
CODE_DIR = os.path.dirname(os.path.dirname(os.path.abspath(plugcell.__file__)))

# build steps in execution order; also the names reported by BUILD_FAILED
STEPS = (
    "prepare", "namespaces", "uid-map", "cgroup", "mounts", "firewall",
    "capabilities", "no-new-privileges", "seccomp", "ready",
)
COMM_FILES_HOST = ("plugins-to-run", "control")
COMM_FILES_SANDBOX = ("output.ndjson", "runner.log", "status")


class State(str, enum.Enum):
    BUILDING = "BUILDING"
    READY = "READY"
    RUNNING = "RUNNING"
    TORN_DOWN = "TORN_DOWN"


@dataclass
class SandboxHandle:
    sandbox_id: str
    runner_pid: int = 0
    cgroup_path: str = ""
    classid: int = 0
    state: State = State.BUILDING
    comm_dir: str = ""
    run_dir: str = ""
    stage1_pid: int = 0
    uid: int = 0
    guest_pid: int = 0
    guest_net_ns: int = 0
    proxy_pid: int = 0
    ordinal: int = 0
    build_steps: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    # live-process-only state, never serialized
    _status_fd: int = field(default=-1, repr=False)
    _cmd_fd: int = field(default=-1, repr=False)
    _netns_fd: int = field(default=-1, repr=False)
    _stage1: object = field(default=None, repr=False)
    _proxy: object = field(default=None, repr=False)

    @property
    def staging_dir(self):
        return os.path.join(self.run_dir, "staging")

    def to_dict(self):
        return {
            "sandbox_id": self.sandbox_id, "runner_pid": self.runner_pid,
            "cgroup_path": self.cgroup_path, "classid": self.classid,
            "state": self.state.value, "comm_dir": self.comm_dir, "run_dir": self.run_dir,
            "stage1_pid": self.stage1_pid, "uid": self.uid, "guest_pid": self.guest_pid,
            "guest_net_ns": self.guest_net_ns, "proxy_pid": self.proxy_pid,
            "ordinal": self.ordinal,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["state"] = State(d["state"])
        return cls(**d)


@dataclass
class TeardownReport:
    sandbox_id: str
    resources: dict = field(default_factory=dict)

    @property
    def nothing_to_do(self):
        return all(v == "absent" for v in self.resources.values())

    @property
    def ok(self):
        return all(v in ("reclaimed", "absent") for v in self.resources.values())


# -- ordinal allocation -------------------------------------------------------

def reserve_ordinal(base_dir=DEFAULT_BASE_DIR, limit=4096):
    """Reserve a host-unique small integer for classid and uid derivation."""
    d = os.path.join(base_dir, "ordinals")
    os.makedirs(d, exist_ok=True)
    for n in range(1, limit):
        path = os.path.join(d, str(n))
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY, 0o644)
        except FileExistsError:
            continue
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return n
    raise BuildFailed("prepare", "no free sandbox ordinal")


def release_ordinal(n, base_dir=DEFAULT_BASE_DIR):
    try:
        os.unlink(os.path.join(base_dir, "ordinals", str(n)))
        return True
    except FileNotFoundError:
        return False


# -- build --------------------------------------------------------------------

class _Builder:
    def __init__(self, guest, policy, handle, fail_at, step_hook, timeout):
        self.guest = guest
        self.policy = policy
        self.h = handle
        self.fail_at = fail_at
        self.step_hook = step_hook
        self.timeout = timeout
        self.undo = []
        self.buf = b""

    def done(self, step):
        self.h.build_steps.append(step)
        self.h.timings[step] = time.monotonic()
        if self.step_hook is not None:
            self.step_hook(step, self.h)
        if self.fail_at == step:
            raise BuildFailed(step, "injected failure")
        if not guest_alive(self.guest):
            raise GuestGone(step)

    def event(self, expected):
        deadline = time.monotonic() + self.timeout
        while b"\n" not in self.buf:
            left = deadline - time.monotonic()
            if left <= 0:
                raise BuildFailed(expected, "timed out waiting for sandbox")
            ready, _, _ = select.select([self.h._status_fd], [], [], left)
            if not ready:
                continue
            chunk = os.read(self.h._status_fd, 4096)
            if not chunk:
                if not guest_alive(self.guest):
                    raise GuestGone(expected)
                raise BuildFailed(expected, "sandbox process exited")
            self.buf += chunk
        line, self.buf = self.buf.split(b"\n", 1)
        ev = json.loads(line)
        if ev.get("event") == "error":
            if not guest_alive(self.guest):
                raise GuestGone(ev.get("step", expected))
            raise BuildFailed(ev.get("step", expected), ev.get("cause", "unknown"))
        if ev.get("event") != expected:
            raise BuildFailed(expected, f"unexpected event {ev}")
        return ev

    def command(self, line):
        os.write(self.h._cmd_fd, (line + "\n").encode())

    def rollback(self):
        for name, fn in reversed(self.undo):
            try:
                fn()
            except Exception as e:  # noqa: BLE001 - keep unwinding
                log.warning("rollback of %s failed: %s", name, e)
        self.undo.clear()


def _prepare_dirs(h, uid):
    os.makedirs(h.run_dir, mode=0o755)
    os.chmod(h.run_dir, 0o755)
    for sub in ("comm", "staging", "root"):
        os.mkdir(os.path.join(h.run_dir, sub), 0o755)
    for name in COMM_FILES_HOST + COMM_FILES_SANDBOX:
        path = os.path.join(h.comm_dir, name)
        with open(path, "w"):
            pass
        os.chmod(path, 0o644)


def _chown_sandbox_files(h, uid):
    for name in COMM_FILES_SANDBOX:
        os.chown(os.path.join(h.comm_dir, name), uid, uid)
    os.chown(h.staging_dir, uid, uid)


def create_sandbox(guest, policy, *, base_dir=DEFAULT_BASE_DIR, cgroup_parent=DEFAULT_CGROUP_PARENT,
                   sandbox_id=None, hosts=(), validate=True, fail_at=None, step_hook=None,
                   timeout=30.0, ordinal=0):
    """Build a sandbox for ``guest`` under ``policy``; returns a READY handle.

    ``fail_at`` and ``step_hook`` exist for fault-injection tests: the first
    aborts the build right after the named step, the second is called after
    every step with (step, handle).
    """
    if validate:
        report = validate_policy(policy)
        if not report.ok:
            raise PolicyInvalid(report)
    program = render_seccomp(policy)
    if not guest_alive(guest):
        raise GuestGone("prepare", "guest is not running")
    ensure_net_cls()

    sid = sandbox_id or uuid.uuid4().hex[:12]
    run_dir = os.path.join(base_dir, sid)
    h = SandboxHandle(
        sandbox_id=sid, classid=policy.classid, comm_dir=os.path.join(run_dir, "comm"),
        run_dir=run_dir, uid=policy.uid_map.host_uid, guest_pid=guest.init_pid,
        guest_net_ns=guest.net_ns_id, cgroup_path=f"{cgroup_parent}/{sid}", ordinal=ordinal,
    )
    h.timings["start"] = time.monotonic()
    b = _Builder(guest, policy, h, fail_at, step_hook, timeout)
    try:
        _build(b, guest, policy, program, hosts)
    except BaseException as e:
        b.rollback()
        _close_fds(h)
        h.state = State.TORN_DOWN
        if isinstance(e, (BuildFailed, GuestGone)):
            raise
        step = STEPS[min(len(h.build_steps), len(STEPS) - 1)]
        raise BuildFailed(step, e) from e
    b.undo.clear()
    h.state = State.READY
    return h


def _build(b, guest, policy, program, hosts):
    h = b.h
    # prepare: private run dir holding comm, staging and the root mountpoint
    _prepare_dirs(h, policy.uid_map.host_uid)
    b.undo.append(("run-dir", lambda: shutil.rmtree(h.run_dir, ignore_errors=True)))
    b.done("prepare")

    # namespaces: stage 1 joins/creates pid+net, stage 2 adds mnt/ipc/uts
    status_r, status_w = os.pipe()
    cmd_r, cmd_w = os.pipe()
    h._status_fd, h._cmd_fd = status_r, cmd_w
    cfg = {
        "sandbox_id": h.sandbox_id,
        "guest_pid": guest.init_pid,
        "share_pid": policy.sharing.pid is Sharing.SHARED_WITH_GUEST,
        "share_net": policy.sharing.net is Sharing.SHARED_WITH_GUEST,
        "root_dir": os.path.join(h.run_dir, "root"),
        "comm_dir": h.comm_dir,
        "staging_dir": h.staging_dir,
        "rootfs": guest.rootfs_path,
        "rootfs_writable": any(m.target == GUEST_MOUNT and m.mode is MountMode.READ_WRITE
                               for m in policy.mounts),
        "cgroup_mounts": [[m.source, m.target.rsplit("/", 1)[1]] for m in policy.mounts
                          if m.target.startswith("/guest-cgroup/")],
        "code_dir": CODE_DIR,
        "uid": policy.uid_map.host_uid,
        "gid": policy.uid_map.host_uid,
        "caps": sorted(policy.caps.caps),
        "seccomp": program.bytecode.hex(),
        "hostname": f"plugcell-{h.sandbox_id}",
        "hosts": [list(x) for x in hosts],
        "tmp_bytes": int(policy.limits.memory_bytes),
        "bind_allowlist": list(policy.bind_port_allowlist) if not policy.allow_bind else [],
        "status_fd": status_w,
        "cmd_fd": cmd_r,
    }
    env = dict(os.environ, PYTHONPATH=CODE_DIR)
    with open(os.path.join(h.run_dir, "stage.log"), "ab") as errlog:
        stage1 = subprocess.Popen(
            [sys.executable, "-m", "plugcell.runtime.stage"],
            stdin=subprocess.PIPE, stdout=errlog, stderr=errlog,
            pass_fds=(status_w, cmd_r), env=env, cwd="/",
        )
    os.close(status_w)
    os.close(cmd_r)
    h._stage1 = stage1
    h.stage1_pid = stage1.pid
    b.undo.append(("processes", lambda: _kill_processes(h)))
    stage1.stdin.write((json.dumps(cfg) + "\n").encode())
    stage1.stdin.close()
    ev = b.event("namespaces")
    h.runner_pid = int(ev["runner_pid"])
    h._netns_fd = os.open(f"/proc/{h.runner_pid}/ns/net", os.O_RDONLY | os.O_CLOEXEC)
    b.done("namespaces")

    # uid map: identity mapping to a dedicated host uid; the switch itself
    # happens in stage 2 right before capabilities are configured
    _chown_sandbox_files(h, policy.uid_map.host_uid)
    b.done("uid-map")

    cg = CgroupSet(h.cgroup_path)
    b.undo.append(("cgroup", lambda: _remove_cgroup(cg)))
    cg.create()
    cg.apply_limits(policy.limits, classid=policy.classid)
    cg.add_pid(h.runner_pid)
    # stage 1 hands out broker-bound sockets; they must carry the classid too
    with open(os.path.join(cg.path("net_cls"), "cgroup.procs"), "w") as f:
        f.write(str(h.stage1_pid))
    b.done("cgroup")

    b.command("go")
    b.event("mounts")
    b.done("mounts")

    netns = {"net": h._netns_fd}
    b.undo.append(("firewall", lambda: firewall.remove(netns, h.sandbox_id)))
    firewall.install(netns, h.sandbox_id, render_firewall(policy))
    if policy.localhost_mode is LocalhostMode.HTTP_GET_ONLY:
        _start_proxy(h, policy)
        b.undo.append(("proxy", lambda: _stop_proxy(h)))
    b.done("firewall")

    b.command("go")
    for step in ("capabilities", "no-new-privileges", "seccomp"):
        b.event(step)
        b.done(step)
    b.event("ready")
    b.done("ready")


def _aux_cgroup(h):
    return CgroupSet(h.cgroup_path + "-aux", controllers=("pids", "memory", "freezer"))


def _start_proxy(h, policy):
    aux = _aux_cgroup(h)
    aux.create()
    procs = os.path.join(aux.path("pids"), "cgroup.procs")
    h._proxy = subprocess.Popen(
        [sys.executable, "-m", "plugcell.runtime.proxy",
         "--netns", f"/proc/{h.runner_pid}/ns/net", "--port", str(policy.proxy_port),
         "--uid", "65534", "--cgroup-procs", procs,
         "--cgroup-procs", os.path.join(aux.path("memory"), "cgroup.procs"),
         "--cgroup-procs", os.path.join(aux.path("freezer"), "cgroup.procs")],
        stdout=subprocess.PIPE, stderr=subprocess.DEVNULL, env=dict(os.environ, PYTHONPATH=CODE_DIR),
    )
    line = h._proxy.stdout.readline()
    if not line.startswith(b"listening"):
        raise BuildFailed("firewall", "localhost proxy did not start")
    h.proxy_pid = h._proxy.pid


def _stop_proxy(h):
    aux = _aux_cgroup(h)
    aux.kill_all()
    left = aux.remove()
    aux.prune_parents()
    if h._proxy is not None:
        h._proxy.wait()
        h._proxy.stdout.close()
        h._proxy = None
    return not left


def _kill_processes(h):
    for pid in (h.runner_pid, h.stage1_pid):
        if pid and _belongs_to(h, pid):
            try:
                os.kill(pid, signal.SIGKILL)
            except ProcessLookupError:
                pass
    if h._stage1 is not None:
        h._stage1.wait()


def _belongs_to(h, pid):
    """Guard against pid reuse: the pid must be ours or in our cgroup."""
    if h._stage1 is not None and pid in (h._stage1.pid, h.runner_pid):
        return True
    try:
        return any(p.endswith("/" + h.sandbox_id) for p in proc.cgroup_membership(pid).values())
    except OSError:
        return False


def _remove_cgroup(cg):
    cg.kill_all()
    left = cg.remove()
    cg.prune_parents()
    return not left


def _close_fds(h):
    for name in ("_status_fd", "_cmd_fd", "_netns_fd"):
        fd = getattr(h, name)
        if fd >= 0:
            try:
                os.close(fd)
            except OSError:
                pass
            setattr(h, name, -1)


# -- runner -------------------------------------------------------------------

@dataclass
class RunnerHandle:
    pid: int
    sandbox: SandboxHandle

    def alive(self):
        try:
            return proc.proc_state(self.pid) not in ("Z", "X")
        except OSError:
            return False

    def wait(self, timeout=None):
        """Wait for the runner to exit; returns its exit code when known."""
        deadline = None if timeout is None else time.monotonic() + timeout
        st = self.sandbox._stage1
        while self.alive():
            if deadline is not None and time.monotonic() > deadline:
                return None
            time.sleep(0.02)
        if st is not None:
            try:
                return st.wait(timeout=2)
            except subprocess.TimeoutExpired:
                return None
        return None


def exec_runner(h, argv, runner_image=None, env=None, cwd="/"):
    """Exec the runner (or any probe) as the sandbox's single process image."""
    if h.state is State.TORN_DOWN:
        raise TornDown(f"sandbox {h.sandbox_id} is torn down")
    if h.state is not State.READY or h._cmd_fd < 0:
        raise SandboxNotReady(f"sandbox {h.sandbox_id} is {h.state.value}")
    argv = list(argv)
    if runner_image is not None:
        argv = [runner_image] + argv
    if not argv:
        raise ExecFailed("empty argv")
    req = {"argv": argv, "env": env or {}, "cwd": cwd}
    os.write(h._cmd_fd, (json.dumps(req) + "\n").encode())
    os.close(h._cmd_fd)
    h._cmd_fd = -1
    # the status pipe is close-on-exec in stage 2, so EOF means exec succeeded
    data = b""
    while True:
        chunk = os.read(h._status_fd, 4096)
        if not chunk:
            break
        data += chunk
    os.close(h._status_fd)
    h._status_fd = -1
    for line in data.splitlines():
        ev = json.loads(line)
        if ev.get("event") in ("exec-failed", "error"):
            h.state = State.READY
            raise ExecFailed(ev.get("cause", "exec failed"))
    h.state = State.RUNNING
    return RunnerHandle(h.runner_pid, h)


# -- teardown -----------------------------------------------------------------

def _netns_target(h):
    if h._netns_fd >= 0:
        return {"net": h._netns_fd}
    for pid in (h.stage1_pid, h.runner_pid, h.guest_pid):
        try:
            if pid and proc.ns_id(pid, "net") == h.guest_net_ns:
                return pid
        except OSError:
            continue
    return None


def teardown(h, keep_comm=False, base_dir=DEFAULT_BASE_DIR):
    report = TeardownReport(h.sandbox_id)
    res = report.resources

    target = _netns_target(h)
    if target is None:
        res["firewall"] = "absent"
    else:
        try:
            res["firewall"] = "reclaimed" if firewall.remove(target, h.sandbox_id) else "absent"
        except Exception as e:  # noqa: BLE001 - best effort, reported
            res["firewall"] = f"failed: {e}"

    if h._proxy is not None or _aux_cgroup(h).exists():
        res["proxy"] = "reclaimed" if _stop_proxy(h) else "failed"
    cg = CgroupSet(h.cgroup_path)
    if cg.exists():
        members = cg.all_pids()
        ok = _remove_cgroup(cg)
        res["processes"] = "reclaimed" if members else "absent"
        res["cgroup"] = "reclaimed" if ok else "failed"
    else:
        if h._stage1 is not None:
            _kill_processes(h)
        res["processes"] = "absent"
        res["cgroup"] = "absent"
    if h._stage1 is not None:
        try:
            h._stage1.wait(timeout=5)
        except subprocess.TimeoutExpired:
            h._stage1.kill()
            h._stage1.wait()
        h._stage1 = None
    # the sandbox mount namespace dies with its last process; nothing was
    # mounted in the host namespace
    res["mounts"] = "reclaimed" if h.state is not State.TORN_DOWN else "absent"
    _close_fds(h)

    if os.path.isdir(h.run_dir) and not keep_comm:
        shutil.rmtree(h.run_dir, ignore_errors=True)
        res["run_dir"] = "reclaimed"
    else:
        res["run_dir"] = "absent" if not os.path.isdir(h.run_dir) else "kept"
    if h.ordinal:
        res["ordinal"] = "reclaimed" if release_ordinal(h.ordinal, base_dir) else "absent"
    h.state = State.TORN_DOWN
    return report


# -- comm channel -------------------------------------------------------------

class CommChannel:
    """Host-side view of the shared communication directory."""

    def __init__(self, handle):
        self.h = handle
        self.dir = handle.comm_dir

    def _check(self):
        if self.h.state is State.TORN_DOWN or not os.path.isdir(self.dir):
            raise TornDown(f"sandbox {self.h.sandbox_id} is torn down")

    def path(self, name):
        return os.path.join(self.dir, name)

    def write_manifest(self, data):
        self._check()
        tmp = self.path(".plugins-to-run.tmp")
        with open(tmp, "wb") as f:
            f.write(data)
        os.chmod(tmp, 0o644)
        os.replace(tmp, self.path("plugins-to-run"))

    def send(self, verb):
        self._check()
        with open(self.path("control"), "a") as f:
            f.write(verb + "\n")

    def read_from(self, name, offset=0):
        self._check()
        with open(self.path(name), "rb") as f:
            f.seek(offset)
            return f.read()

    def size(self, name):
        try:
            return os.path.getsize(self.path(name))
        except OSError:
            return 0

    def status_events(self):
        try:
            raw = self.read_from("status")
        except (TornDown, OSError):
            return []
        out = []
        for line in raw.splitlines():
            try:
                out.append(json.loads(line))
            except ValueError:
                continue
        return out


def open_comm_channel(h):
    if h.state not in (State.READY, State.RUNNING):
        raise TornDown(f"sandbox {h.sandbox_id} is {h.state.value}")
    return CommChannel(h)


# -- fetch window and staging -------------------------------------------------

def _remount_ro(path):
    libc.mount(None, path, None,
               libc.MS_REMOUNT | libc.MS_BIND | libc.MS_RDONLY | libc.MS_NOSUID | libc.MS_NODEV)
    return True


def seal_staging(h):
    """Remount the sandbox's /staging read-only from the host."""
    from plugcell.kernel.nsexec import run_in_ns

    return run_in_ns(h.runner_pid, ["mnt"], _remount_ro, "/staging")


def open_fetch_window(h, endpoints):
    from plugcell.policy.model import Direction, FirewallRule, Verdict

    rules = [FirewallRule(h.classid, Direction.OUT, Verdict.ACCEPT, ep) for ep in endpoints]
    if rules:
        firewall.open_window(_netns_target(h), h.sandbox_id, rules)
    return len(rules)


def close_fetch_window(h):
    target = _netns_target(h)
    if target is None:
        return 0
    return firewall.close_window(target, h.sandbox_id)
