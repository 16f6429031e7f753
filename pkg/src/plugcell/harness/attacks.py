"""The containment battery: attack fixtures, probes and the suite runner.

Every attack runs against a fresh disposable guest.  Each guest and its
sandbox sit together under a per-run "cell" cgroup with pids and memory
limits of its own, which stands in for a host with finite resources: a
resource attack escapes when it starves the guest, either inside the
guest's own cgroup or through the shared cell.
"""

import dataclasses
import enum
import json
import logging
import os
import socket
import stat
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from plugcell.errors import FixtureSetupFailed
from plugcell.harness import guest_services as svc
from plugcell.harness.fixture import FixtureGuest, GuestSpec, host_snapshot
from plugcell.kernel import proc
from plugcell.kernel.cgroups import SANDBOX_CONTROLLERS, CgroupSet, ensure_net_cls
from plugcell.policy import default_policy
from plugcell.policy.model import (
    GUEST_MOUNT,
    LocalhostMode,
    MountMode,
    MountSpec,
    PolicyOptions,
    ResourceLimits,
)
from plugcell.runtime.sandbox import create_sandbox, exec_runner, teardown

log = logging.getLogger(__name__)

PAYLOAD_PKG = "plugcell.harness.payloads"
CELL_PIDS_MAX = 320
CELL_MEMORY_BYTES = 704 * 1024 * 1024
# a guest with less free memory than this (in its own cgroup or the cell)
# is considered starved
MEMORY_RESERVE = 48 * 1024 * 1024
CPU_RATIO_FLOOR = 0.7
LISTEN_PORT = 4444
ABLATIONS = ("seccomp", "firewall", "cgroup", "ro-rootfs")


class RunContext(str, enum.Enum):
    GUEST = "GUEST"
    HOST = "HOST"
    SANDBOX = "SANDBOX"


class Outcome(str, enum.Enum):
    CONTAINED = "CONTAINED"
    ESCAPED = "ESCAPED"


@dataclass(frozen=True)
class Verdict:
    attack: str
    run_context: RunContext
    outcome: Outcome
    evidence: dict = field(default_factory=dict)
    blocker_observed: str = ""

    def to_dict(self):
        return {"attack": self.attack, "run_context": self.run_context.value,
                "outcome": self.outcome.value, "evidence": self.evidence,
                "blocker_observed": self.blocker_observed}


@dataclass
class HarnessEnv:
    """Knobs shared by every run of a suite."""
    workdir: str = "/var/lib/plugcell/harness"
    base_dir: str = "/var/lib/plugcell/harness/sandboxes"
    ablate: Optional[str] = None
    localhost_mode: LocalhostMode = LocalhostMode.BLOCK_ALL
    cell_parent: str = "plugcell-harness"

    def __post_init__(self):
        if self.ablate is not None and self.ablate not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablate!r}; expected one of {ABLATIONS}")


@dataclass
class AttackRun:
    """Everything a probe may look at for one attack execution."""
    fixture: "AttackFixture"
    ctx: RunContext
    env: HarnessEnv
    guest: FixtureGuest
    cell: CgroupSet
    sandbox: object = None
    payload: object = None
    attacker_cg: Optional[CgroupSet] = None
    state: dict = field(default_factory=dict)
    payload_log: list = field(default_factory=list)

    def attacker_pids(self):
        """Host pids of everything the payload started."""
        if self.ctx is RunContext.GUEST:
            base = set(self.state.get("guest_pids_before", ()))
            return [p for p in self.guest.cgroup_pids() if p not in base]
        return self.attacker_cg.all_pids() if self.attacker_cg else []


@dataclass(frozen=True)
class AttackFixture:
    name: str
    payload: str
    success_probe: Callable
    expected_blocker: str
    services: tuple = ("sleeper",)
    window_s: float = 3.0
    prepare: Optional[Callable] = None
    observe_blocker: Optional[Callable] = None
    # Outcome expected when the payload runs directly in the guest
    guest_baseline: Outcome = Outcome.ESCAPED
    # the single ablation that should let this attack through
    ablation: Optional[str] = None
    # probe once the payload has exited (bounded by window_s) rather than
    # sampling while it runs
    wait_exit: bool = False

    @property
    def module(self):
        return f"{PAYLOAD_PKG}.{self.payload}"


# -- probes -------------------------------------------------------------------
# A probe returns (escaped, evidence) and looks only at guest or host state.

def _diff_hashes(before, after):
    changed = sorted(k for k in set(before) | set(after) if before.get(k) != after.get(k))
    return changed


def probe_rootfs(run):
    changed = _diff_hashes(run.state["hashes_before"], run.guest.hashes())
    return bool(changed), {"changed_paths": changed[:20], "n_changed": len(changed)}


def probe_ld_preload(run):
    escaped, ev = probe_rootfs(run)
    hooks = []
    if os.path.exists(run.guest.path("/srv/app/libhook.so")):
        hooks.append("library planted")
    with open(run.guest.path("/srv/app/app.env")) as f:
        if "LD_PRELOAD" in f.read():
            hooks.append("app.env preloads it")
    if os.path.exists(run.guest.path("/etc/ld.so.preload")):
        hooks.append("global preload list")
    ev["hooks"] = hooks
    return escaped or bool(hooks), ev


def probe_privesc(run):
    found = [p for p in ("/tmp/update", svc.ROOTED_MARKER) if os.path.exists(run.guest.path(p))]
    return bool(found), {"found": found}


def probe_pwned(run):
    hit = os.path.exists(run.guest.path(svc.PWNED_MARKER))
    return hit, {"pwned_marker": hit}


def _guest_can_spawn(guest, children=10):
    try:
        res = guest.run(["/bin/sh", "-c", f"i=0; while [ $i -lt {children} ]; do /bin/true || exit 1;"
                         " i=$((i+1)); done"], timeout=10, stdout=subprocess.DEVNULL,
                        stderr=subprocess.DEVNULL, uid=0)
    except subprocess.TimeoutExpired:
        return False
    return res.returncode == 0


def probe_spawn(run):
    results = []
    for _ in range(4):
        time.sleep(run.fixture.window_s / 5)
        results.append(_guest_can_spawn(run.guest))
    return not all(results), {"spawn_checks": results, "guest_pids_max": run.guest.spec.pids_max}


def _mem_numbers(cg):
    usage = int(cg.read("memory", "memory.usage_in_bytes"))
    limit = int(cg.read("memory", "memory.limit_in_bytes"))
    return usage, limit


class MemoryMonitor(threading.Thread):
    """Samples the guest's free memory, in its own cgroup and in the cell."""

    def __init__(self, guest, cell, interval=0.02):
        super().__init__(daemon=True)
        self.guest, self.cell, self.interval = guest, cell, interval
        self.min_headroom = None
        self.samples = 0
        self._halt = threading.Event()

    def run(self):
        while not self._halt.is_set():
            try:
                gu, gl = _mem_numbers(self.guest.cg)
                cu, cl = _mem_numbers(self.cell)
            except (OSError, ValueError):
                break
            room = min(gl - gu, cl - cu)
            self.min_headroom = room if self.min_headroom is None else min(self.min_headroom, room)
            self.samples += 1
            self._halt.wait(self.interval)

    def stop(self):
        self._halt.set()
        self.join(timeout=2)


def prepare_memory(run):
    run.state["guest_failcnt"] = int(run.guest.cg.read("memory", "memory.failcnt"))
    mon = MemoryMonitor(run.guest, run.cell)
    mon.start()
    run.state["monitor"] = mon


def probe_memory(run):
    time.sleep(run.fixture.window_s)
    mon = run.state.pop("monitor")
    mon.stop()
    failcnt = int(run.guest.cg.read("memory", "memory.failcnt")) - run.state["guest_failcnt"]
    room = mon.min_headroom if mon.min_headroom is not None else 0
    escaped = room < MEMORY_RESERVE or failcnt > 0
    return escaped, {"min_headroom_bytes": room, "samples": mon.samples,
                     "guest_failcnt_delta": failcnt, "reserve_bytes": MEMORY_RESERVE}


BENCH = ("import time\n"
         "end = time.monotonic() + {secs}\n"
         "n = 0\n"
         "while time.monotonic() < end:\n"
         "    for _ in range(1000):\n"
         "        n += 1\n"
         "print(n)\n")


def guest_benchmark(guest, secs=1.0):
    """Loop iterations a guest process completes in ``secs`` of wall time."""
    res = guest.run(["/usr/bin/python3", "-c", BENCH.format(secs=secs)], timeout=30,
                    capture_output=True, uid=0)
    if res.returncode != 0:
        return 0
    return int(res.stdout.split()[-1])


SHARE = ("import time\n"
         "w0, c0 = time.monotonic(), time.process_time()\n"
         "while time.monotonic() - w0 < {secs}:\n"
         "    for _ in range(1000):\n"
         "        pass\n"
         "print((time.process_time() - c0) / (time.monotonic() - w0))\n")


def guest_cpu_share(guest, secs=1.5):
    """Fraction of wall time a busy guest process actually gets on a CPU.

    Unlike loop throughput this does not drift with host clock speed, so one
    sample before and one during an attack are comparable.
    """
    res = guest.run(["/usr/bin/python3", "-c", SHARE.format(secs=secs)], timeout=30,
                    capture_output=True, uid=0)
    if res.returncode != 0:
        return 0.0
    return float(res.stdout.split()[-1])


def prepare_cpu(run):
    run.state["share_before"] = guest_cpu_share(run.guest)


def probe_cpu(run):
    time.sleep(0.5)
    during = guest_cpu_share(run.guest)
    before = run.state["share_before"] or 1.0
    ratio = during / before
    return ratio < CPU_RATIO_FLOOR, {"share_before": round(before, 3), "share_during": round(during, 3),
                                     "ratio": round(ratio, 3), "floor": CPU_RATIO_FLOOR}


def probe_port(run):
    time.sleep(1.0)
    code = ("import socket\ns = socket.socket()\ns.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)\n"
            f"s.bind(('0.0.0.0', {svc.WEB_PORT}))\ns.listen(1)\n")
    res = run.guest.run(["/usr/bin/python3", "-c", code], timeout=20, capture_output=True, uid=0)
    err = res.stderr.decode(errors="replace").strip().splitlines()[-1:] if res.returncode else []
    return res.returncode != 0, {"guest_bind_rc": res.returncode, "guest_bind_error": err}


def prepare_victim(run):
    with open(run.guest.path(svc.VICTIM_INFO)) as f:
        info = json.load(f)
    run.state["victim"] = info
    run.state["victim_host_pid"] = run.guest.host_pid(info["pid"])
    run.state["victim_start"] = proc.start_time(run.state["victim_host_pid"])


def _victim_alive(run):
    pid = run.state["victim_host_pid"]
    try:
        return proc.start_time(pid) == run.state["victim_start"] and proc.proc_state(pid) not in ("Z", "X")
    except OSError:
        return False


def probe_canary(run):
    time.sleep(0.5)
    info = run.state["victim"]
    alive = _victim_alive(run)
    data = b""
    if alive:
        with open(f"/proc/{run.state['victim_host_pid']}/mem", "rb", buffering=0) as f:
            f.seek(info["addr"])
            data = f.read(info["len"])
    intact = alive and data == svc.CANARY
    return not intact, {"victim_alive": alive, "canary": data.decode(errors="replace")}


def prepare_guest_procs(run):
    prepare_victim(run)
    procs = {}
    for pid in run.guest.guest_pids():
        try:
            procs[pid] = proc.start_time(pid)
        except OSError:
            continue
    run.state["guest_procs"] = procs


def probe_guest_procs(run):
    time.sleep(1.0)
    dead = []
    for pid, start in run.state["guest_procs"].items():
        try:
            ok = proc.start_time(pid) == start and proc.proc_state(pid) not in ("Z", "X")
        except OSError:
            ok = False
        if not ok:
            dead.append(pid)
    return bool(dead), {"killed_host_pids": sorted(dead), "victim_alive": _victim_alive(run),
                        "watched": len(run.state["guest_procs"])}


DISGUISES = ("kworker-u8", "systemd-journald", "sshd")


def _comm(pid):
    with open(f"/proc/{pid}/comm") as f:
        return f.read().strip()


def probe_covert(run):
    time.sleep(1.5)
    names = {d[:15] for d in DISGUISES}
    found = []
    for pid in proc.list_pids():
        try:
            if _comm(pid) in names:
                found.append(pid)
        except OSError:
            continue
    sandbox_pids = set(run.attacker_cg.all_pids()) if run.ctx is RunContext.SANDBOX else set()
    owner = run.guest.spec.uid
    disguised_as_guest = []
    for pid in found:
        try:
            uid = proc.real_uid(pid)
        except OSError:
            continue
        if pid not in sandbox_pids or uid == owner:
            disguised_as_guest.append(pid)
    escaped = not found or bool(disguised_as_guest)
    return escaped, {"visible_on_host": found, "passing_as_guest": disguised_as_guest}


class Listener(threading.Thread):
    """TCP and UDP listener on the host side of the guest's veth."""

    def __init__(self, host, port):
        super().__init__(daemon=True)
        self.tcp = socket.socket()
        self.tcp.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.tcp.bind((host, port))
        self.tcp.listen(8)
        self.tcp.settimeout(0.1)
        self.udp = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.udp.bind((host, port))
        self.udp.settimeout(0.05)
        self.received = []
        self._halt = threading.Event()

    def run(self):
        while not self._halt.is_set():
            try:
                conn, _ = self.tcp.accept()
                with conn:
                    conn.settimeout(1)
                    self.received.append(("tcp", conn.recv(4096)[:64]))
            except (socket.timeout, OSError):
                pass
            try:
                data, _ = self.udp.recvfrom(4096)
                self.received.append(("udp", data[:64]))
            except (socket.timeout, OSError):
                pass

    def stop(self):
        self._halt.set()
        self.join(timeout=2)
        self.tcp.close()
        self.udp.close()


def prepare_listener(run):
    lst = Listener(run.guest.host_ip, LISTEN_PORT)
    lst.start()
    run.state["listener"] = lst


def probe_listener(run):
    time.sleep(run.fixture.window_s)
    lst = run.state.pop("listener")
    lst.stop()
    got = [(kind, data.decode(errors="replace")) for kind, data in lst.received]
    return bool(got), {"received": got[:5]}


DEVMEM = {(1, 1): "mem", (1, 2): "kmem", (1, 4): "port"}


def probe_devmem(run):
    time.sleep(1.5)
    held = []
    for pid in run.attacker_pids():
        try:
            fds = os.listdir(f"/proc/{pid}/fd")
        except OSError:
            continue
        for fd in fds:
            try:
                st = os.stat(f"/proc/{pid}/fd/{fd}")
            except OSError:
                continue
            key = (os.major(st.st_rdev), os.minor(st.st_rdev))
            if stat.S_ISCHR(st.st_mode) and key in DEVMEM:
                held.append({"pid": pid, "device": DEVMEM[key]})
    return bool(held), {"raw_memory_fds": held}


# -- blocker observation --------------------------------------------------------

def _failed_ops(run):
    seen = []
    for ev in run.payload_log:
        if not ev.get("ok") and "errno" in ev:
            item = f"{ev['op']}: {ev['errno']}"
            if item not in seen:
                seen.append(item)
    return "; ".join(seen[:6])


def _sandbox_knob(run, ctrl, knob):
    try:
        return run.attacker_cg.read(ctrl, knob)
    except (OSError, KeyError):
        return ""


def blocker_pids(run):
    events = _sandbox_knob(run, "pids", "pids.events")
    refused = events.split()[-1] if events else "?"
    return f"pids cgroup limit ({refused} forks refused)"


def blocker_memory(run):
    ctl = dict(line.split() for line in _sandbox_knob(run, "memory", "memory.oom_control").splitlines() if line)
    return f"memory cgroup limit ({ctl.get('oom_kill', '?')} allocators OOM-killed inside the sandbox)"


def blocker_cpu(run):
    stats = dict(line.split() for line in _sandbox_knob(run, "cpu", "cpu.stat").splitlines() if line)
    return f"cpu cgroup quota and shares ({stats.get('nr_throttled', '?')} periods throttled)"


def blocker_from_payload(label):
    def observe(run):
        ops = _failed_ops(run)
        return f"{label} ({ops})" if ops else label
    return observe


CATALOG = (
    AttackFixture("rootfs_tamper", "rootfs_tamper", probe_rootfs, "read-only guest rootfs",
                  observe_blocker=blocker_from_payload("read-only guest rootfs"),
                  ablation="ro-rootfs", wait_exit=True),
    AttackFixture("fork_bomb", "fork_bomb", probe_spawn, "pids cgroup limit", window_s=4.0,
                  observe_blocker=blocker_pids, ablation="cgroup"),
    AttackFixture("mem_hog", "mem_hog", probe_memory, "memory cgroup limit", window_s=4.0,
                  prepare=prepare_memory, observe_blocker=blocker_memory, ablation="cgroup"),
    AttackFixture("cpu_hog", "cpu_hog", probe_cpu, "cpu cgroup quota and shares", window_s=3.0,
                  prepare=prepare_cpu, observe_blocker=blocker_cpu, ablation="cgroup"),
    AttackFixture("zip_bomb", "zip_bomb", probe_memory, "memory cgroup limit", window_s=5.0,
                  prepare=prepare_memory, observe_blocker=blocker_memory, ablation="cgroup"),
    AttackFixture("port_hoard", "port_hoard", probe_port, "seccomp denies bind", window_s=3.0,
                  observe_blocker=blocker_from_payload("seccomp denies bind")),
    AttackFixture("code_inject_ptrace", "code_inject_ptrace", probe_canary, "seccomp denies ptrace",
                  services=("victim",), prepare=prepare_victim,
                  observe_blocker=blocker_from_payload("seccomp denies ptrace"), ablation="seccomp", wait_exit=True),
    AttackFixture("procmem_write", "procmem_write", probe_canary,
                  "read-only /proc and seccomp denies process_vm_writev", services=("victim",),
                  prepare=prepare_victim,
                  observe_blocker=blocker_from_payload("read-only /proc, seccomp"),
                  ablation="seccomp", wait_exit=True),
    AttackFixture("ld_preload_hook", "ld_preload_hook", probe_ld_preload, "read-only guest rootfs",
                  observe_blocker=blocker_from_payload("read-only guest rootfs"), ablation="ro-rootfs", wait_exit=True),
    AttackFixture("covert_exec", "covert_exec", probe_covert, "sandbox cgroup and uid visible on host",
                  window_s=3.0, observe_blocker=blocker_from_payload("sandbox cgroup, read-only cgroupfs")),
    AttackFixture("reverse_shell_exfil", "reverse_shell_exfil", probe_listener,
                  "classid firewall drops sandbox traffic", window_s=3.0, prepare=prepare_listener,
                  observe_blocker=blocker_from_payload("classid firewall"), ablation="firewall"),
    AttackFixture("loopback_attack", "loopback_attack", probe_pwned,
                  "classid firewall blocks loopback", services=("vulnsvc",), window_s=3.0,
                  observe_blocker=blocker_from_payload("classid firewall on lo"), ablation="firewall", wait_exit=True),
    AttackFixture("disk_privesc_tmpfile", "disk_privesc_tmpfile", probe_privesc, "read-only guest rootfs",
                  services=("chkrootkit",), window_s=2.5,
                  observe_blocker=blocker_from_payload("read-only guest rootfs"), ablation="ro-rootfs", wait_exit=True),
    AttackFixture("signal_kill_guest", "signal_kill_guest", probe_guest_procs,
                  "no KILL capability and a distinct uid", services=("victim", "sleeper"),
                  prepare=prepare_guest_procs,
                  observe_blocker=blocker_from_payload("no KILL capability, distinct uid"),
                  wait_exit=True),
    AttackFixture("devmem_access", "devmem_access", probe_devmem, "no raw memory devices, no MKNOD",
                  window_s=3.0, guest_baseline=Outcome.CONTAINED,
                  observe_blocker=blocker_from_payload("minimal /dev, no MKNOD")),
)
ATTACKS = {f.name: f for f in CATALOG}


# -- policies for the sandbox context ---------------------------------------------

ABLATED_LIMITS = ResourceLimits(cpu_quota=64.0, memory_bytes=64 << 30, pids_max=4194304,
                                blkio_bps=1 << 40, cpu_shares=1024)
SECCOMP_ABLATED = frozenset({"ptrace", "process_vm_writev"})


def attack_policy(guest, env):
    limits = ABLATED_LIMITS if env.ablate == "cgroup" else ResourceLimits()
    pol = default_policy(guest, PolicyOptions(localhost_mode=env.localhost_mode, limits=limits))
    if env.ablate == "seccomp":
        pol = dataclasses.replace(pol, seccomp=tuple(r for r in pol.seccomp
                                                     if r.syscall_name not in SECCOMP_ABLATED))
    elif env.ablate == "firewall":
        pol = dataclasses.replace(pol, firewall=())
    elif env.ablate == "ro-rootfs":
        pol = dataclasses.replace(pol, mounts=tuple(
            MountSpec(m.source, m.target, MountMode.READ_WRITE) if m.target == GUEST_MOUNT else m
            for m in pol.mounts))
    return pol


# -- running one attack -----------------------------------------------------------

_cells = 0


def _new_cell(env):
    global _cells
    _cells += 1
    cell = CgroupSet(f"{env.cell_parent}/cell-{os.getpid()}-{_cells}", controllers=SANDBOX_CONTROLLERS)
    cell.create()
    with open(os.path.join(cell.path("pids"), "pids.max"), "w") as f:
        f.write(str(CELL_PIDS_MAX))
    with open(os.path.join(cell.path("memory"), "memory.limit_in_bytes"), "w") as f:
        f.write(str(CELL_MEMORY_BYTES))
    return cell


def _payload_env(run, guest_root, cgroup_root):
    return {
        "PLUGCELL_GUEST_ROOT": guest_root,
        "PLUGCELL_GUEST_CGROUP": cgroup_root,
        "PLUGCELL_ATTACK_SECONDS": str(run.fixture.window_s),
        "PLUGCELL_ATTACK_TARGET": f"{run.guest.host_ip}:{LISTEN_PORT}",
    }


def _launch(run):
    f, guest = run.fixture, run.guest
    if run.ctx is RunContext.SANDBOX:
        pol = attack_policy(guest.target, run.env)
        validate = run.env.ablate is None
        run.sandbox = create_sandbox(guest.target, pol, base_dir=run.env.base_dir,
                                     cgroup_parent=run.cell.relpath, validate=validate)
        run.attacker_cg = CgroupSet(run.sandbox.cgroup_path)
        env = _payload_env(run, "/guest", "/guest-cgroup")
        run.payload = exec_runner(run.sandbox, ["/usr/bin/python3", "-m", f.module], env=env)
    elif run.ctx is RunContext.GUEST:
        run.state["guest_pids_before"] = guest.cgroup_pids()
        env = _payload_env(run, "/", "/sys/fs/cgroup")
        run.payload = guest.popen(["/usr/bin/python3", "-m", f.module], env=env, uid=0,
                                  stdout=subprocess.PIPE, stderr=subprocess.DEVNULL)
    else:
        run.attacker_cg = CgroupSet(f"{run.cell.relpath}/hostctx", controllers=SANDBOX_CONTROLLERS)
        run.attacker_cg.create()
        env = dict(os.environ, **_payload_env(run, guest.rootfs, guest.cg.path("memory")))
        env["PYTHONPATH"] = os.path.dirname(os.path.dirname(os.path.dirname(__file__)))
        if "victim" in run.state:
            env["PLUGCELL_VICTIM_PID"] = str(run.state["victim_host_pid"])
        procs = [os.path.join(d, "cgroup.procs") for d in run.attacker_cg.dirs.values()]

        def join():
            for p in procs:
                with open(p, "w") as fh:
                    fh.write(str(os.getpid()))
        run.payload = subprocess.Popen([sys.executable, "-m", f.module], env=env, preexec_fn=join,
                                       stdout=subprocess.PIPE, stderr=subprocess.DEVNULL)


def _await_payload(run, timeout):
    if run.ctx is RunContext.SANDBOX:
        run.payload.wait(timeout)
        return
    try:
        run.payload.wait(timeout)
    except subprocess.TimeoutExpired:
        log.warning("%s payload still running after %.1fs", run.fixture.name, timeout)


def _parse_log(data):
    out = []
    for line in data.splitlines():
        try:
            ev = json.loads(line)
        except ValueError:
            continue
        if isinstance(ev, dict) and "op" in ev:
            out.append(ev)
    return out


def _stop_payload(run):
    """Kill the payload and collect its log (sandbox kill is left to teardown)."""
    if run.ctx is RunContext.SANDBOX:
        if run.sandbox is not None:
            try:
                with open(os.path.join(run.sandbox.comm_dir, "runner.log"), "rb") as fh:
                    run.payload_log = _parse_log(fh.read())
            except OSError:
                pass
        return
    if run.ctx is RunContext.GUEST:
        base = set(run.state.get("guest_pids_before", ()))
        for pid in run.guest.cgroup_pids():
            if pid not in base:
                try:
                    os.kill(pid, 9)
                except ProcessLookupError:
                    pass
    elif run.attacker_cg is not None:
        run.attacker_cg.kill_all()
    if run.payload is not None:
        try:
            out, _ = run.payload.communicate(timeout=10)
        except subprocess.TimeoutExpired:
            run.payload.kill()
            out, _ = run.payload.communicate()
        run.payload_log = _parse_log(out or b"")


def run_attack(f, ctx, env=None):
    """Run one attack in one context against a fresh fixture guest."""
    env = env or HarnessEnv()
    ctx = RunContext(ctx)
    os.makedirs(env.base_dir, exist_ok=True)
    ensure_net_cls()
    before = host_snapshot()
    cell = _new_cell(env)
    guest = FixtureGuest(GuestSpec(name=f.name.replace("_", "-")[:12], services=f.services),
                         host_parent=cell.relpath)
    run = AttackRun(fixture=f, ctx=ctx, env=env, guest=guest, cell=cell)
    started = time.monotonic()
    try:
        guest.start()
        run.state["hashes_before"] = guest.hashes()
        if f.prepare:
            f.prepare(run)
        _launch(run)
        if f.wait_exit:
            _await_payload(run, f.window_s + 5)
        escaped, evidence = f.success_probe(run)
        _stop_payload(run)
        blocker = ""
        if not escaped and f.observe_blocker and ctx is RunContext.SANDBOX:
            blocker = f.observe_blocker(run)
        evidence["rootfs_unchanged"] = not _diff_hashes(run.state["hashes_before"], guest.hashes())
    finally:
        for key in ("monitor", "listener"):
            obj = run.state.pop(key, None)
            if obj is not None:
                obj.stop()
        if run.sandbox is not None:
            teardown(run.sandbox, base_dir=env.base_dir)
        elif run.payload is not None and run.payload.returncode is None:
            _stop_payload(run)
        if run.attacker_cg is not None and ctx is RunContext.HOST:
            run.attacker_cg.kill_all()
            run.attacker_cg.remove()
        guest.stop()
        cell.kill_all()
        cell.remove()
        cell.prune_parents()
    evidence["host_restored"] = host_snapshot() == before
    evidence["payload_log"] = run.payload_log[:12]
    evidence["seconds"] = round(time.monotonic() - started, 2)
    if env.ablate:
        evidence["ablation"] = env.ablate
    return Verdict(f.name, ctx, Outcome.ESCAPED if escaped else Outcome.CONTAINED, evidence, blocker)


# -- the suite ------------------------------------------------------------------------

@dataclass
class ContainmentReport:
    verdicts: list = field(default_factory=list)
    errors: list = field(default_factory=list)
    ablate: Optional[str] = None
    localhost_mode: str = LocalhostMode.BLOCK_ALL.value

    def matrix(self):
        out = {}
        for v in self.verdicts:
            out.setdefault(v.attack, {})[v.run_context.value] = v.outcome.value
        return out

    def expected(self):
        """Outcome the battery should produce, per attack and context."""
        out = {}
        for name, row in self.matrix().items():
            f = ATTACKS[name]
            exp = {}
            if "SANDBOX" in row:
                flips = f.ablation is not None and f.ablation == self.ablate
                if f.name == "loopback_attack" and self.localhost_mode == LocalhostMode.ALLOW_ALL.value:
                    flips = True
                exp["SANDBOX"] = Outcome.ESCAPED.value if flips else Outcome.CONTAINED.value
            if "GUEST" in row:
                exp["GUEST"] = f.guest_baseline.value
            out[name] = exp
        return out

    def mismatches(self):
        exp, got = self.expected(), self.matrix()
        return sorted(f"{a}/{c}: expected {exp[a][c]}, got {o}"
                      for a, row in got.items() for c, o in row.items() if c in exp.get(a, {})
                      and exp[a][c] != o)

    def summary(self):
        m = self.matrix()
        sandbox = [r.get("SANDBOX") for r in m.values() if "SANDBOX" in r]
        guest = [r.get("GUEST") for r in m.values() if "GUEST" in r]
        return {
            "summary": True,
            "ablate": self.ablate,
            "localhost_mode": self.localhost_mode,
            "attacks": len(m),
            "sandbox_contained": sandbox.count("CONTAINED"),
            "sandbox_escaped": sandbox.count("ESCAPED"),
            "guest_escaped": guest.count("ESCAPED"),
            "guest_contained": guest.count("CONTAINED"),
            "matrix": m,
            "mismatches": self.mismatches(),
            "errors": self.errors,
            "host_restored": all(v.evidence.get("host_restored") for v in self.verdicts),
        }

    def to_ndjson(self):
        lines = [json.dumps(v.to_dict(), sort_keys=True) for v in self.verdicts]
        lines.append(json.dumps(self.summary(), sort_keys=True))
        return "\n".join(lines) + "\n"


def run_suite(env=None, attacks=None, contexts=(RunContext.SANDBOX, RunContext.GUEST), progress=None):
    """Run the battery sequentially.  A setup failure is recorded and the
    suite moves on."""
    env = env or HarnessEnv()
    report = ContainmentReport(ablate=env.ablate, localhost_mode=LocalhostMode(env.localhost_mode).value)
    for f in (ATTACKS[a] for a in attacks) if attacks else CATALOG:
        for ctx in contexts:
            try:
                v = run_attack(f, ctx, env)
            except FixtureSetupFailed as e:
                report.errors.append({"attack": f.name, "run_context": RunContext(ctx).value,
                                      "error": str(e)})
                continue
            report.verdicts.append(v)
            if progress:
                progress(v)
    return report
