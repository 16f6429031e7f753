"""Policy synthesis, validation and rendering.  Everything here is pure."""

import struct
from dataclasses import dataclass, field

from plugcell.errors import InvalidOpts, UnknownSyscall
from plugcell.policy.model import (
    CAP_ALLOWLIST,
    DEFAULT_CAPS,
    GUEST_CGROUP_MOUNT,
    GUEST_MOUNT,
    PTRACE_BLEND_SYSCALLS,
    CapabilitySet,
    Direction,
    Endpoint,
    FirewallRule,
    LocalhostMode,
    MountMode,
    MountSpec,
    NamespaceSharing,
    PolicyOptions,
    SandboxPolicy,
    SeccompAction,
    SeccompRule,
    Sharing,
    UidMapping,
    Verdict,
)
from plugcell.policy.syscalls import SYSCALLS_X86_64


def _sandbox_uid(opts, guest_owner):
    uid = opts.uid_base + opts.ordinal
    while uid in (0, guest_owner):
        uid += 1
    return uid


def default_firewall(classid, backend, localhost_mode, proxy_port):
    rules = []
    if backend is not None:
        rules.append(FirewallRule(classid, Direction.OUT, Verdict.ACCEPT, backend))
    if localhost_mode is LocalhostMode.HTTP_GET_ONLY:
        rules.append(FirewallRule(
            classid, Direction.OUT, Verdict.ACCEPT, Endpoint("127.0.0.1", proxy_port), loopback=True,
        ))
    elif localhost_mode is LocalhostMode.ALLOW_ALL:
        rules.append(FirewallRule(classid, Direction.OUT, Verdict.ACCEPT, None, loopback=True))
    rules.append(FirewallRule(classid, Direction.OUT, Verdict.DROP))
    rules.append(FirewallRule(classid, Direction.IN, Verdict.DROP))
    return tuple(rules)


def default_seccomp(allow_bind):
    names = list(PTRACE_BLEND_SYSCALLS)
    if not allow_bind:
        names.append("bind")
    return tuple(SeccompRule(n) for n in names)


def default_policy(guest, opts=None):
    opts = opts or PolicyOptions()
    if opts.passive_capture and opts.net is Sharing.PRIVATE:
        raise InvalidOpts("passive_capture needs the guest network namespace (net must be shared)")
    if opts.ordinal < 1:
        raise InvalidOpts("ordinal must be >= 1")
    if not guest.rootfs_path or not guest.cgroup_paths:
        raise InvalidOpts("guest is not fully resolved")
    if opts.localhost_mode is LocalhostMode.HTTP_GET_ONLY and not 0 < opts.proxy_port < 65536:
        raise InvalidOpts(f"bad proxy port {opts.proxy_port}")

    backend = opts.backend_endpoint
    if backend is not None and backend.proto != opts.backend_proto:
        backend = Endpoint(backend.host, backend.port, opts.backend_proto)

    caps = set(DEFAULT_CAPS)
    if opts.passive_capture:
        caps.add("NET_RAW")

    uid = _sandbox_uid(opts, guest.owner_uid)
    classid = opts.classid_base + opts.ordinal
    mounts = [MountSpec(guest.rootfs_path, GUEST_MOUNT)]
    for ctrl in sorted(guest.cgroup_paths):
        mounts.append(MountSpec(guest.cgroup_paths[ctrl], f"{GUEST_CGROUP_MOUNT}/{ctrl}"))

    return SandboxPolicy(
        sharing=NamespaceSharing(pid=opts.pid, net=opts.net),
        uid_map=UidMapping(uid, uid, 1),
        caps=CapabilitySet(frozenset(caps)),
        seccomp=default_seccomp(opts.allow_bind),
        firewall=default_firewall(classid, backend, opts.localhost_mode, opts.proxy_port),
        limits=opts.limits,
        mounts=tuple(mounts),
        localhost_mode=opts.localhost_mode,
        passive_capture=opts.passive_capture,
        allow_bind=opts.allow_bind,
        bind_port_allowlist=tuple(opts.bind_port_allowlist),
        backend_endpoint=backend,
        classid=classid,
        guest_owner_uid=guest.owner_uid,
        proxy_port=opts.proxy_port,
    )


# --- validation ---------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    invariant: str
    field: str
    detail: str

    def __str__(self):
        return f"{self.invariant} ({self.field}): {self.detail}"


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.violations

    def invariants(self):
        return {v.invariant for v in self.violations}

    def add(self, invariant, fld, detail):
        self.violations.append(Violation(invariant, fld, detail))


def _check_sharing(p, r):
    for ns in ("mount", "user", "ipc", "uts"):
        if getattr(p.sharing, ns) is not Sharing.PRIVATE:
            r.add("namespace-private", f"sharing.{ns}", "must be PRIVATE")
    for ns in ("pid", "net"):
        if not isinstance(getattr(p.sharing, ns), Sharing):
            r.add("namespace-private", f"sharing.{ns}", "not a sharing mode")


def _check_caps(p, r):
    extra = set(p.caps.caps) - CAP_ALLOWLIST
    if extra:
        r.add("capability-allowlist", "caps", f"outside allowlist: {sorted(extra)}")
    if "NET_RAW" in p.caps.caps and not p.passive_capture:
        r.add("net-raw-gate", "caps", "NET_RAW requires passive_capture")


def _check_seccomp(p, r):
    denied = p.denied_syscalls()
    if "SYS_PTRACE" in p.caps.caps:
        missing = [s for s in PTRACE_BLEND_SYSCALLS if s not in denied]
        if missing:
            r.add("step-5 blend", "seccomp", f"SYS_PTRACE granted but {missing} not denied")
    if not p.allow_bind and "bind" not in denied:
        r.add("bind-deny", "seccomp", "bind must be denied when allow_bind is false")
    for rule in p.seccomp:
        if not isinstance(rule.action, SeccompAction):
            r.add("seccomp-action", "seccomp", f"{rule.syscall_name}: unknown action")
        elif rule.denies and not 0 < rule.errno_code < 4096:
            r.add("seccomp-errno", "seccomp", f"{rule.syscall_name}: errno {rule.errno_code} out of range")


def _accept_allowed(p, rule):
    if rule.direction is not Direction.OUT:
        return False
    if p.backend_endpoint is not None and rule.destination == p.backend_endpoint and not rule.loopback:
        return True
    if p.localhost_mode is LocalhostMode.HTTP_GET_ONLY:
        return (rule.loopback and rule.destination is not None
                and rule.destination.is_loopback and rule.destination.port == p.proxy_port)
    if p.localhost_mode is LocalhostMode.ALLOW_ALL:
        return rule.loopback and rule.destination is None
    return False


def _check_firewall(p, r):
    rules = list(p.firewall)
    if not 0 < p.classid < 2 ** 32:
        r.add("firewall-classid", "classid", f"classid {p.classid:#x} out of range")
    for i, rule in enumerate(rules):
        if rule.classid != p.classid:
            r.add("firewall-classid", f"firewall[{i}]", "rule does not match the sandbox classid")

    terminal = [x for x in rules if x.verdict is Verdict.DROP]
    shape = {(x.direction, x.destination is None and not x.loopback) for x in terminal}
    if len(terminal) != 2 or shape != {(Direction.IN, True), (Direction.OUT, True)}:
        r.add("firewall-terminal-drop", "firewall", "need exactly one DROP-any rule per direction")
    else:
        first_drop = min(i for i, x in enumerate(rules) if x.verdict is Verdict.DROP)
        if first_drop != len(rules) - 2:
            r.add("firewall-terminal-drop", "firewall", "ACCEPT exceptions must precede the DROP pair")

    for i, rule in enumerate(rules):
        if rule.verdict is not Verdict.ACCEPT:
            continue
        if p.localhost_mode is LocalhostMode.BLOCK_ALL and rule.targets_loopback:
            r.add("localhost-block", f"firewall[{i}]", "BLOCK_ALL forbids loopback ACCEPT rules")
        elif not _accept_allowed(p, rule):
            r.add("firewall-accept-scope", f"firewall[{i}]", f"unexpected exception {rule.describe()}")


def _check_limits(p, r):
    lim = p.limits
    for name in ("cpu_quota", "memory_bytes", "pids_max", "blkio_bps", "cpu_shares"):
        value = getattr(lim, name)
        if not isinstance(value, (int, float)) or isinstance(value, bool) or not value > 0:
            r.add("limits-positive", f"limits.{name}", f"must be positive, got {value!r}")


def _check_uid(p, r):
    m = p.uid_map
    if m.host_uid == 0:
        r.add("uid-deprivileged", "uid_map.host_uid", "sandbox must not run as host root")
    if m.host_uid == p.guest_owner_uid:
        r.add("uid-deprivileged", "uid_map.host_uid", "sandbox uid equals the guest owner uid")
    if m.count < 1 or m.inside_uid < 0:
        r.add("uid-deprivileged", "uid_map", "malformed mapping")


def _check_mounts(p, r):
    for i, mnt in enumerate(p.mounts):
        if mnt.mode is not MountMode.READ_ONLY:
            r.add("mounts-read-only", f"mounts[{i}]", f"{mnt.target} is not read-only")
    targets = {m.target for m in p.mounts}
    if GUEST_MOUNT not in targets:
        r.add("mandatory-mounts", "mounts", f"guest rootfs not mounted at {GUEST_MOUNT}")
    if not any(t.startswith(GUEST_CGROUP_MOUNT + "/") for t in targets):
        r.add("mandatory-mounts", "mounts", f"guest cgroup subtree not mounted at {GUEST_CGROUP_MOUNT}")


def _check_misc(p, r):
    if p.passive_capture and p.sharing.net is not Sharing.SHARED_WITH_GUEST:
        r.add("passive-capture-net", "passive_capture", "requires the shared net namespace")
    for port in p.bind_port_allowlist:
        if not (isinstance(port, int) and 0 < port < 65536):
            r.add("port-range", "bind_port_allowlist", f"bad port {port!r}")
    if p.backend_endpoint is not None:
        if not 0 < p.backend_endpoint.port < 65536:
            r.add("port-range", "backend_endpoint", f"bad port {p.backend_endpoint.port}")
        if p.backend_endpoint.proto not in ("tcp", "udp"):
            r.add("port-range", "backend_endpoint", f"bad protocol {p.backend_endpoint.proto!r}")
    if not isinstance(p.localhost_mode, LocalhostMode):
        r.add("localhost-mode", "localhost_mode", f"unknown mode {p.localhost_mode!r}")


_CHECKS = (
    _check_sharing, _check_caps, _check_seccomp, _check_firewall,
    _check_limits, _check_uid, _check_mounts, _check_misc,
)


def validate_policy(p):
    report = ValidationReport()
    for check in _CHECKS:
        check(p, report)
    return report


# --- seccomp rendering --------------------------------------------------

BPF_LD_W_ABS = 0x20
BPF_JEQ_K = 0x15
BPF_JGE_K = 0x35
BPF_RET_K = 0x06

SECCOMP_RET_ALLOW = 0x7FFF0000
SECCOMP_RET_ERRNO = 0x00050000
AUDIT_ARCH_X86_64 = 0xC000003E
X32_SYSCALL_BIT = 0x40000000

SECCOMP_DATA_NR = 0
SECCOMP_DATA_ARCH = 4


@dataclass(frozen=True)
class SeccompProgram:
    """A rendered filter: resolved rules plus the packed sock_filter array."""

    rules: tuple  # (syscall_name, nr, errno) for each denial, in program order
    bytecode: bytes

    @property
    def denied(self):
        return {name for name, _, _ in self.rules}

    def instructions(self):
        return [struct.unpack("=HBBI", self.bytecode[i:i + 8]) for i in range(0, len(self.bytecode), 8)]


def _insn(code, k, jt=0, jf=0):
    return struct.pack("=HBBI", code, jt, jf, k)


def render_seccomp(p, table=SYSCALLS_X86_64):
    resolved = []
    seen = set()
    for rule in p.seccomp:
        if rule.syscall_name not in table:
            raise UnknownSyscall(f"unknown syscall {rule.syscall_name!r}", syscall=rule.syscall_name)
        if not rule.denies or rule.syscall_name in seen:
            continue
        seen.add(rule.syscall_name)
        resolved.append((rule.syscall_name, table[rule.syscall_name], rule.errno_code))
    resolved.sort(key=lambda t: t[1])

    # wrong-architecture and x32 calls are refused outright so a plugin cannot
    # reach ptrace through a different syscall numbering
    eperm = SECCOMP_RET_ERRNO | 1
    prog = [
        _insn(BPF_LD_W_ABS, SECCOMP_DATA_ARCH),
        _insn(BPF_JEQ_K, AUDIT_ARCH_X86_64, jt=1, jf=0),
        _insn(BPF_RET_K, eperm),
        _insn(BPF_LD_W_ABS, SECCOMP_DATA_NR),
        _insn(BPF_JGE_K, X32_SYSCALL_BIT, jt=0, jf=1),
        _insn(BPF_RET_K, eperm),
    ]
    for _, nr, err in resolved:
        prog.append(_insn(BPF_JEQ_K, nr, jt=0, jf=1))
        prog.append(_insn(BPF_RET_K, SECCOMP_RET_ERRNO | (err & 0xFFFF)))
    prog.append(_insn(BPF_RET_K, SECCOMP_RET_ALLOW))
    return SeccompProgram(tuple(resolved), b"".join(prog))


def render_firewall(p):
    """Ordered rule list: ACCEPT exceptions first, then the DROP pair."""
    accepts = [r for r in p.firewall if r.verdict is Verdict.ACCEPT]
    drops = [r for r in p.firewall if r.verdict is Verdict.DROP]
    drops.sort(key=lambda r: 0 if r.direction is Direction.OUT else 1)
    return accepts + drops
