import ctypes
import dataclasses
import errno
import os
import struct

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from conftest import fake_guest
from plugcell.errors import InvalidOpts, UnknownSyscall
from plugcell.policy import (
    CapabilitySet,
    Direction,
    Endpoint,
    FirewallRule,
    LocalhostMode,
    MountMode,
    NamespaceSharing,
    PolicyOptions,
    ResourceLimits,
    SeccompRule,
    Sharing,
    UidMapping,
    Verdict,
    default_policy,
    dumps,
    loads,
    render_firewall,
    render_seccomp,
    validate_policy,
)
from plugcell.policy.build import AUDIT_ARCH_X86_64, SECCOMP_RET_ALLOW, SECCOMP_RET_ERRNO
from plugcell.policy.model import CAP_ALLOWLIST
from plugcell.policy.syscalls import SYSCALLS_X86_64

PROPERTY = settings(max_examples=1000, deadline=None, suppress_health_check=[HealthCheck.too_slow])


# --- strategies -----------------------------------------------------------

ports = st.integers(1, 65535)
public_ipv4 = st.tuples(st.integers(1, 126), st.integers(0, 255), st.integers(0, 255),
                        st.integers(1, 254)).map(lambda t: ".".join(map(str, t)))
endpoints = st.builds(Endpoint, public_ipv4, ports, st.sampled_from(["tcp", "udp"]))
limits = st.builds(
    ResourceLimits,
    cpu_quota=st.floats(0.01, 64, allow_nan=False),
    memory_bytes=st.integers(1, 1 << 40),
    pids_max=st.integers(1, 1 << 22),
    blkio_bps=st.integers(1, 1 << 40),
    cpu_shares=st.integers(2, 262144),
)


@st.composite
def valid_options(draw):
    net = draw(st.sampled_from(list(Sharing)))
    passive = draw(st.booleans()) if net is Sharing.SHARED_WITH_GUEST else False
    return PolicyOptions(
        backend_endpoint=draw(st.none() | endpoints),
        localhost_mode=draw(st.sampled_from(list(LocalhostMode))),
        passive_capture=passive,
        allow_bind=draw(st.booleans()),
        bind_port_allowlist=tuple(draw(st.lists(ports, max_size=4))),
        pid=draw(st.sampled_from(list(Sharing))),
        net=net,
        ordinal=draw(st.integers(1, 4096)),
        uid_base=draw(st.integers(1000, 1 << 20)),
        classid_base=draw(st.integers(1, 1 << 24)),
        limits=draw(limits),
        proxy_port=draw(ports),
        backend_proto=draw(st.sampled_from(["tcp", "udp"])),
    )


guests = st.builds(lambda uid: fake_guest(owner_uid=uid), st.integers(0, 1 << 20))


# --- construction ----------------------------------------------------------

def test_default_caps_exact(guest):
    assert default_policy(guest).caps.caps == {"DAC_READ_SEARCH", "SYS_CHROOT", "SYS_PTRACE"}


def test_passive_capture_adds_net_raw(guest):
    p = default_policy(guest, PolicyOptions(passive_capture=True))
    assert p.caps.caps == {"DAC_READ_SEARCH", "SYS_CHROOT", "SYS_PTRACE", "NET_RAW"}


def test_passive_capture_needs_shared_net(guest):
    with pytest.raises(InvalidOpts):
        default_policy(guest, PolicyOptions(passive_capture=True, net=Sharing.PRIVATE))


def test_default_sharing(guest):
    s = default_policy(guest).sharing
    assert (s.mount, s.user, s.ipc, s.uts) == (Sharing.PRIVATE,) * 4
    assert (s.pid, s.net) == (Sharing.SHARED_WITH_GUEST,) * 2


def test_get_only_single_loopback_exception(guest):
    p = default_policy(guest, PolicyOptions(localhost_mode=LocalhostMode.HTTP_GET_ONLY, proxy_port=3128))
    lo = [r for r in p.firewall if r.verdict is Verdict.ACCEPT and r.targets_loopback]
    assert len(lo) == 1
    assert lo[0].destination == Endpoint("127.0.0.1", 3128)
    assert lo[0].direction is Direction.OUT


def test_uid_avoids_root_and_owner():
    g = fake_guest(owner_uid=100001)
    p = default_policy(g, PolicyOptions(ordinal=1, uid_base=100000))
    assert p.uid_map.host_uid not in (0, 100001)


def test_mounts_read_only_and_mandatory(guest):
    p = default_policy(guest)
    assert all(m.mode is MountMode.READ_ONLY for m in p.mounts)
    targets = {m.target for m in p.mounts}
    assert "/guest" in targets
    assert {f"/guest-cgroup/{c}" for c in guest.cgroup_paths} <= targets


def test_unresolved_guest_rejected():
    with pytest.raises(InvalidOpts):
        default_policy(dataclasses.replace(fake_guest(), rootfs_path=""))


# --- validation --------------------------------------------------------------

def test_default_policy_has_no_violations(guest):
    assert validate_policy(default_policy(guest)).violations == []


def test_kill_cap_is_one_allowlist_violation(guest):
    p = default_policy(guest)
    bad = dataclasses.replace(p, caps=CapabilitySet(p.caps.caps | {"KILL"}))
    report = validate_policy(bad)
    assert [v.invariant for v in report.violations] == ["capability-allowlist"]


def test_missing_process_vm_writev_is_blend_violation(guest):
    p = default_policy(guest)
    bad = dataclasses.replace(p, seccomp=tuple(r for r in p.seccomp if r.syscall_name != "process_vm_writev"))
    assert "step-5 blend" in validate_policy(bad).invariants()


def test_serialize_round_trip(guest):
    p = default_policy(guest, PolicyOptions(backend_endpoint=Endpoint("10.0.0.5", 4433),
                                            localhost_mode=LocalhostMode.HTTP_GET_ONLY))
    assert loads(dumps(p)) == p


@PROPERTY
@given(guests, valid_options())
def test_default_policy_always_validates(g, opts):
    p = default_policy(g, opts)
    assert validate_policy(p).violations == []
    assert loads(dumps(p)) == p


def _replace_at(seq, i, item):
    seq = list(seq)
    seq[i] = item
    return tuple(seq)


# Each mutation breaks exactly one stated invariant and names the invariant
# the validator must report.  A mutation returns None when it does not apply.
def _m_share_private_ns(p, data):
    ns = data.draw(st.sampled_from(["mount", "user", "ipc", "uts"]))
    return dataclasses.replace(p, sharing=dataclasses.replace(p.sharing, **{ns: Sharing.SHARED_WITH_GUEST})), \
        "namespace-private"


def _m_forbidden_cap(p, data):
    cap = data.draw(st.sampled_from(["KILL", "SYS_ADMIN", "SYS_MODULE", "NET_ADMIN", "SETUID", "CHOWN"]))
    return dataclasses.replace(p, caps=CapabilitySet(p.caps.caps | {cap})), "capability-allowlist"


def _m_net_raw_ungated(p, data):
    if p.passive_capture:
        return None
    return dataclasses.replace(p, caps=CapabilitySet(p.caps.caps | {"NET_RAW"})), "net-raw-gate"


def _m_drop_blend(p, data):
    name = data.draw(st.sampled_from(["ptrace", "process_vm_writev"]))
    return dataclasses.replace(p, seccomp=tuple(r for r in p.seccomp if r.syscall_name != name)), "step-5 blend"


def _m_drop_bind(p, data):
    if p.allow_bind:
        return None
    return dataclasses.replace(p, seccomp=tuple(r for r in p.seccomp if r.syscall_name != "bind")), "bind-deny"


def _m_bad_errno(p, data):
    i = data.draw(st.integers(0, len(p.seccomp) - 1))
    err = data.draw(st.sampled_from([0, -1, 4096, 70000]))
    return dataclasses.replace(p, seccomp=_replace_at(p.seccomp, i, dataclasses.replace(p.seccomp[i], errno_code=err))), \
        "seccomp-errno"


def _m_drop_terminal(p, data):
    drops = [i for i, r in enumerate(p.firewall) if r.verdict is Verdict.DROP]
    i = data.draw(st.sampled_from(drops))
    return dataclasses.replace(p, firewall=p.firewall[:i] + p.firewall[i + 1:]), "firewall-terminal-drop"


def _m_foreign_classid(p, data):
    i = data.draw(st.integers(0, len(p.firewall) - 1))
    other = p.classid + data.draw(st.integers(1, 1000))
    rule = dataclasses.replace(p.firewall[i], classid=other)
    return dataclasses.replace(p, firewall=_replace_at(p.firewall, i, rule)), "firewall-classid"


def _m_loopback_accept_blocked(p, data):
    if p.localhost_mode is not LocalhostMode.BLOCK_ALL:
        return None
    port = data.draw(ports)
    rule = FirewallRule(p.classid, Direction.OUT, Verdict.ACCEPT, Endpoint("127.0.0.1", port), loopback=True)
    return dataclasses.replace(p, firewall=(rule,) + p.firewall), "localhost-block"


def _m_stray_accept(p, data):
    ep = data.draw(endpoints)
    if ep == p.backend_endpoint:
        return None
    rule = FirewallRule(p.classid, Direction.OUT, Verdict.ACCEPT, ep)
    return dataclasses.replace(p, firewall=(rule,) + p.firewall), "firewall-accept-scope"


def _m_bad_limit(p, data):
    name = data.draw(st.sampled_from(["cpu_quota", "memory_bytes", "pids_max", "blkio_bps", "cpu_shares"]))
    value = data.draw(st.sampled_from([0, -1, -1024]))
    return dataclasses.replace(p, limits=dataclasses.replace(p.limits, **{name: value})), "limits-positive"


def _m_uid_root(p, data):
    if p.guest_owner_uid == 0:
        return None
    return dataclasses.replace(p, uid_map=UidMapping(0, 0, 1)), "uid-deprivileged"


def _m_uid_owner(p, data):
    u = p.guest_owner_uid
    return dataclasses.replace(p, uid_map=UidMapping(u, u, 1)), "uid-deprivileged"


def _m_writable_mount(p, data):
    i = data.draw(st.integers(0, len(p.mounts) - 1))
    return dataclasses.replace(p, mounts=_replace_at(p.mounts, i, dataclasses.replace(
        p.mounts[i], mode=MountMode.READ_WRITE))), "mounts-read-only"


def _m_missing_mount(p, data):
    if data.draw(st.booleans()):
        kept = tuple(m for m in p.mounts if m.target != "/guest")
    else:
        kept = tuple(m for m in p.mounts if not m.target.startswith("/guest-cgroup/"))
    return dataclasses.replace(p, mounts=kept), "mandatory-mounts"


def _m_bad_bind_port(p, data):
    port = data.draw(st.sampled_from([0, -5, 65536, 100000]))
    return dataclasses.replace(p, bind_port_allowlist=p.bind_port_allowlist + (port,)), "port-range"


def _m_passive_private_net(p, data):
    return dataclasses.replace(p, passive_capture=True, caps=CapabilitySet(p.caps.caps | {"NET_RAW"}),
                               sharing=dataclasses.replace(p.sharing, net=Sharing.PRIVATE)), "passive-capture-net"


MUTATIONS = [
    _m_share_private_ns, _m_forbidden_cap, _m_net_raw_ungated, _m_drop_blend, _m_drop_bind, _m_bad_errno,
    _m_drop_terminal, _m_foreign_classid, _m_loopback_accept_blocked, _m_stray_accept, _m_bad_limit,
    _m_uid_root, _m_uid_owner, _m_writable_mount, _m_missing_mount, _m_bad_bind_port, _m_passive_private_net,
]


@PROPERTY
@given(guests, valid_options(), st.sampled_from(MUTATIONS), st.data())
def test_single_mutation_is_flagged(g, opts, mutate, data):
    p = default_policy(g, opts)
    out = mutate(p, data)
    if out is None:
        return
    bad, invariant = out
    assert invariant in validate_policy(bad).invariants()


@settings(max_examples=300, deadline=None)
@given(guests, valid_options(), st.data())
def test_removing_accept_rules_keeps_validity(g, opts, data):
    p = default_policy(g, opts)
    accepts = [i for i, r in enumerate(p.firewall) if r.verdict is Verdict.ACCEPT]
    if not accepts:
        return
    i = data.draw(st.sampled_from(accepts))
    assert validate_policy(dataclasses.replace(p, firewall=p.firewall[:i] + p.firewall[i + 1:])).ok


@settings(max_examples=300, deadline=None)
@given(guests, valid_options(), st.text("ABCDEFGHIJKLMNOPQRSTUVWXYZ_", min_size=1, max_size=16))
def test_caps_outside_allowlist_invalid(g, opts, cap):
    if cap in CAP_ALLOWLIST:
        return
    p = default_policy(g, opts)
    assert not validate_policy(dataclasses.replace(p, caps=CapabilitySet(p.caps.caps | {cap}))).ok


# --- seccomp rendering ------------------------------------------------------

def run_bpf(program, nr, arch=AUDIT_ARCH_X86_64):
    """Minimal classic-BPF interpreter over a seccomp_data of (nr, arch)."""
    data = struct.pack("=iI", nr, arch) + b"\0" * 56
    insns = [struct.unpack("=HBBI", program[i:i + 8]) for i in range(0, len(program), 8)]
    acc, pc = 0, 0
    while True:
        code, jt, jf, k = insns[pc]
        cls = code & 0x07
        if cls == 0x00:  # LD
            assert code == 0x20, f"unsupported load {code:#x}"
            acc = struct.unpack_from("=I", data, k)[0]
            pc += 1
        elif cls == 0x05:  # JMP
            op = code & 0xF0
            cond = {0x10: acc == k, 0x20: acc > k, 0x30: acc >= k, 0x40: bool(acc & k)}[op]
            pc += 1 + (jt if cond else jf)
        elif cls == 0x06:  # RET
            return k
        else:
            raise AssertionError(f"unexpected opcode {code:#x}")


def test_default_program_denies_three_with_eperm(guest):
    prog = render_seccomp(default_policy(guest))
    assert prog.denied == {"ptrace", "process_vm_writev", "bind"}
    assert all(err == errno.EPERM for _, _, err in prog.rules)


def test_allow_bind_program(guest):
    prog = render_seccomp(default_policy(guest, PolicyOptions(allow_bind=True)))
    assert prog.denied == {"ptrace", "process_vm_writev"}


def test_unknown_syscall(guest):
    p = default_policy(guest)
    with pytest.raises(UnknownSyscall):
        render_seccomp(dataclasses.replace(p, seccomp=p.seccomp + (SeccompRule("frobnicate"),)))


def test_program_semantics_against_interpreter(guest):
    p = default_policy(guest)
    prog = render_seccomp(p).bytecode
    denied = p.denied_syscalls()
    for name, nr in SYSCALLS_X86_64.items():
        want = SECCOMP_RET_ERRNO | errno.EPERM if name in denied else SECCOMP_RET_ALLOW
        assert run_bpf(prog, nr) == want, name
    # other ABIs never reach the allow path
    assert run_bpf(prog, SYSCALLS_X86_64["ptrace"] | 0x40000000) == SECCOMP_RET_ERRNO | errno.EPERM
    assert run_bpf(prog, SYSCALLS_X86_64["getpid"], arch=0x40000003) == SECCOMP_RET_ERRNO | errno.EPERM


@settings(max_examples=200, deadline=None)
@given(guests, valid_options())
def test_render_deterministic_and_blend(g, opts):
    p = default_policy(g, opts)
    a = render_seccomp(p)
    b = render_seccomp(loads(dumps(p)))
    assert a.bytecode == b.bytecode
    if "SYS_PTRACE" in p.caps:
        assert {"ptrace", "process_vm_writev"} <= a.denied


def _libseccomp():
    for name in ("libseccomp.so.2", "libseccomp.so"):
        try:
            return ctypes.CDLL(name)
        except OSError:
            continue
    return None


@pytest.mark.skipif(_libseccomp() is None, reason="libseccomp not installed")
def test_syscall_table_matches_libseccomp():
    lib = _libseccomp()
    lib.seccomp_syscall_resolve_name_arch.restype = ctypes.c_int
    lib.seccomp_syscall_resolve_name_arch.argtypes = [ctypes.c_uint32, ctypes.c_char_p]
    mismatched = {}
    for name, nr in SYSCALLS_X86_64.items():
        got = lib.seccomp_syscall_resolve_name_arch(AUDIT_ARCH_X86_64, name.encode())
        if got >= 0 and got != nr:
            mismatched[name] = (nr, got)
    assert mismatched == {}
    for name in ("ptrace", "process_vm_writev", "bind"):
        assert lib.seccomp_syscall_resolve_name_arch(AUDIT_ARCH_X86_64, name.encode()) == SYSCALLS_X86_64[name]


def test_filter_in_kernel_returns_eperm(guest):
    prog = render_seccomp(default_policy(guest)).bytecode
    r, w = os.pipe()
    pid = os.fork()
    if pid == 0:
        os.close(r)
        code = 1
        try:
            import socket

            from plugcell.kernel import libc
            libc.set_no_new_privs()
            libc.seccomp_install(prog)
            results = []
            try:
                libc.ptrace(16, os.getppid())  # PTRACE_ATTACH
            except OSError as e:
                results.append(e.errno)
            s = socket.socket()
            try:
                s.bind(("127.0.0.1", 0))
            except OSError as e:
                results.append(e.errno)
            results.append(os.getpid() > 0)
            os.write(w, repr(results).encode())
            code = 0
        finally:
            os._exit(code)
    os.close(w)
    out = os.read(r, 256).decode()
    os.close(r)
    _, status = os.waitpid(pid, 0)
    assert os.waitstatus_to_exitcode(status) == 0
    assert out == repr([errno.EPERM, errno.EPERM, True])


# --- firewall rendering -----------------------------------------------------

def test_backend_firewall_order(guest):
    p = default_policy(guest, PolicyOptions(backend_endpoint=Endpoint("10.0.0.5", 4433)))
    assert [r.describe() for r in render_firewall(p)] == [
        "ACCEPT OUT 10.0.0.5:4433", "DROP OUT ANY", "DROP IN ANY"]


def test_block_all_is_two_drops(guest):
    rules = render_firewall(default_policy(guest))
    assert [r.describe() for r in rules] == ["DROP OUT ANY", "DROP IN ANY"]
    assert all(r.classid == default_policy(guest).classid for r in rules)


def test_get_only_adds_proxy_exception(guest):
    p = default_policy(guest, PolicyOptions(localhost_mode=LocalhostMode.HTTP_GET_ONLY, proxy_port=3128))
    assert [r.describe() for r in render_firewall(p)] == [
        "ACCEPT OUT lo 127.0.0.1:3128", "DROP OUT ANY", "DROP IN ANY"]


def test_classid_per_ordinal(guest):
    ids = {default_policy(guest, PolicyOptions(ordinal=n)).classid for n in range(1, 50)}
    assert len(ids) == 49 and min(ids) == 0x00100001


def test_sharing_defaults_model():
    assert NamespaceSharing().user is Sharing.PRIVATE
