"""Immutable value types describing what a sandbox grants and denies."""

import enum
import errno
import ipaddress
from dataclasses import dataclass, field
from typing import Optional


class Sharing(str, enum.Enum):
    PRIVATE = "private"
    SHARED_WITH_GUEST = "shared_with_guest"


class LocalhostMode(str, enum.Enum):
    BLOCK_ALL = "block_all"
    HTTP_GET_ONLY = "http_get_only"
    ALLOW_ALL = "allow_all"


class SeccompAction(str, enum.Enum):
    DENY_ERRNO = "deny_errno"
    ALLOW = "allow"


class Direction(str, enum.Enum):
    IN = "in"
    OUT = "out"


class Verdict(str, enum.Enum):
    DROP = "drop"
    ACCEPT = "accept"


class MountMode(str, enum.Enum):
    READ_ONLY = "read_only"
    READ_WRITE = "read_write"


# Capabilities a sandbox may ever hold.  KILL is deliberately absent: it
# would bypass the signal permission checks that uid separation relies on.
CAP_ALLOWLIST = frozenset({"DAC_READ_SEARCH", "SYS_CHROOT", "SYS_PTRACE", "NET_RAW"})
CAP_FORBIDDEN = frozenset({"KILL", "SYS_ADMIN", "SYS_MODULE"})
DEFAULT_CAPS = frozenset({"DAC_READ_SEARCH", "SYS_CHROOT", "SYS_PTRACE"})

# syscalls that CAP_SYS_PTRACE would otherwise let a plugin use against guests
PTRACE_BLEND_SYSCALLS = ("ptrace", "process_vm_writev")

GUEST_MOUNT = "/guest"
GUEST_CGROUP_MOUNT = "/guest-cgroup"
DEFAULT_CLASSID_BASE = 0x00100000
DEFAULT_UID_BASE = 100000
DEFAULT_PROXY_PORT = 3128


@dataclass(frozen=True)
class NamespaceSharing:
    mount: Sharing = Sharing.PRIVATE
    user: Sharing = Sharing.PRIVATE
    ipc: Sharing = Sharing.PRIVATE
    uts: Sharing = Sharing.PRIVATE
    pid: Sharing = Sharing.SHARED_WITH_GUEST
    net: Sharing = Sharing.SHARED_WITH_GUEST


@dataclass(frozen=True)
class CapabilitySet:
    caps: frozenset = DEFAULT_CAPS

    def __contains__(self, name):
        return name in self.caps


@dataclass(frozen=True)
class SeccompRule:
    syscall_name: str
    action: SeccompAction = SeccompAction.DENY_ERRNO
    errno_code: int = errno.EPERM

    @property
    def denies(self):
        return self.action is SeccompAction.DENY_ERRNO


@dataclass(frozen=True, order=True)
class Endpoint:
    host: str
    port: int
    proto: str = "tcp"

    @classmethod
    def parse(cls, text, proto="tcp"):
        host, _, port = text.rpartition(":")
        if not host or not port.isdigit():
            raise ValueError(f"expected host:port, got {text!r}")
        return cls(host, int(port), proto)

    @property
    def is_loopback(self):
        try:
            return ipaddress.ip_address(self.host).is_loopback
        except ValueError:
            return self.host == "localhost"

    def __str__(self):
        return f"{self.host}:{self.port}"


@dataclass(frozen=True)
class FirewallRule:
    """One classid-matched rule.  ``destination`` None means ANY."""

    classid: int
    direction: Direction
    verdict: Verdict
    destination: Optional[Endpoint] = None
    loopback: bool = False

    @property
    def targets_loopback(self):
        return self.loopback or (self.destination is not None and self.destination.is_loopback)

    def describe(self):
        where = str(self.destination) if self.destination else "ANY"
        lo = " lo" if self.loopback else ""
        return f"{self.verdict.name} {self.direction.name}{lo} {where}"


@dataclass(frozen=True)
class ResourceLimits:
    cpu_quota: float = 1.0
    memory_bytes: int = 256 * 1024 * 1024
    pids_max: int = 64
    blkio_bps: int = 16 * 1024 * 1024
    # relative weight against sibling cgroups; 1024 is the kernel default
    cpu_shares: int = 128


@dataclass(frozen=True)
class UidMapping:
    inside_uid: int
    host_uid: int
    count: int = 1


@dataclass(frozen=True)
class MountSpec:
    source: str
    target: str
    mode: MountMode = MountMode.READ_ONLY


@dataclass(frozen=True)
class SandboxPolicy:
    sharing: NamespaceSharing
    uid_map: UidMapping
    caps: CapabilitySet
    seccomp: tuple
    firewall: tuple
    limits: ResourceLimits
    mounts: tuple
    localhost_mode: LocalhostMode = LocalhostMode.BLOCK_ALL
    passive_capture: bool = False
    allow_bind: bool = False
    bind_port_allowlist: tuple = ()
    backend_endpoint: Optional[Endpoint] = None
    classid: int = DEFAULT_CLASSID_BASE + 1
    guest_owner_uid: int = 0
    proxy_port: int = DEFAULT_PROXY_PORT

    def denied_syscalls(self):
        return {r.syscall_name for r in self.seccomp if r.denies}


@dataclass(frozen=True)
class PolicyOptions:
    backend_endpoint: Optional[Endpoint] = None
    localhost_mode: LocalhostMode = LocalhostMode.BLOCK_ALL
    passive_capture: bool = False
    allow_bind: bool = False
    bind_port_allowlist: tuple = ()
    pid: Sharing = Sharing.SHARED_WITH_GUEST
    net: Sharing = Sharing.SHARED_WITH_GUEST
    ordinal: int = 1
    classid_base: int = DEFAULT_CLASSID_BASE
    uid_base: int = DEFAULT_UID_BASE
    limits: ResourceLimits = field(default_factory=ResourceLimits)
    proxy_port: int = DEFAULT_PROXY_PORT
    backend_proto: str = "tcp"
