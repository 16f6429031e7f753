"""Thin ctypes bindings for the namespace, mount, capability and seccomp
syscalls the sandbox builder needs.  Python 3.10 lacks os.setns/os.unshare,
so everything goes through libc directly."""

import ctypes
import ctypes.util
import os

_libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6", use_errno=True)

CLONE_NEWNS = 0x00020000
CLONE_NEWCGROUP = 0x02000000
CLONE_NEWUTS = 0x04000000
CLONE_NEWIPC = 0x08000000
CLONE_NEWUSER = 0x10000000
CLONE_NEWPID = 0x20000000
CLONE_NEWNET = 0x40000000

NS_FLAGS = {
    "mnt": CLONE_NEWNS,
    "uts": CLONE_NEWUTS,
    "ipc": CLONE_NEWIPC,
    "user": CLONE_NEWUSER,
    "pid": CLONE_NEWPID,
    "net": CLONE_NEWNET,
    "cgroup": CLONE_NEWCGROUP,
}

MS_RDONLY = 1
MS_NOSUID = 2
MS_NODEV = 4
MS_NOEXEC = 8
MS_REMOUNT = 32
MS_BIND = 4096
MS_REC = 16384
MS_PRIVATE = 1 << 18
MS_SLAVE = 1 << 19
MNT_DETACH = 2

PR_SET_PDEATHSIG = 1
PR_SET_KEEPCAPS = 8
PR_SET_NAME = 15
PR_CAPBSET_READ = 23
PR_CAPBSET_DROP = 24
PR_SET_NO_NEW_PRIVS = 38
PR_GET_NO_NEW_PRIVS = 39
PR_CAP_AMBIENT = 47
PR_CAP_AMBIENT_RAISE = 2
PR_CAP_AMBIENT_CLEAR_ALL = 4

SECCOMP_SET_MODE_FILTER = 1

_LINUX_CAPABILITY_VERSION_3 = 0x20080522

NR_PIVOT_ROOT = 155
NR_SECCOMP = 317
NR_CAPGET = 125
NR_CAPSET = 126
NR_PTRACE = 101
NR_PROCESS_VM_WRITEV = 311

_libc.syscall.restype = ctypes.c_long
_libc.mount.argtypes = [ctypes.c_char_p, ctypes.c_char_p, ctypes.c_char_p, ctypes.c_ulong, ctypes.c_char_p]
_libc.umount2.argtypes = [ctypes.c_char_p, ctypes.c_int]
_libc.ptrace.restype = ctypes.c_long
_libc.ptrace.argtypes = [ctypes.c_long, ctypes.c_long, ctypes.c_void_p, ctypes.c_void_p]
_libc.prctl.argtypes = [ctypes.c_int, ctypes.c_ulong, ctypes.c_ulong, ctypes.c_ulong, ctypes.c_ulong]


def _check(ret, what):
    if ret < 0:
        err = ctypes.get_errno()
        raise OSError(err, f"{what}: {os.strerror(err)}")
    return ret


def _b(path):
    if path is None:
        return None
    return os.fsencode(path)


def setns(fd, nstype=0):
    _check(_libc.setns(fd, nstype), "setns")


def unshare(flags):
    _check(_libc.unshare(flags), "unshare")


def mount(source, target, fstype=None, flags=0, data=None):
    _check(
        _libc.mount(_b(source), _b(target), _b(fstype), flags, _b(data)),
        f"mount {target}",
    )


def umount(target, flags=0):
    _check(_libc.umount2(_b(target), flags), f"umount {target}")


def pivot_root(new_root, put_old):
    _check(
        _libc.syscall(NR_PIVOT_ROOT, _b(new_root), _b(put_old)),
        "pivot_root",
    )


def sethostname(name):
    raw = name.encode()
    _check(_libc.sethostname(raw, len(raw)), "sethostname")


def prctl(option, arg2=0, arg3=0, arg4=0, arg5=0):
    return _check(_libc.prctl(option, arg2, arg3, arg4, arg5), f"prctl({option})")


def set_name(name):
    buf = ctypes.create_string_buffer(name.encode()[:15])
    _check(_libc.prctl(PR_SET_NAME, ctypes.addressof(buf), 0, 0, 0), "prctl(PR_SET_NAME)")


class _CapHeader(ctypes.Structure):
    _fields_ = [("version", ctypes.c_uint32), ("pid", ctypes.c_int)]


class _CapData(ctypes.Structure):
    _fields_ = [
        ("effective", ctypes.c_uint32),
        ("permitted", ctypes.c_uint32),
        ("inheritable", ctypes.c_uint32),
    ]


def _split(mask):
    return mask & 0xFFFFFFFF, (mask >> 32) & 0xFFFFFFFF


def capset(effective, permitted, inheritable):
    """Set the calling thread's capability sets from 64-bit masks."""
    hdr = _CapHeader(_LINUX_CAPABILITY_VERSION_3, 0)
    data = (_CapData * 2)()
    for i, (e, p, h) in enumerate(zip(_split(effective), _split(permitted), _split(inheritable))):
        data[i].effective, data[i].permitted, data[i].inheritable = e, p, h
    _check(_libc.syscall(NR_CAPSET, ctypes.byref(hdr), data), "capset")


def capget(pid=0):
    hdr = _CapHeader(_LINUX_CAPABILITY_VERSION_3, pid)
    data = (_CapData * 2)()
    _check(_libc.syscall(NR_CAPGET, ctypes.byref(hdr), data), "capget")
    eff = data[0].effective | (data[1].effective << 32)
    prm = data[0].permitted | (data[1].permitted << 32)
    inh = data[0].inheritable | (data[1].inheritable << 32)
    return eff, prm, inh


def capbset_drop(cap):
    prctl(PR_CAPBSET_DROP, cap)


def capbset_read(cap):
    return prctl(PR_CAPBSET_READ, cap) == 1


def ambient_raise(cap):
    prctl(PR_CAP_AMBIENT, PR_CAP_AMBIENT_RAISE, cap)


def ambient_clear():
    prctl(PR_CAP_AMBIENT, PR_CAP_AMBIENT_CLEAR_ALL)


def set_no_new_privs():
    prctl(PR_SET_NO_NEW_PRIVS, 1)


def set_keepcaps(on=True):
    prctl(PR_SET_KEEPCAPS, 1 if on else 0)


def set_pdeathsig(sig):
    prctl(PR_SET_PDEATHSIG, sig)


class _SockFprog(ctypes.Structure):
    _fields_ = [("len", ctypes.c_ushort), ("filter", ctypes.c_void_p)]


def seccomp_install(program_bytes):
    """Install a classic-BPF seccomp filter given its packed sock_filter bytes."""
    if len(program_bytes) % 8:
        raise ValueError("seccomp program must be a multiple of 8 bytes")
    buf = ctypes.create_string_buffer(program_bytes, len(program_bytes))
    prog = _SockFprog(len(program_bytes) // 8, ctypes.cast(buf, ctypes.c_void_p))
    _check(
        _libc.syscall(NR_SECCOMP, SECCOMP_SET_MODE_FILTER, 0, ctypes.byref(prog)),
        "seccomp",
    )


def ptrace(request, pid, addr=0, data=0):
    """Raw ptrace(2); returns the result or raises OSError."""
    ctypes.set_errno(0)
    ret = _libc.ptrace(request, pid, ctypes.c_void_p(addr), ctypes.c_void_p(data))
    err = ctypes.get_errno()
    if ret == -1 and err:
        raise OSError(err, f"ptrace({request}): {os.strerror(err)}")
    return ret


class _IoVec(ctypes.Structure):
    _fields_ = [("base", ctypes.c_void_p), ("len", ctypes.c_size_t)]


def process_vm_writev(pid, remote_addr, data):
    local_buf = ctypes.create_string_buffer(data, len(data))
    local = _IoVec(ctypes.cast(local_buf, ctypes.c_void_p), len(data))
    remote = _IoVec(remote_addr, len(data))
    ret = _libc.syscall(
        NR_PROCESS_VM_WRITEV, pid, ctypes.byref(local), 1, ctypes.byref(remote), 1, 0
    )
    return _check(ret, "process_vm_writev")


