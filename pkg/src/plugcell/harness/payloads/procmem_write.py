"""Overwrites a guest process's memory through /proc/<pid>/mem, falling
back to process_vm_writev."""

import ctypes
import os

from plugcell.harness.payloads._common import attempt, hold, victim_info

INJECTED = b"OVERWRITTEN-BY-PAYLOAD"

libc = ctypes.CDLL(None, use_errno=True)


class IOVec(ctypes.Structure):
    _fields_ = [("base", ctypes.c_void_p), ("len", ctypes.c_size_t)]


def via_procmem(pid, addr):
    with open(f"/proc/{pid}/mem", "r+b", buffering=0) as f:
        f.seek(addr)
        f.write(INJECTED)


def via_vm_writev(pid, addr):
    buf = ctypes.create_string_buffer(INJECTED, len(INJECTED))
    local = IOVec(ctypes.cast(buf, ctypes.c_void_p), len(INJECTED))
    remote = IOVec(addr, len(INJECTED))
    libc.process_vm_writev.restype = ctypes.c_ssize_t
    n = libc.process_vm_writev(pid, ctypes.byref(local), 1, ctypes.byref(remote), 1, 0)
    if n < 0:
        e = ctypes.get_errno()
        raise OSError(e, os.strerror(e))


if __name__ == "__main__":
    info = victim_info()
    attempt("procmem-write", via_procmem, info["pid"], info["addr"])
    attempt("process_vm_writev", via_vm_writev, info["pid"], info["addr"])
    hold(1)
