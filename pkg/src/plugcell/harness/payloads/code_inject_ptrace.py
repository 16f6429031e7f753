"""Overwrites a guest process's memory through ptrace."""

import ctypes
import os

from plugcell.harness.payloads._common import attempt, hold, victim_info

PTRACE_POKEDATA = 5
PTRACE_ATTACH = 16
PTRACE_DETACH = 17
INJECTED = b"INJECTED"

libc = ctypes.CDLL(None, use_errno=True)
libc.ptrace.restype = ctypes.c_long
libc.ptrace.argtypes = [ctypes.c_long, ctypes.c_long, ctypes.c_void_p, ctypes.c_void_p]


def ptrace(req, pid, addr=0, data=0):
    if libc.ptrace(req, pid, addr, data) == -1:
        e = ctypes.get_errno()
        if e:
            raise OSError(e, os.strerror(e))


def inject(pid, addr):
    ptrace(PTRACE_ATTACH, pid)
    os.waitpid(pid, 0)
    try:
        word = int.from_bytes(INJECTED, "little")
        ptrace(PTRACE_POKEDATA, pid, addr, word)
    finally:
        ptrace(PTRACE_DETACH, pid)


if __name__ == "__main__":
    info = victim_info()
    attempt("ptrace-inject", inject, info["pid"], info["addr"], pid=info["pid"])
    hold(1)
