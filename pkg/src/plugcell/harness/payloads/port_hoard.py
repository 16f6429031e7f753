"""Binds the guest's service ports before the guest can."""

import socket

from plugcell.harness.payloads._common import attempt, hold

PORTS = (8080, 80, 443, 8000, 8443)

if __name__ == "__main__":
    held = []
    for port in PORTS:
        s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        if attempt("bind", s.bind, ("0.0.0.0", port), port=port):
            attempt("listen", s.listen, 16, port=port)
            held.append(s)
    hold()
