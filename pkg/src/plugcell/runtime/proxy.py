"""GET-only forward proxy on the guest's loopback.

Started by the builder when a policy uses the HTTP_GET_ONLY localhost mode.
It runs in the guest network namespace but outside the sandbox cgroup, so
its own traffic carries no sandbox classid.  Requests must be absolute-form
``GET http://127.0.0.1:<port>/path``; anything else is answered with 405 or
403 and never forwarded.
"""

import argparse
import os
import socket
import sys
import threading
from urllib.parse import urlsplit

from plugcell.kernel import libc

MAX_HEADER = 16384
LOOPBACK_HOSTS = {"127.0.0.1", "localhost"}


def _reply(conn, code, reason):
    body = f"{code} {reason}\n".encode()
    conn.sendall(
        f"HTTP/1.0 {code} {reason}\r\nContent-Length: {len(body)}\r\nConnection: close\r\n\r\n".encode()
        + body
    )


def parse_request_head(head):
    """Return (method, host, port, path, header_lines) from a request head."""
    lines = head.decode("latin-1").split("\r\n")
    method, target, _version = lines[0].split(" ", 2)
    url = urlsplit(target)
    if url.scheme != "http" or not url.hostname:
        raise ValueError("absolute http URL required")
    path = url.path or "/"
    if url.query:
        path += "?" + url.query
    return method, url.hostname, url.port or 80, path, [h for h in lines[1:] if h]


def handle(conn):
    try:
        head = b""
        while b"\r\n\r\n" not in head:
            chunk = conn.recv(4096)
            if not chunk:
                return
            head += chunk
            if len(head) > MAX_HEADER:
                _reply(conn, 431, "Request Header Fields Too Large")
                return
        head = head.split(b"\r\n\r\n", 1)[0]
        try:
            method, host, port, path, headers = parse_request_head(head)
        except ValueError:
            _reply(conn, 400, "Bad Request")
            return
        if method != "GET":
            _reply(conn, 405, "Method Not Allowed")
            return
        if host not in LOOPBACK_HOSTS:
            _reply(conn, 403, "Forbidden")
            return
        keep = [h for h in headers if not h.lower().startswith(("connection:", "proxy-", "content-length:",
                                                                "transfer-encoding:"))]
        upstream = socket.create_connection(("127.0.0.1", port), timeout=10)
        with upstream:
            req = f"GET {path} HTTP/1.0\r\n" + "".join(h + "\r\n" for h in keep) + "Connection: close\r\n\r\n"
            upstream.sendall(req.encode("latin-1"))
            while True:
                data = upstream.recv(65536)
                if not data:
                    break
                conn.sendall(data)
    except OSError:
        pass
    finally:
        conn.close()


def main(argv=None):
    ap = argparse.ArgumentParser(prog="plugcell-proxy")
    ap.add_argument("--netns", required=True)
    ap.add_argument("--port", type=int, required=True)
    ap.add_argument("--uid", type=int, default=65534)
    ap.add_argument("--cgroup-procs", action="append", default=[])
    args = ap.parse_args(argv)
    for path in args.cgroup_procs:
        with open(path, "w") as f:
            f.write(str(os.getpid()))
    fd = os.open(args.netns, os.O_RDONLY)
    libc.setns(fd, libc.CLONE_NEWNET)
    os.close(fd)
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind(("127.0.0.1", args.port))
    srv.listen(16)
    os.setgroups([])
    os.setresgid(args.uid, args.uid, args.uid)
    os.setresuid(args.uid, args.uid, args.uid)
    print("listening", flush=True)
    while True:
        conn, _ = srv.accept()
        threading.Thread(target=handle, args=(conn,), daemon=True).start()


if __name__ == "__main__":
    sys.exit(main())
