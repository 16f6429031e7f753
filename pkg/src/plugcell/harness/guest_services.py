"""Services that fixture guests run.  Each writes /run/svc-<name>.ready once
it is up, then runs until killed."""

import ctypes
import json
import os
import socket
import subprocess
import sys
import time

CANARY = b"CANARY-ORIGINAL-0123456789"
VICTIM_INFO = "/srv/victim.json"
VULN_PORT = 7777
WEB_PORT = 8080
ROOTED_MARKER = "/tmp/rooted"
PWNED_MARKER = "/tmp/pwned"


def _ready(name):
    with open(f"/run/svc-{name}.ready", "w") as f:
        f.write(str(os.getpid()))


def _forever():
    while True:
        time.sleep(3600)


def sleeper():
    _ready("sleeper")
    os.execv("/usr/bin/sleep", ["sleep", "infinity"])


def victim():
    """Holds a known canary in memory for the code-injection attacks."""
    buf = ctypes.create_string_buffer(CANARY, len(CANARY))
    info = {"pid": os.getpid(), "addr": ctypes.addressof(buf), "len": len(CANARY)}
    tmp = VICTIM_INFO + ".tmp"
    with open(tmp, "w") as f:
        json.dump(info, f)
    os.chmod(tmp, 0o644)
    os.replace(tmp, VICTIM_INFO)
    _ready("victim")
    _forever()


def vulnsvc():
    """Loopback-only service with a shell-injection bug in its greeting,
    in the style of Samba's username map script."""
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind(("127.0.0.1", VULN_PORT))
    srv.listen(8)
    _ready("vulnsvc")
    while True:
        conn, _ = srv.accept()
        with conn:
            conn.settimeout(5)
            try:
                line = conn.recv(1024).decode(errors="replace").strip()
            except OSError:
                continue
            if line.startswith("USER "):
                out = subprocess.run(f"echo hello {line[5:]}", shell=True,
                                     capture_output=True, timeout=5)
                conn.sendall(out.stdout)


def chkrootkit():
    """Periodic root job that executes /tmp/update if present, the pattern
    behind the chkrootkit local privilege escalation."""
    _ready("chkrootkit")
    while True:
        if os.path.exists("/tmp/update"):
            subprocess.run(["/bin/sh", "/tmp/update"], timeout=5,
                           stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
        time.sleep(0.1)


def holder():
    """Keeps /tmp/data.log open for the open-files collector."""
    f = open("/tmp/data.log", "a")
    _ready("holder")
    _forever()
    f.close()


def web():
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind(("0.0.0.0", WEB_PORT))
    srv.listen(8)
    _ready("web")
    while True:
        conn, _ = srv.accept()
        with conn:
            conn.recv(4096)
            body = b'{"status":"ok"}'
            conn.sendall(b"HTTP/1.0 200 OK\r\nContent-Length: %d\r\n\r\n%s" % (len(body), body))


def status_page():
    """Loopback status page, the target of the HTTP-GET-over-localhost demo."""
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind(("127.0.0.1", 8081))
    srv.listen(8)
    _ready("status_page")
    while True:
        conn, _ = srv.accept()
        with conn:
            req = conn.recv(4096)
            method = req.split(b" ", 1)[0]
            body = b'{"busy_workers":3,"idle_workers":5}' if method == b"GET" else b"denied"
            if method != b"GET":
                with open("/tmp/status_page.mutated", "w") as f:
                    f.write(method.decode(errors="replace"))
            conn.sendall(b"HTTP/1.0 200 OK\r\nContent-Length: %d\r\n\r\n%s" % (len(body), body))


SERVICES = {
    "sleeper": sleeper, "victim": victim, "vulnsvc": vulnsvc, "chkrootkit": chkrootkit,
    "holder": holder, "web": web, "status_page": status_page,
}


if __name__ == "__main__":
    SERVICES[sys.argv[1]]()
