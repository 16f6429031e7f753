import dataclasses
import http.server
import json
import os
import socketserver
import subprocess
import sys
import threading

import pytest

from conftest import needs_kernel
from plugcell.errors import EngineUnavailable, NotFound, NotRunning
from plugcell.guest import DockerAdapter, ExplicitAdapter, guest_alive, resolve_guest
from plugcell.kernel import proc


class _Engine(socketserver.ThreadingMixIn, socketserver.UnixStreamServer):
    daemon_threads = True


def _serve(path, containers):
    seen = []

    class Handler(http.server.BaseHTTPRequestHandler):
        def address_string(self):
            return "unix"

        def log_message(self, *a):
            pass

        def do_GET(self):
            seen.append(("GET", self.path))
            cid = self.path.split("/")[2]
            info = containers.get(cid)
            body = json.dumps(info or {"message": "no such container"}).encode()
            self.send_response(200 if info else 404)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

    srv = _Engine(path, Handler)
    threading.Thread(target=srv.serve_forever, daemon=True).start()
    return srv, seen


@pytest.fixture
def engine(tmp_path):
    sock = str(tmp_path / "engine.sock")
    rootfs = tmp_path / "merged"
    rootfs.mkdir()
    containers = {
        "web": {"State": {"Running": True, "Pid": os.getpid()},
                "GraphDriver": {"Data": {"MergedDir": str(rootfs)}}},
        "stopped": {"State": {"Running": False, "Pid": 0}},
        "nomerged": {"State": {"Running": True, "Pid": os.getpid()}},
    }
    srv, seen = _serve(sock, containers)
    yield DockerAdapter(sock), seen, str(rootfs)
    srv.shutdown()
    srv.server_close()


def test_docker_adapter_running(engine):
    adapter, seen, rootfs = engine
    g = resolve_guest("web", adapter)
    assert g.init_pid == os.getpid() and g.rootfs_path == rootfs
    assert all(method == "GET" for method, _ in seen)


def test_docker_adapter_stopped(engine):
    with pytest.raises(NotRunning):
        resolve_guest("stopped", engine[0])


def test_docker_adapter_missing(engine):
    with pytest.raises(NotFound):
        resolve_guest("ghost", engine[0])


def test_docker_adapter_falls_back_to_proc_root(engine):
    assert resolve_guest("nomerged", engine[0]).rootfs_path == f"/proc/{os.getpid()}/root"


def test_engine_unavailable(tmp_path):
    with pytest.raises(EngineUnavailable):
        resolve_guest("web", DockerAdapter(str(tmp_path / "nope.sock")))


def test_explicit_adapter_checks(tmp_path):
    with pytest.raises(NotFound):
        resolve_guest("x", ExplicitAdapter(os.getpid(), str(tmp_path / "missing")))
    with pytest.raises(NotRunning):
        resolve_guest("x", ExplicitAdapter(2 ** 22 + 7, str(tmp_path)))


def test_resolve_self_fields(tmp_path):
    g = resolve_guest("me", ExplicitAdapter(os.getpid(), str(tmp_path)))
    assert g.pid_ns_id == proc.ns_id(os.getpid(), "pid")
    assert g.net_ns_id == proc.ns_id(os.getpid(), "net")
    assert os.stat(g.pid_ns_ref).st_ino == g.pid_ns_id
    assert {"cpu", "memory", "pids", "blkio"} <= set(g.cgroup_paths)
    assert g.owner_uid == os.getuid()
    assert type(g).from_dict(g.to_dict()) == g


def test_resolve_never_opens_for_writing(tmp_path):
    writes = []
    code = f"""
import os, sys
from plugcell.guest import ExplicitAdapter, resolve_guest
flagged = []
def hook(event, args):
    if event == "open" and len(args) >= 3:
        path, mode, flags = args[:3]
        if (mode and any(c in str(mode) for c in "wax+")) or (flags or 0) & (os.O_WRONLY | os.O_RDWR | os.O_CREAT):
            flagged.append(str(path))
sys.addaudithook(hook)
resolve_guest("me", ExplicitAdapter(os.getpid(), {str(tmp_path)!r}))
print(repr(flagged))
"""
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "[]"


def test_recycled_pid_identity(tmp_path):
    child = subprocess.Popen(["sleep", "60"])
    try:
        g = resolve_guest("c", ExplicitAdapter(child.pid, str(tmp_path)))
        assert guest_alive(g)
        # same pid number, different process: start time no longer matches
        assert not guest_alive(dataclasses.replace(g, start_time=g.start_time + 1))
        assert not guest_alive(dataclasses.replace(g, pid_ns_id=g.pid_ns_id + 1))
    finally:
        child.kill()
        child.wait()
    assert not guest_alive(g)


@needs_kernel
def test_fixture_guest_resolution(live_guest):
    a = live_guest.target
    b = resolve_guest(live_guest.ident, ExplicitAdapter(live_guest.init_pid, live_guest.rootfs))
    assert a.init_pid > 1 and os.path.isdir(a.rootfs_path)
    assert (a.pid_ns_id, a.net_ns_id) == (b.pid_ns_id, b.net_ns_id)
    assert a.pid_ns_id == proc.ns_id(a.init_pid, "pid") != proc.ns_id(os.getpid(), "pid")
    assert guest_alive(a)


@needs_kernel
def test_alive_false_after_teardown():
    from plugcell.harness.fixture import FixtureGuest, GuestSpec

    g = FixtureGuest(GuestSpec(name="brief")).start()
    target = g.target
    assert guest_alive(target)
    g.stop()
    assert not guest_alive(target)
    with pytest.raises(NotRunning):
        resolve_guest("brief", ExplicitAdapter(target.init_pid, "/"))
