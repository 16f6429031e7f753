import dataclasses
import json
import socket
import subprocess
import sys
import textwrap
import threading
import time

import pytest

from conftest import needs_kernel
from kernel_util import BASE_DIR, CG_PARENT, build, destroy, full_snapshot, run_probe
from plugcell.core.session import AttachOptions, Phase, attach, detach, list_sessions
from plugcell.errors import FetchDeadline, PolicyInvalid
from plugcell.harness.fixture import FixtureGuest, GuestSpec, wait_for
from plugcell.policy import Endpoint, default_policy, dumps
from plugcell.runtime import sandbox as sb

pytestmark = needs_kernel

TWO = (b'{"name": "os", "source": "store:os", "freq_s": 1}\n'
       b'{"name": "procs", "source": "store:procs", "freq_s": 1}\n')


def opts_for(guest, tmp_path, **kw):
    kw.setdefault("manifest", TWO)
    return AttachOptions(guest_pid=guest.init_pid, guest_rootfs=guest.rootfs, backend=f"file:{tmp_path}/out",
                         base_dir=BASE_DIR, cgroup_parent=CG_PARENT, event_log=str(tmp_path / "events.ndjson"),
                         **kw)


def backend_records(tmp_path, label):
    path = tmp_path / "out" / f"{label}.ndjson"
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line]


class _Hang:
    """Accepts connections and never answers."""

    def __init__(self, host):
        self.sock = socket.socket()
        self.sock.bind((host, 0))
        self.sock.listen(8)
        self.port = self.sock.getsockname()[1]
        self.held = []
        threading.Thread(target=self._run, daemon=True).start()

    def _run(self):
        while True:
            try:
                self.held.append(self.sock.accept()[0])
            except OSError:
                return

    def close(self):
        for c in self.held:
            c.close()
        self.sock.close()


def test_attach_two_plugins_collecting(live_guest, tmp_path):
    before = full_snapshot(live_guest)
    s = attach(live_guest.ident, opts_for(live_guest, tmp_path))
    try:
        assert s.phase is Phase.COLLECTING and s.collecting
        assert s.id in list_sessions(BASE_DIR)
        # records from both plugins inside two collection periods
        assert wait_for(lambda: {r["plugin"] for r in backend_records(tmp_path, live_guest.ident)}
                        >= {"os", "procs"}, timeout=2.0)
    finally:
        stats = detach(s)
    assert stats.records > 0 and stats.validation_failures == 0
    assert full_snapshot(live_guest) == before
    phases = [json.loads(l)["phase"] for l in (tmp_path / "events.ndjson").read_text().splitlines()
              if json.loads(l)["event"] == "phase"]
    assert phases == ["FETCH_WINDOW", "COLLECTING"]


def test_manifest_from_guest_rootfs_wins(tmp_path):
    manifest = b'{"name": "metrics", "source": "store:metrics", "freq_s": 1}\n'
    with FixtureGuest(GuestSpec(name="mf", manifest=manifest)) as g:
        s = attach(g.ident, opts_for(g, tmp_path))
        try:
            assert wait_for(lambda: backend_records(tmp_path, g.ident), timeout=3.0)
        finally:
            detach(s)
    assert {r["plugin"] for r in backend_records(tmp_path, g.ident)} == {"metrics"}


def test_invalid_policy_file_builds_nothing(live_guest, tmp_path):
    pol = default_policy(live_guest.target)
    bad = tmp_path / "policy.json"
    bad.write_text(dumps(dataclasses.replace(pol, seccomp=())))
    before = full_snapshot(live_guest)
    with pytest.raises(PolicyInvalid) as exc:
        attach(live_guest.ident, opts_for(live_guest, tmp_path, policy_file=str(bad)))
    assert exc.value.report.violations
    assert full_snapshot(live_guest) == before


def test_fetch_deadline_aborts_with_teardown(live_guest, tmp_path):
    hang = _Hang(live_guest.host_ip)
    manifest = json.dumps({"name": "slow", "source": f"http://{live_guest.host_ip}:{hang.port}/p",
                           "freq_s": 1}).encode() + b"\n"
    before = full_snapshot(live_guest)
    t0 = time.monotonic()
    try:
        with pytest.raises(FetchDeadline):
            attach(live_guest.ident, opts_for(live_guest, tmp_path, manifest=manifest, fetch_deadline_s=2.0,
                                              runner_args=("--fetch-timeout-s", "60")))
    finally:
        hang.close()
    assert time.monotonic() - t0 < 15
    assert hang.held, "the runner never reached the fetch endpoint"
    assert full_snapshot(live_guest) == before
    assert list_sessions(BASE_DIR) == []


def test_fetch_after_window_closed_fails(live_guest):
    served = []

    class Srv(threading.Thread):
        def __init__(self):
            super().__init__(daemon=True)
            self.sock = socket.socket()
            self.sock.bind((live_guest.host_ip, 0))
            self.sock.listen(4)
            self.port = self.sock.getsockname()[1]

        def run(self):
            while True:
                try:
                    c, _ = self.sock.accept()
                except OSError:
                    return
                c.recv(4096)
                served.append(1)
                c.sendall(b"HTTP/1.0 200 OK\r\nContent-Length: 2\r\n\r\nok")
                c.close()

    srv = Srv()
    srv.start()
    code = textwrap.dedent(f"""
        import json
        from plugcell.errors import FetchFailed
        from plugcell.runner.fetch import FetchPolicy, fetch_one
        from plugcell.runner.manifest import PluginEntry
        e = PluginEntry("p", "http://{live_guest.host_ip}:{srv.port}/p", 1.0)
        try:
            print(json.dumps({{"got": fetch_one(e, FetchPolicy("/tmp", timeout_s=2)).decode()}}))
        except FetchFailed as err:
            print(json.dumps({{"error": err.code}}))
    """)
    h = build(live_guest)
    try:
        sb.open_fetch_window(h, [Endpoint(live_guest.host_ip, srv.port)])
        sb.close_fetch_window(h)
        out = run_probe(h, code)
    finally:
        destroy(h)
        srv.sock.close()
    assert out == {"error": "FETCH_FAILED"} and served == []


def test_detach_twice_and_after_guest_death(tmp_path):
    g = FixtureGuest(GuestSpec(name="dies")).start()
    before = None
    try:
        s = attach(g.ident, opts_for(g, tmp_path))
        g.kill()
        assert wait_for(lambda: not s.collecting, timeout=10)
        first = detach(s)
        second = detach(s)
        assert first is second and s.phase is Phase.STOPPED
    finally:
        g.stop()
    before = full_snapshot()
    assert not any(s.sandbox.sandbox_id in str(v) for v in before.values())
    assert list_sessions(BASE_DIR) == []


def test_concurrent_sessions_do_not_interfere(tmp_path):
    with FixtureGuest(GuestSpec(name="ga")) as a, FixtureGuest(GuestSpec(name="gb", hostname="bee")) as b:
        sa = attach(a.ident, opts_for(a, tmp_path))
        sb_ = attach(b.ident, opts_for(b, tmp_path))
        try:
            assert wait_for(lambda: backend_records(tmp_path, a.ident) and backend_records(tmp_path, b.ident),
                            timeout=3)
            detach(sa)
            n = len(backend_records(tmp_path, b.ident))
            assert sb_.collecting
            assert wait_for(lambda: len(backend_records(tmp_path, b.ident)) > n, timeout=3)
        finally:
            detach(sa)
            detach(sb_)
    ra, rb = backend_records(tmp_path, a.ident), backend_records(tmp_path, b.ident)
    assert {r["namespace_label"] for r in ra} == {a.ident}
    assert {r["namespace_label"] for r in rb} == {b.ident}
    hosts = {r["payload"]["hostname"] for r in rb if r["feature_type"] == "os"}
    assert hosts == {"bee"}


def test_core_never_execs_plugins(live_guest, tmp_path):
    """Every exec the core performs is the runner, never a staged or stored plugin."""
    code = textwrap.dedent(f"""
        import json, os, sys, time
        execs = []
        def hook(event, args):
            if event in ("os.exec", "os.posix_spawn", "subprocess.Popen"):
                execs.append([event, os.getpid(), [str(a) for a in (args[1] if len(args) > 1 else [])]])
        sys.addaudithook(hook)
        from plugcell.core.session import AttachOptions, attach, detach
        opts = AttachOptions(guest_pid={live_guest.init_pid}, guest_rootfs={live_guest.rootfs!r},
                             backend="file:{tmp_path}/out", base_dir={BASE_DIR!r},
                             cgroup_parent={CG_PARENT!r}, manifest={TWO!r})
        s = attach({live_guest.ident!r}, opts)
        time.sleep(2.5)
        stats = detach(s)
        print(json.dumps({{"execs": execs, "records": stats.records, "me": os.getpid()}}))
    """)
    res = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, timeout=120)
    out = json.loads(res.stdout.strip().splitlines()[-1])
    assert out["records"] > 0
    allowed = (["/sbin/ldconfig", "-p"], [sys.executable, "-m", "plugcell.runtime.stage"],
               ["/usr/bin/python3", "-m", "plugcell.runtime.stage"])
    for event, pid, argv in out["execs"]:
        # library lookup and the staging helper; plugin bytes are only ever run by the runner
        assert argv in [list(x) for x in allowed], (event, argv)


def _cli(*args, timeout=120):
    return subprocess.run([sys.executable, "-m", "plugcell.cli", *args], capture_output=True, text=True,
                          timeout=timeout)


def test_cli_attach_detach(live_guest, tmp_path):
    plugins = tmp_path / "plugins"
    plugins.write_bytes(TWO)
    before = full_snapshot(live_guest)
    proc = subprocess.Popen([sys.executable, "-m", "plugcell.cli", "attach", "--guest", live_guest.ident,
                             "--guest-pid", str(live_guest.init_pid), "--guest-rootfs", live_guest.rootfs,
                             "--plugins-file", str(plugins), "--backend", f"file:{tmp_path}/out",
                             "--base-dir", BASE_DIR, "--event-log", str(tmp_path / "ev")],
                            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    try:
        first = json.loads(proc.stdout.readline())
        assert first["phase"] == "COLLECTING"
        assert first["session"] in _cli("sessions", "--base-dir", BASE_DIR).stdout
        assert wait_for(lambda: backend_records(tmp_path, live_guest.ident), timeout=3)
        res = _cli("detach", first["session"], "--base-dir", BASE_DIR)
        assert res.returncode == 0, res.stderr
        assert json.loads(res.stdout)["detached_by"] == "supervisor"
        assert proc.wait(30) == 0
    finally:
        if proc.poll() is None:
            proc.kill()
            proc.wait()
    assert full_snapshot(live_guest) == before


def test_cli_invalid_policy_exit_code(live_guest, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(dumps(dataclasses.replace(default_policy(live_guest.target), seccomp=())))
    res = _cli("policy", "validate", str(bad))
    assert res.returncode == 2 and "seccomp" in res.stdout
    res = _cli("attach", "--guest", live_guest.ident, "--guest-pid", str(live_guest.init_pid),
               "--guest-rootfs", live_guest.rootfs, "--policy", str(bad), "--base-dir", BASE_DIR)
    assert res.returncode == 2


def test_cli_suite_equivalence():
    res = _cli("suite", "equivalence", "--guests", "1", timeout=300)
    out = json.loads(res.stdout.strip().splitlines()[-1])
    assert res.returncode == 0 and out["equal"] and out["diffs"] == []
