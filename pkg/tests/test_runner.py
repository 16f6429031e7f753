import ctypes
import hashlib
import json
import os
import sys
import textwrap
import time

import pytest

from plugcell.errors import ChrootFailed, DigestMismatch, DuplicateName, FetchFailed, ParseError
from plugcell.records import CollectionRecord
from plugcell.runner.cycle import GuestView, enter_guest_root, parse_plugin_output, run_cycle, run_plugin
from plugcell.runner.fetch import FetchPolicy, StagedPlugin, fetch_plugins
from plugcell.runner.manifest import parse_manifest
from plugcell.runner.schedule import FakeClock, schedule_loop

MS_RDONLY, MS_REMOUNT, MS_BIND = 1, 32, 4096


# --- manifest ---------------------------------------------------------------

def test_manifest_single_entry():
    m = parse_manifest(b'{"name":"procs","source":"store:procs","freq_s":5}\n')
    assert m.names() == ["procs"] and m.entries[0].freq_s == 5.0


def test_manifest_empty_and_comments():
    assert parse_manifest(b"").entries == ()
    assert parse_manifest(b"# nothing\n\n").entries == ()


def test_manifest_duplicate():
    line = b'{"name":"procs","source":"store:procs","freq_s":5}\n'
    with pytest.raises(DuplicateName):
        parse_manifest(line * 2)


@pytest.mark.parametrize("text", [
    b"{oops", b"[1]", b'{"name":"a","source":"s"}', b'{"name":"a","source":"s","freq_s":0}',
    b'{"name":"a/b","source":"s","freq_s":1}', b'{"name":"a","source":"s","freq_s":1,"x":1}',
    b'{"name":"a","source":"s","freq_s":1,"sha256":"abc"}', b"\xff\xfe",
    b'{"name":"a","source":"s","freq_s":1,"args":{"timeout_s":-1}}',
])
def test_manifest_rejects(text):
    with pytest.raises(ParseError):
        parse_manifest(text)


def test_manifest_round_trip():
    m = parse_manifest(b'{"name":"a","source":"store:os","freq_s":2,"args":{"k":1}}\n'
                       b'{"name":"b","source":"store:procs","freq_s":0.5}\n')
    assert parse_manifest(m.to_bytes()) == m


# --- fetch ---------------------------------------------------------------

def test_fetch_store_records_digest(tmp_path):
    m = parse_manifest(b'{"name":"procs","source":"store:procs","freq_s":5}')
    staged = fetch_plugins(m, FetchPolicy(staging_dir=str(tmp_path)))
    data = open(tmp_path / "procs", "rb").read()
    assert staged[0].digest == hashlib.sha256(data).hexdigest()
    assert os.access(tmp_path / "procs", os.X_OK)


def test_fetch_digest_mismatch_not_staged(tmp_path):
    m = parse_manifest(json.dumps({"name": "procs", "source": "store:procs", "freq_s": 5,
                                   "sha256": "0" * 64}).encode())
    with pytest.raises(DigestMismatch):
        fetch_plugins(m, FetchPolicy(staging_dir=str(tmp_path)))
    assert not os.path.exists(tmp_path / "procs")


def test_fetch_unreachable_url(tmp_path):
    m = parse_manifest(b'{"name":"x","source":"http://127.0.0.1:9/x","freq_s":1}')
    with pytest.raises(FetchFailed):
        fetch_plugins(m, FetchPolicy(staging_dir=str(tmp_path), timeout_s=2))


def test_fetch_bad_store_id(tmp_path):
    m = parse_manifest(b'{"name":"x","source":"store:../etc","freq_s":1}')
    with pytest.raises(FetchFailed):
        fetch_plugins(m, FetchPolicy(staging_dir=str(tmp_path)))


def test_fetch_seal_must_take(tmp_path):
    m = parse_manifest(b'{"name":"os","source":"store:os","freq_s":1}')
    with pytest.raises(FetchFailed):
        fetch_plugins(m, FetchPolicy(staging_dir=str(tmp_path), seal=lambda staged: None))


# --- cycle ---------------------------------------------------------------

def _plugin(tmp_path, name, body, timeout_s=10.0):
    path = tmp_path / name
    path.write_text(f"#!{sys.executable}\n" + textwrap.dedent(body))
    path.chmod(0o755)
    return StagedPlugin(name=name, path=str(path), digest="", timeout_s=timeout_s)


VIEW = GuestView(label="g", root="/", cgroup_root="/sys/fs/cgroup")


def test_three_records(tmp_path):
    p = _plugin(tmp_path, "three", """
        import json
        for i in range(3):
            print(json.dumps({"feature_type": "metric", "feature_key": str(i), "payload": {"v": i}}))
    """)
    recs = run_cycle([p], VIEW, cycle=7)
    assert [r.feature_key for r in recs] == ["0", "1", "2"]
    assert all(r.cycle == 7 and r.plugin == "three" and r.namespace_label == "g" for r in recs)


def test_timeout_kills_within_bound(tmp_path):
    p = _plugin(tmp_path, "sleepy", "import time\ntime.sleep(3600)\n", timeout_s=1.0)
    t0 = time.monotonic()
    recs = run_plugin(p, VIEW, 0)
    assert time.monotonic() - t0 < 2.0
    assert [(r.feature_type, r.payload["reason"]) for r in recs] == [("error", "timeout")]


def test_timeout_kills_grandchildren(tmp_path):
    marker = tmp_path / "pid"
    p = _plugin(tmp_path, "forker", f"""
        import os, time
        pid = os.fork()
        if pid == 0:
            time.sleep(3600)
        open({str(marker)!r}, "w").write(str(pid))
        time.sleep(3600)
    """, timeout_s=1.0)
    run_plugin(p, VIEW, 0)
    child = int(marker.read_text())
    deadline = time.monotonic() + 2
    while time.monotonic() < deadline and os.path.exists(f"/proc/{child}"):
        time.sleep(0.05)
    assert not os.path.exists(f"/proc/{child}") or open(f"/proc/{child}/stat").read().split()[2] == "Z"


def test_malformed_json_is_format_error(tmp_path):
    p = _plugin(tmp_path, "bad", """
        print('{"feature_type": "metric", "feature_key": "a", "payload": {}}')
        print("not json")
    """)
    recs = run_plugin(p, VIEW, 0)
    assert recs[0].feature_type == "metric"
    assert recs[-1].feature_type == "error" and recs[-1].payload["reason"] == "format"


def test_crash_is_error(tmp_path):
    p = _plugin(tmp_path, "crash", "import sys\nsys.exit(3)\n")
    recs = run_plugin(p, VIEW, 0)
    assert recs[0].payload == {"reason": "crash", "exit_code": 3}


def test_oversize_output(tmp_path):
    p = _plugin(tmp_path, "chatty", "import sys\nsys.stdout.write('x' * 200000)\n")
    recs = run_plugin(p, VIEW, 0, max_output=1000)
    assert recs[0].payload["reason"] == "oversize_output"


def test_crash_soak_runner_survives(tmp_path):
    plugins = [
        _plugin(tmp_path, "ok", 'print(\'{"feature_type":"metric","feature_key":"k","payload":{}}\')\n'),
        _plugin(tmp_path, "segv", "import os, signal\nos.kill(os.getpid(), signal.SIGSEGV)\n"),
        _plugin(tmp_path, "garbage", "import sys\nsys.stdout.buffer.write(bytes(range(256)) * 10)\n"),
        _plugin(tmp_path, "abort", "import os\nos.abort()\n"),
    ]
    for cycle in range(25):
        recs = run_cycle(plugins, VIEW, cycle=cycle)
        by = {r.plugin: r for r in recs}
        assert by["ok"].feature_type == "metric"
        assert by["segv"].payload == {"reason": "crash", "signal": 11}
        assert by["garbage"].payload["reason"] == "format"
        assert by["abort"].payload["reason"] == "crash"


def test_parse_output_overrides_identity():
    view = GuestView(label="real")
    data = b'{"feature_type":"os","feature_key":"x","payload":{},"namespace_label":"forged","cycle":99}\n'
    recs, bad, _ = parse_plugin_output(data, view, "p", 3)
    assert bad == 0 and recs[0].namespace_label == "real" and recs[0].cycle == 3


# --- schedule ------------------------------------------------------------

def _loop(plugins, stop_at):
    clock = FakeClock()
    calls = []

    def runner(batch, view, cycle, fanout=4):
        calls.append((clock.now(), [p.name for p in batch]))
        return [CollectionRecord("g", "metric", p.name, "2026-01-01T00:00:00Z", cycle) for p in batch]

    def control():
        return ["stop"] if clock.now() >= stop_at else []

    stats = schedule_loop(plugins, VIEW, clock, control, lambda recs: None, runner=runner)
    return stats, calls


def _sp(name, freq):
    return StagedPlugin(name=name, path="/bin/true", digest="", freq_s=freq)


def test_schedule_one_hz_five_seconds():
    stats, _ = _loop([_sp("a", 1.0)], 5.0)
    assert stats.runs == {"a": 5}


def test_schedule_two_frequencies():
    stats, calls = _loop([_sp("fast", 1.0), _sp("slow", 3.0)], 6.0)
    assert stats.runs == {"fast": 6, "slow": 2}
    assert [t for t, names in calls if "slow" in names] == [0.0, 3.0]


def test_stop_during_cycle_completes_it():
    clock = FakeClock()
    emitted, verbs = [], []

    def runner(batch, view, cycle, fanout=4):
        verbs.append("stop")  # arrives while the cycle is in flight
        return [CollectionRecord("g", "metric", "k", "2026-01-01T00:00:00Z", cycle)]

    def control():
        out, verbs[:] = list(verbs), []
        return out

    stats = schedule_loop([_sp("a", 1.0)], VIEW, clock, control, emitted.extend, runner=runner)
    assert stats.stopped_by == "stop" and stats.cycles == 1 and len(emitted) == 1


def test_run_once_forces_cycle():
    clock = FakeClock()
    seq = iter([[], ["run-once"], ["stop"]])
    calls = []

    def runner(batch, view, cycle, fanout=4):
        calls.append(clock.now())
        return []

    stats = schedule_loop([_sp("a", 100.0)], VIEW, clock, lambda: next(seq), lambda r: None, runner=runner)
    assert calls == [0.0, 0.0] and stats.runs == {"a": 2}


# --- enter_guest_root --------------------------------------------------------

needs_root = pytest.mark.skipif(os.geteuid() != 0, reason="needs root for chroot and mounts")


@needs_root
def test_reads_guest_hostname(tmp_path):
    (tmp_path / "etc").mkdir()
    (tmp_path / "etc" / "hostname").write_bytes(b"guest-7\n")
    got = enter_guest_root(lambda: open("/etc/hostname", "rb").read(), root=str(tmp_path))
    assert got == (tmp_path / "etc" / "hostname").read_bytes()


def _mount(src, dst, flags):
    libc = ctypes.CDLL(None, use_errno=True)
    if libc.mount(src.encode(), dst.encode(), None, flags, None) != 0:
        raise OSError(ctypes.get_errno(), "mount")


@needs_root
def test_write_under_guest_root_is_read_only(tmp_path):
    src, dst = tmp_path / "src", tmp_path / "ro"
    src.mkdir()
    dst.mkdir()
    _mount(str(src), str(dst), MS_BIND)
    try:
        _mount(str(src), str(dst), MS_BIND | MS_REMOUNT | MS_RDONLY)

        def write():
            with open("/planted", "w") as f:
                f.write("x")

        with pytest.raises(OSError) as ei:
            enter_guest_root(write, root=str(dst))
        assert ei.value.errno == 30  # EROFS
        assert not (src / "planted").exists()
    finally:
        ctypes.CDLL(None).umount2(str(dst).encode(), 2)


def test_missing_guest_root():
    with pytest.raises(ChrootFailed):
        enter_guest_root(lambda: 1, root="/nonexistent/guest")


def test_root_slash_is_no_chroot():
    assert enter_guest_root(os.getcwd, root="/") == "/"
