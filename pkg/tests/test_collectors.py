import dataclasses
import json
import subprocess
import sys
import textwrap
import pytest

from conftest import needs_kernel
from kernel_util import PY, build, destroy, runner_log
from plugcell.collectors.common import View, guest_pids
from plugcell.collectors.connections import decode_addr, parse_table
from plugcell.collectors.metrics import _parse
from plugcell.collectors.os_info import collect_os, parse_os_release
from plugcell.harness.fixture import FixtureGuest, GuestSpec
from plugcell.policy import CapabilitySet, default_policy
from plugcell.records import check_record
from plugcell.runtime.sandbox import exec_runner

TS = "2026-01-01T00:00:00Z"


# --- parsing, no kernel needed ----------------------------------------------

def test_parse_os_release():
    text = 'NAME="Debian GNU/Linux"\nID=debian\n# comment\nVERSION_ID="12"\nbogus\n'
    assert parse_os_release(text) == {"NAME": "Debian GNU/Linux", "ID": "debian", "VERSION_ID": "12"}


def test_decode_addr_v4_v6():
    assert decode_addr("0100007F:1F90") == ("127.0.0.1", 8080)
    assert decode_addr("00000000000000000000000001000000:0050") == ("::1", 80)


def test_parse_tcp_table():
    text = ("  sl  local_address rem_address   st tx_queue rx_queue tr tm->when retrnsmt   uid  timeout inode\n"
            "   0: 00000000:1F90 00000000:0000 0A 00000000:00000000 00:00000000 00000000     0        0 4242 1\n")
    (row,) = parse_table(text, "tcp")
    assert (row["local_addr"], row["local_port"], row["state"], row["inode"]) == ("0.0.0.0", 8080, "LISTEN", 4242)


def test_parse_blkio_and_memstat():
    assert _parse("blkio_total", "8:0 Read 10\n8:0 Write 5\n8:0 Total 15\nTotal 15\n") == 15
    assert _parse("memstat", "cache 4096\nrss 8192\ntotal_cache 4096\ntotal_rss 8192\n") == 12288


def test_guest_pids_by_memory_cgroup(tmp_path):
    layout = {1: "/g", 5: "/g/sub", 7: "/other", 9: "/g"}
    for pid, cg in layout.items():
        d = tmp_path / str(pid)
        d.mkdir()
        (d / "cgroup").write_text(f"11:pids:/x\n4:memory:{cg}\n1:name=systemd:/\n")
    (tmp_path / "self").mkdir()
    assert guest_pids(View(proc_root=str(tmp_path))) == [1, 5, 9]


def test_os_missing_files(tmp_path):
    recs = collect_os(View(root=str(tmp_path)))
    assert {(r["feature_type"], r["payload"]["reason"]) for r in recs} == {("error", "missing_file")}
    assert len(recs) == 2


def test_collectors_do_not_mutate(tmp_path):
    """Audit-hook trace of every collector run against a scratch rootfs."""
    root = tmp_path / "root"
    (root / "etc").mkdir(parents=True)
    (root / "etc" / "os-release").write_text("ID=debian\n")
    (root / "etc" / "hostname").write_text("h\n")
    code = textwrap.dedent(f"""
        import os, sys, json
        from plugcell.collectors import connections, metrics, open_files, os_info, processes
        from plugcell.collectors.common import View
        flagged = []
        MUTATING = {{"os.remove", "os.rename", "os.rmdir", "os.mkdir", "os.chmod", "os.chown", "os.kill",
                     "os.killpg", "os.truncate", "os.symlink", "os.link", "os.utime", "shutil.rmtree",
                     "os.setxattr", "os.removexattr"}}
        def hook(event, args):
            if event in MUTATING:
                flagged.append([event, repr(args)[:80]])
            elif event == "open" and len(args) >= 3 and not isinstance(args[0], int):
                path, mode, flags = args[:3]
                if (mode and any(c in str(mode) for c in "wax+")) or (flags or 0) & (os.O_WRONLY | os.O_RDWR | os.O_CREAT | os.O_TRUNC):
                    flagged.append(["open", str(path)])
        sys.addaudithook(hook)
        view = View(root={str(root)!r}, cgroup_root="/sys/fs/cgroup")
        n = 0
        for mod, fn in ((os_info, "collect_os"), (processes, "collect_processes"),
                        (open_files, "collect_open_files"), (connections, "collect_connections"),
                        (metrics, "collect_metrics")):
            n += len(getattr(mod, fn)(view))
        print(json.dumps({{"flagged": flagged, "records": n}}))
    """)
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True)
    res = json.loads(out.stdout.strip().splitlines()[-1])
    assert res["flagged"] == [] and res["records"] > 0


# --- against fixture guests ------------------------------------------------------

def sandbox_collect(guest, module, policy=None):
    h = build(guest, policy)
    try:
        exec_runner(h, [PY, "-m", f"plugcell.collectors.{module}"]).wait(60)
        out = []
        for line in runner_log(h).splitlines():
            if line.startswith("{"):
                out.append(json.loads(line))
        return out
    finally:
        destroy(h)


@needs_kernel
def test_os_through_sandbox(live_guest):
    (rec,) = sandbox_collect(live_guest, "os_info")
    assert rec["payload"]["os_id"] == "debian" and rec["payload"]["hostname"] == "fixture"


@needs_kernel
def test_os_empty_rootfs():
    with FixtureGuest(GuestSpec(name="empty", empty_rootfs=True)) as g:
        recs = sandbox_collect(g, "os_info")
    assert recs and all(r["payload"]["reason"] == "missing_file" for r in recs)


def _members(guest):
    # the host-side launcher sits in the guest cgroup but outside its pid namespace
    return sorted(set(guest.cgroup_pids()) & set(guest.guest_pids()))


@needs_kernel
def test_processes_exact_set():
    with FixtureGuest(GuestSpec(name="two", services=("sleeper",))) as g:
        before = _members(g)
        starts = {p: open(f"/proc/{p}/stat").read().split()[21] for p in before}
        recs = sandbox_collect(g, "processes")
        comms = sorted(r["payload"]["comm"] for r in recs)
        after = _members(g)
        starts_after = {p: open(f"/proc/{p}/stat").read().split()[21] for p in after}
    assert len(recs) == len(before) == 2
    assert "sleep" in comms
    # scanning never disturbed the guest
    assert after == before and starts_after == starts


@needs_kernel
def test_processes_exclude_runner(live_guest):
    recs = sandbox_collect(live_guest, "processes")
    assert not any("plugcell.collectors" in " ".join(r["payload"]["cmdline"]) for r in recs)
    assert len(recs) == len(_members(live_guest))


@needs_kernel
def test_open_files_holder_and_sockets(live_guest):
    recs = sandbox_collect(live_guest, "open_files")
    targets = [r["payload"]["target"] for r in recs if r["feature_type"] == "open_file"]
    assert "/tmp/data.log" in targets
    assert any(t.startswith("socket:[") for t in targets)


@needs_kernel
def test_open_files_need_sys_ptrace(live_guest):
    pol = default_policy(live_guest.target)
    pol = dataclasses.replace(pol, caps=CapabilitySet(pol.caps.caps - {"SYS_PTRACE"}))
    recs = sandbox_collect(live_guest, "open_files", policy=pol)
    assert recs and all(r["feature_type"] == "error" for r in recs)
    assert not [r for r in recs if r["feature_type"] == "open_file"]


@needs_kernel
def test_connections_listen_8080(live_guest):
    recs = sandbox_collect(live_guest, "connections")
    listen = [r for r in recs if r["payload"]["state"] == "LISTEN" and r["payload"]["local_port"] == 8080]
    assert len(listen) == 1 and listen[0]["payload"]["pids"]


@needs_kernel
def test_connections_none():
    with FixtureGuest(GuestSpec(name="quiet", services=("sleeper",))) as g:
        assert sandbox_collect(g, "connections") == []


def _metric(recs, name):
    return next(r["payload"]["value"] for r in recs if r["feature_key"] == name)


@needs_kernel
def test_metrics_idle_floor(live_guest):
    recs = sandbox_collect(live_guest, "metrics")
    assert _metric(recs, "memory_bytes") > 0 and _metric(recs, "pids_current") >= 1


@needs_kernel
def test_metrics_cpu_burn(live_guest):
    before = _metric(sandbox_collect(live_guest, "metrics"), "cpu_usage_ns")
    burn = "import time\nwhile time.process_time() < 2.0:\n    pass\nprint(time.process_time())\n"
    res = live_guest.run([PY, "-c", burn], capture_output=True, text=True)
    spent = float(res.stdout.strip())
    after = _metric(sandbox_collect(live_guest, "metrics"), "cpu_usage_ns")
    delta = (after - before) / 1e9
    assert abs(delta - 2.0) <= 0.4, (delta, spent)


GUESTS = (
    GuestSpec(name="eq-debian", services=("sleeper", "holder", "web")),
    GuestSpec(name="eq-alpine", os_id="alpine", os_version="3.19", hostname="alp", services=("holder", "victim")),
    GuestSpec(name="eq-ubuntu", os_id="ubuntu", os_version="22.04", hostname="ubu",
              services=("web", "vulnsvc", "sleeper")),
)


@needs_kernel
@pytest.mark.parametrize("spec", GUESTS, ids=lambda s: s.name)
def test_equivalence_and_schema(spec):
    from plugcell.harness.equivalence import compare_contexts

    with FixtureGuest(spec) as g:
        res = compare_contexts(g)
    assert res.diffs == []
    counts = res.per_collector()
    assert {"os", "procs", "open_files", "metrics"} <= set(counts)
    assert ("connections" in counts) == ("web" in spec.services)
    for r in res.sandbox_records:
        check_record({**r, "timestamp": TS})
