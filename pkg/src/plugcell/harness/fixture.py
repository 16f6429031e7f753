"""Disposable fixture guests and the host-state snapshots used by probes."""

import hashlib
import json
import logging
import os
import shutil
import signal
import stat
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass

from plugcell.errors import FixtureSetupFailed
from plugcell.guest import ExplicitAdapter, resolve_guest
from plugcell.kernel import nft, proc
from plugcell.kernel.cgroups import CgroupSet, cgroup_tree_snapshot
from plugcell.kernel.nsexec import run_in_ns
from plugcell.runtime.sandbox import CODE_DIR

log = logging.getLogger(__name__)

HARNESS_PARENT = "plugcell-harness"
GUEST_CODE_DIR = "/opt/plugcell"
GUEST_CGROUP_CONTROLLERS = ("cpu", "cpuacct", "memory", "pids", "blkio", "freezer")


@dataclass(frozen=True)
class GuestSpec:
    name: str = "guest"
    os_id: str = "debian"
    os_version: str = "12"
    hostname: str = "fixture"
    uid: int = 0
    services: tuple = ("sleeper",)
    memory_bytes: int = 192 * 1024 * 1024
    pids_max: int = 128
    manifest: bytes = b""
    empty_rootfs: bool = False


def _write(path, data, mode=0o644):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "wb") as f:
        f.write(data if isinstance(data, bytes) else data.encode())
    os.chmod(path, mode)


def build_rootfs(root, spec):
    """Lay out a small rootfs.  Some guest data is world-writable on purpose:
    it stands in for the weakly-permissioned application state that the
    writable-rootfs ablation must expose."""
    os.makedirs(root, exist_ok=True)
    for d in ("usr", "proc", "dev", "run", "opt/plugcell", "root"):
        os.makedirs(os.path.join(root, d), exist_ok=True)
    for ctrl in ("cpu", "cpuacct", "memory", "pids", "blkio"):
        os.makedirs(os.path.join(root, "sys/fs/cgroup", ctrl), exist_ok=True)
    for link in ("bin", "lib", "lib64", "sbin"):
        os.symlink(f"usr/{link}", os.path.join(root, link))
    tmp = os.path.join(root, "tmp")
    os.makedirs(tmp)
    os.chmod(tmp, 0o1777)
    if spec.empty_rootfs:
        return
    _write(os.path.join(root, "etc/os-release"),
           f'PRETTY_NAME="Fixture {spec.os_id} {spec.os_version}"\nNAME="{spec.os_id}"\n'
           f'ID={spec.os_id}\nVERSION_ID="{spec.os_version}"\n')
    _write(os.path.join(root, "etc/hostname"), spec.hostname + "\n")
    _write(os.path.join(root, "etc/passwd"),
           "root:x:0:0:root:/root:/bin/sh\napp:x:1000:1000:app:/srv/app:/bin/sh\n")
    _write(os.path.join(root, "etc/group"), "root:x:0:\napp:x:1000:\n")
    _write(os.path.join(root, "etc/secret"), "db_password=hunter2\n", mode=0o600)
    _write(os.path.join(root, "etc/apt/sources.list"), "deb http://deb.example/ stable main\n")
    data = os.path.join(root, "srv/data")
    os.makedirs(data)
    os.chmod(data, 0o777)
    for i in range(8):
        _write(os.path.join(data, f"record-{i}.txt"), f"customer record {i}\n" * 20, mode=0o666)
    app = os.path.join(root, "srv/app")
    os.makedirs(app)
    os.chmod(app, 0o777)
    _write(os.path.join(app, "app.env"), "APP_MODE=production\n", mode=0o666)
    _write(os.path.join(root, "var/log/app.log"), "started\n")
    if spec.manifest:
        _write(os.path.join(root, ".plugcell/plugins-to-run"), spec.manifest)
    if spec.uid:
        for sub in ("tmp",):
            os.chown(os.path.join(root, sub), 0, 0)


def rootfs_hashes(root, skip=("proc", "dev", "run", "sys", "usr", "opt")):
    """Map relative path -> (mode, sha256) for every regular file and dir."""
    out = {}
    for dirpath, dirnames, filenames in os.walk(root):
        rel_dir = os.path.relpath(dirpath, root)
        if rel_dir == ".":
            dirnames[:] = [d for d in dirnames if d not in skip]
        for name in dirnames + filenames:
            path = os.path.join(dirpath, name)
            rel = os.path.normpath(os.path.join(rel_dir, name))
            st = os.lstat(path)
            if stat.S_ISREG(st.st_mode):
                with open(path, "rb") as f:
                    digest = hashlib.sha256(f.read()).hexdigest()
            elif stat.S_ISLNK(st.st_mode):
                digest = "link:" + os.readlink(path)
            else:
                digest = "dir"
            out[rel] = (st.st_mode, st.st_uid, digest)
    return out


class FixtureGuest:
    """A running fixture container.  Use as a context manager."""

    _counter = 0

    def __init__(self, spec=None, workdir=None, host_parent=HARNESS_PARENT, net_index=None):
        self.spec = spec or GuestSpec()
        FixtureGuest._counter += 1
        self.ident = f"{self.spec.name}-{os.getpid()}-{FixtureGuest._counter}"
        self._own_workdir = workdir is None
        self.workdir = workdir or tempfile.mkdtemp(prefix="plugcell-guest-")
        self.rootfs = os.path.join(self.workdir, "rootfs")
        self.host_parent = host_parent
        self.cg = CgroupSet(f"{host_parent}/{self.ident}", controllers=GUEST_CGROUP_CONTROLLERS)
        self.launcher = None
        self.init_pid = 0
        self.net_index = net_index if net_index is not None else (os.getpid() + FixtureGuest._counter) % 250 + 2
        self.host_ip = f"10.213.{self.net_index}.1"
        self.guest_ip = f"10.213.{self.net_index}.2"
        self.veth = f"pcg{self.net_index}h"
        self.target = None

    # -- lifecycle ----------------------------------------------------------

    def start(self):
        try:
            build_rootfs(self.rootfs, self.spec)
            self.cg.create()
            self._limit()
            self._launch()
            self._wire_network()
            self._go()
            self.target = resolve_guest(self.ident, ExplicitAdapter(self.init_pid, self.rootfs))
        except Exception as e:
            self.stop()
            if isinstance(e, FixtureSetupFailed):
                raise
            raise FixtureSetupFailed(f"fixture guest failed to start: {e}") from e
        return self

    def _limit(self):
        d = self.cg.dirs
        with open(os.path.join(d["memory"], "memory.limit_in_bytes"), "w") as f:
            f.write(str(self.spec.memory_bytes))
        with open(os.path.join(d["pids"], "pids.max"), "w") as f:
            f.write(str(self.spec.pids_max))

    def _launch(self):
        status_r, status_w = os.pipe()
        cfg = {
            "rootfs": self.rootfs, "code_dir": CODE_DIR, "hostname": self.spec.hostname,
            "uid": self.spec.uid, "services": list(self.spec.services),
            "cgroups": {c: self.cg.path(c) for c in ("cpu", "cpuacct", "memory", "pids", "blkio")},
            "cgroup_procs": [os.path.join(d, "cgroup.procs") for d in self.cg.dirs.values()],
            "status_fd": status_w,
        }
        self.launcher = subprocess.Popen(
            [sys.executable, "-m", "plugcell.harness.guest_init"],
            stdin=subprocess.PIPE, pass_fds=(status_w,), env=dict(os.environ, PYTHONPATH=CODE_DIR),
            stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL,
        )
        os.close(status_w)
        self._status = os.fdopen(status_r, "rb")
        self.launcher.stdin.write((json.dumps(cfg) + "\n").encode())
        self.launcher.stdin.flush()
        line = self._expect("pid")
        self.init_pid = int(line.split()[1])
        self._expect("mounted")

    def _expect(self, word):
        line = self._status.readline().decode().strip()
        if not line.startswith(word):
            raise FixtureSetupFailed(f"guest init: expected {word}, got {line or 'EOF'!r}")
        return line

    def _wire_network(self):
        from pyroute2 import IPRoute

        peer = f"pcg{self.net_index}g"
        with IPRoute() as ipr:
            for name in (self.veth, peer):
                for idx in ipr.link_lookup(ifname=name):
                    ipr.link("del", index=idx)
            ipr.link("add", ifname=self.veth, kind="veth", peer=peer)
            host_idx = ipr.link_lookup(ifname=self.veth)[0]
            ipr.addr("add", index=host_idx, address=self.host_ip, prefixlen=24)
            ipr.link("set", index=host_idx, state="up")
            peer_idx = ipr.link_lookup(ifname=peer)[0]
            ipr.link("set", index=peer_idx, net_ns_pid=self.init_pid)
        run_in_ns(self.init_pid, ["net"], _configure_guest_link, peer, self.guest_ip, self.host_ip)

    def _go(self):
        self.launcher.stdin.write(b"go\n")
        self.launcher.stdin.flush()
        self._expect("ready")

    def stop(self):
        if self.init_pid:
            try:
                os.kill(self.init_pid, signal.SIGKILL)
            except ProcessLookupError:
                pass
        if self.launcher is not None:
            try:
                self.launcher.wait(timeout=10)
            except subprocess.TimeoutExpired:
                self.launcher.kill()
                self.launcher.wait()
            if self.launcher.stdin:
                self.launcher.stdin.close()
            self.launcher = None
        if getattr(self, "_status", None):
            self._status.close()
            self._status = None
        self.cg.kill_all()
        self.cg.remove()
        self.cg.prune_parents()
        self._remove_veth()
        if self._own_workdir:
            shutil.rmtree(self.workdir, ignore_errors=True)
        self.init_pid = 0

    def _remove_veth(self):
        from pyroute2 import IPRoute

        try:
            with IPRoute() as ipr:
                for idx in ipr.link_lookup(ifname=self.veth):
                    ipr.link("del", index=idx)
        except Exception:  # noqa: BLE001 - already gone with the netns
            pass

    def kill(self):
        """Kill the guest without cleaning up (simulates a guest crash)."""
        os.kill(self.init_pid, signal.SIGKILL)
        if self.launcher is not None:
            self.launcher.wait(timeout=10)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    # -- guest-context execution ----------------------------------------------

    def exec_argv(self, argv, uid=None, cgroup_dirs=None):
        """nsexec command line running ``argv`` as a guest process.

        ``cgroup_dirs`` overrides the cgroups the process lands in; by default
        it joins the guest's own.
        """
        cmd = [sys.executable, "-m", "plugcell.kernel.nsexec", "--target", str(self.init_pid),
               "--match-caps"]
        dirs = self.cg.dirs.values() if cgroup_dirs is None else cgroup_dirs
        for d in dirs:
            cmd += ["--cgroup-procs", os.path.join(d, "cgroup.procs")]
        uid = self.spec.uid if uid is None else uid
        if uid:
            cmd += ["--uid", str(uid), "--gid", str(uid)]
        return cmd + ["--"] + list(argv)

    @staticmethod
    def _env(extra):
        # nsexec imports from CODE_DIR on the host; the exec'd command sees
        # the same tree at /opt/plugcell inside the guest
        env = dict(os.environ, PYTHONPATH=f"{CODE_DIR}:{GUEST_CODE_DIR}")
        env.update(extra or {})
        return env

    def run(self, argv, timeout=60, uid=None, env=None, cgroup_dirs=None, **kw):
        return subprocess.run(self.exec_argv(argv, uid, cgroup_dirs), timeout=timeout,
                              env=self._env(env), **kw)

    def popen(self, argv, uid=None, env=None, cgroup_dirs=None, **kw):
        return subprocess.Popen(self.exec_argv(argv, uid, cgroup_dirs), env=self._env(env), **kw)

    # -- observation ----------------------------------------------------------

    def path(self, rel):
        return os.path.join(self.rootfs, rel.lstrip("/"))

    def hashes(self):
        return rootfs_hashes(self.rootfs)

    def host_pid(self, guest_pid):
        """Translate a pid in the guest namespace to the host pid."""
        for pid in proc.pids_in_ns(self.target.pid_ns_id):
            try:
                chain = proc.ns_pid_chain(pid)
            except OSError:
                continue
            if chain[-1] == guest_pid:
                return pid
        return None

    def guest_pids(self):
        return proc.pids_in_ns(self.target.pid_ns_id)

    def cgroup_pids(self):
        return self.cg.all_pids()


def _configure_guest_link(ifname, address, gateway):
    from pyroute2 import IPRoute

    with IPRoute() as ipr:
        idx = ipr.link_lookup(ifname=ifname)[0]
        ipr.addr("add", index=idx, address=address, prefixlen=24)
        ipr.link("set", index=idx, state="up")
        ipr.route("add", dst="0.0.0.0/0", gateway=gateway)
    return True


def host_snapshot():
    """Host state that must be identical before and after any sandbox use."""
    return {
        "mounts": _mount_lines(),
        "cgroups": cgroup_tree_snapshot(),
        "firewall": nft.ruleset_snapshot(),
    }


def _mount_lines():
    # mount ids and peer-group numbers are opaque; compare what is mounted where
    out = []
    for line in proc.mount_table().splitlines():
        fields = line.split()
        sep = fields.index("-")
        out.append(" ".join([fields[4], fields[3], fields[5], *fields[sep + 1:sep + 3]]))
    return sorted(out)


def wait_for(predicate, timeout=5.0, interval=0.02):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(interval)
    return predicate()
