"""Init process of a fixture guest container.

Started by FixtureGuest as root on the host.  Creates fresh pid/net/mnt/uts/ipc
namespaces, pivots into the fixture rootfs (host /usr and the plugcell
sources are bind-mounted read-only so guest services can run Python), keeps
only a Docker-like default capability set, starts the requested services and
then reaps children forever.
"""

import json
import os
import signal
import subprocess
import sys
import time

from plugcell.kernel import caps as capnames
from plugcell.kernel import libc

# Docker's default set, minus MKNOD (Docker keeps MKNOD but fences device
# access with the devices cgroup, which these fixtures do not configure)
GUEST_CAPS = (
    "CHOWN", "DAC_OVERRIDE", "FSETID", "FOWNER", "NET_RAW", "SETGID", "SETUID",
    "SETFCAP", "SETPCAP", "NET_BIND_SERVICE", "SYS_CHROOT", "KILL", "AUDIT_WRITE",
)
DEVICES = ("null", "zero", "full", "random", "urandom")


def _bind(src, dst, readonly=True, flags=0):
    libc.mount(src, dst, None, libc.MS_BIND | libc.MS_REC)
    if readonly:
        libc.mount(None, dst, None, libc.MS_REMOUNT | libc.MS_BIND | libc.MS_RDONLY
                   | libc.MS_NOSUID | libc.MS_NODEV | flags)


def setup_root(cfg):
    root = cfg["rootfs"]
    libc.mount(None, "/", None, libc.MS_REC | libc.MS_PRIVATE)
    libc.mount(root, root, None, libc.MS_BIND | libc.MS_REC)
    _bind("/usr", os.path.join(root, "usr"))
    _bind(cfg["code_dir"], os.path.join(root, "opt/plugcell"))
    libc.mount("proc", os.path.join(root, "proc"), "proc", libc.MS_NOSUID | libc.MS_NODEV | libc.MS_NOEXEC)
    libc.mount("guest-run", os.path.join(root, "run"), "tmpfs", libc.MS_NOSUID | libc.MS_NODEV, "mode=0755")
    dev = os.path.join(root, "dev")
    libc.mount("guest-dev", dev, "tmpfs", libc.MS_NOSUID | libc.MS_NOEXEC, "mode=0755,size=64k")
    for name in DEVICES:
        path = os.path.join(dev, name)
        open(path, "a").close()
        libc.mount(f"/dev/{name}", path, None, libc.MS_BIND)
    for ctrl, src in cfg["cgroups"].items():
        _bind(src, os.path.join(root, "sys/fs/cgroup", ctrl), flags=libc.MS_NOEXEC)
    os.chdir(root)
    os.makedirs(".oldroot", exist_ok=True)
    libc.pivot_root(".", ".oldroot")
    libc.umount(".oldroot", libc.MNT_DETACH)
    os.rmdir(".oldroot")
    os.chdir("/")
    libc.sethostname(cfg["hostname"])


def loopback_up():
    from pyroute2 import IPRoute

    with IPRoute() as ipr:
        ipr.link("set", index=ipr.link_lookup(ifname="lo")[0], state="up")


def reduce_caps(uid):
    keep = capnames.to_mask(GUEST_CAPS)
    for cap in range(capnames.last_cap() + 1):
        if not keep >> cap & 1:
            libc.capbset_drop(cap)
    if uid:
        os.setgroups([])
        os.setresgid(uid, uid, uid)
        os.setresuid(uid, uid, uid)
    else:
        libc.capset(keep, keep, keep)


def start_services(cfg):
    env = {"PATH": "/usr/local/bin:/usr/bin:/bin", "PYTHONPATH": "/opt/plugcell", "HOME": "/root"}
    procs = []
    for svc in cfg["services"]:
        procs.append(subprocess.Popen(
            [sys.executable, "-m", "plugcell.harness.guest_services", svc],
            env=env, stdin=subprocess.DEVNULL, stdout=subprocess.DEVNULL,
            stderr=subprocess.DEVNULL, cwd="/",
        ))
    return procs


def init_main(cfg, status_fd):
    setup_root(cfg)
    loopback_up()
    os.write(status_fd, b"mounted\n")
    # wait for the host to wire the network before starting services
    with open(0, "rb", closefd=False) as stdin:
        stdin.readline()
    reduce_caps(cfg["uid"])
    start_services(cfg)
    deadline = time.monotonic() + 10
    for svc in cfg["services"]:
        marker = f"/run/svc-{svc}.ready"
        while not os.path.exists(marker) and time.monotonic() < deadline:
            time.sleep(0.01)
    os.write(status_fd, b"ready\n")
    os.close(status_fd)
    signal.signal(signal.SIGTERM, lambda *_: os._exit(0))
    while True:
        try:
            os.wait()
        except ChildProcessError:
            time.sleep(1)


def main():
    cfg = json.loads(sys.stdin.readline())
    status_fd = cfg["status_fd"]
    for path in cfg["cgroup_procs"]:
        with open(path, "w") as f:
            f.write(str(os.getpid()))
    libc.unshare(libc.CLONE_NEWPID | libc.CLONE_NEWNET | libc.CLONE_NEWNS
                 | libc.CLONE_NEWUTS | libc.CLONE_NEWIPC)
    pid = os.fork()
    if pid == 0:
        try:
            init_main(cfg, status_fd)
        except Exception as e:  # noqa: BLE001 - reported to the host
            os.write(status_fd, f"error {type(e).__name__}: {e}\n".encode())
        os._exit(1)
    os.write(status_fd, f"pid {pid}\n".encode())
    os.close(status_fd)
    _, status = os.waitpid(pid, 0)
    return os.waitstatus_to_exitcode(status)


if __name__ == "__main__":
    sys.exit(main())
