"""Sandbox build stages executed inside the new namespaces.

The builder starts this module as a root process (stage 1).  Stage 1 joins
the guest's net and pid namespaces (or creates private ones), forks stage 2
into them and then stays outside the sandbox's resource cgroup, serving
bind requests if the policy allows any.  Stage 2 builds the private mount
tree, drops privileges, installs seccomp and finally execs the runner.

Both stages talk to the builder over two inherited pipes: JSON events go
out on the status pipe, one-line commands come in on the command pipe.
"""

import json
import os
import signal
import socket
import sys

from plugcell.kernel import caps as capnames
from plugcell.kernel import libc

DEVICES = ("null", "zero", "full", "random", "urandom")
RUNNER_CODE_MOUNT = "/opt/plugcell"


class StageError(Exception):
    def __init__(self, step, cause):
        super().__init__(f"{step}: {cause}")
        self.step = step
        self.cause = cause


def _emit(fd, **event):
    os.write(fd, (json.dumps(event) + "\n").encode())


def _readline(fd):
    buf = b""
    while not buf.endswith(b"\n"):
        chunk = os.read(fd, 1)
        if not chunk:
            raise EOFError("command pipe closed")
        buf += chunk
    return buf.decode().rstrip("\n")


# -- stage 2: mount tree ------------------------------------------------------

RO_FLAGS = libc.MS_RDONLY | libc.MS_NOSUID | libc.MS_NODEV


def _bind(src, dst, flags=0, readonly=True):
    libc.mount(src, dst, None, libc.MS_BIND)
    remount = libc.MS_REMOUNT | libc.MS_BIND | libc.MS_NOSUID | libc.MS_NODEV | flags
    if readonly:
        remount |= libc.MS_RDONLY
    libc.mount(None, dst, None, remount)


def _touch(path):
    with open(path, "a"):
        pass


def _write_etc(root, cfg):
    etc = os.path.join(root, "etc")
    os.makedirs(etc, exist_ok=True)
    uid = cfg["uid"]
    with open(os.path.join(etc, "passwd"), "w") as f:
        f.write("root:x:0:0:root:/nonexistent:/usr/sbin/nologin\n")
        f.write(f"plugcell:x:{uid}:{uid}:sandbox:/tmp:/usr/sbin/nologin\n")
    with open(os.path.join(etc, "group"), "w") as f:
        f.write(f"root:x:0:\nplugcell:x:{uid}:\n")
    with open(os.path.join(etc, "hosts"), "w") as f:
        f.write("127.0.0.1 localhost\n")
        for ip, name in cfg.get("hosts", []):
            f.write(f"{ip} {name}\n")
    with open(os.path.join(etc, "resolv.conf"), "w") as f:
        f.write("")
    with open(os.path.join(etc, "hostname"), "w") as f:
        f.write(cfg["hostname"] + "\n")


def build_mounts(cfg):
    root = cfg["root_dir"]
    libc.unshare(libc.CLONE_NEWNS | libc.CLONE_NEWIPC | libc.CLONE_NEWUTS)
    libc.mount(None, "/", None, libc.MS_REC | libc.MS_PRIVATE)
    libc.mount("plugcell", root, "tmpfs", libc.MS_NOSUID | libc.MS_NODEV, "mode=0755,size=4m")

    def sub(*parts):
        path = os.path.join(root, *parts)
        os.makedirs(path, exist_ok=True)
        return path

    _bind(cfg["rootfs"], sub("guest"), readonly=not cfg.get("rootfs_writable", False))
    for src, ctrl in cfg["cgroup_mounts"]:
        _bind(src, sub("guest-cgroup", ctrl), flags=libc.MS_NOEXEC)
    libc.mount("proc", sub("proc"), "proc", RO_FLAGS | libc.MS_NOEXEC)

    dev = sub("dev")
    libc.mount("plugcell-dev", dev, "tmpfs", libc.MS_NOSUID | libc.MS_NOEXEC, "mode=0755,size=64k")
    for name in DEVICES:
        _touch(os.path.join(dev, name))
        libc.mount(f"/dev/{name}", os.path.join(dev, name), None, libc.MS_BIND)
    os.symlink("/proc/self/fd", os.path.join(dev, "fd"))
    libc.mount(None, dev, None, libc.MS_REMOUNT | libc.MS_RDONLY | libc.MS_NOSUID | libc.MS_NOEXEC)

    _bind(cfg["comm_dir"], sub("comm"), flags=libc.MS_NOEXEC, readonly=False)
    _bind(cfg["staging_dir"], sub("staging"), readonly=False)
    libc.mount("plugcell-tmp", sub("tmp"), "tmpfs", libc.MS_NOSUID | libc.MS_NODEV,
               f"mode=1777,size={cfg['tmp_bytes']}")

    _bind("/usr", sub("usr"))
    for link in ("bin", "lib", "lib64", "sbin"):
        if os.path.islink(f"/{link}"):
            os.symlink(os.readlink(f"/{link}"), os.path.join(root, link))
    _bind(cfg["code_dir"], sub(RUNNER_CODE_MOUNT.lstrip("/")))
    _write_etc(root, cfg)

    os.chdir(root)
    os.mkdir(".oldroot")
    libc.pivot_root(".", ".oldroot")
    libc.umount(".oldroot", libc.MNT_DETACH)
    os.rmdir(".oldroot")
    os.chdir("/")
    libc.mount(None, "/", None, libc.MS_REMOUNT | RO_FLAGS)
    libc.sethostname(cfg["hostname"])


def drop_privileges(cfg):
    keep = capnames.to_mask(cfg["caps"])
    for cap in range(capnames.last_cap() + 1):
        if not keep >> cap & 1:
            libc.capbset_drop(cap)
    libc.set_keepcaps(True)
    os.setgroups([])
    os.setresgid(cfg["gid"], cfg["gid"], cfg["gid"])
    os.setresuid(cfg["uid"], cfg["uid"], cfg["uid"])
    libc.capset(keep, keep, keep)
    libc.set_keepcaps(False)
    for cap in range(64):
        if keep >> cap & 1:
            libc.ambient_raise(cap)


def stage2(cfg, status_fd, cmd_fd, broker_fd):
    os.set_inheritable(status_fd, False)
    os.set_inheritable(cmd_fd, False)
    libc.set_pdeathsig(signal.SIGKILL)
    step = "wait"
    try:
        if _readline(cmd_fd) != "go":
            raise StageError("cgroup", "builder aborted")
        step = "mounts"
        build_mounts(cfg)
        _emit(status_fd, event="mounts")
        if _readline(cmd_fd) != "go":
            raise StageError("firewall", "builder aborted")
        step = "capabilities"
        drop_privileges(cfg)
        # the uid change cleared the parent-death signal
        libc.set_pdeathsig(signal.SIGKILL)
        _emit(status_fd, event="capabilities")
        step = "no-new-privileges"
        libc.set_no_new_privs()
        _emit(status_fd, event="no-new-privileges")
        step = "seccomp"
        libc.seccomp_install(bytes.fromhex(cfg["seccomp"]))
        _emit(status_fd, event="seccomp")
        _emit(status_fd, event="ready")
        step = "exec"
        request = json.loads(_readline(cmd_fd))
    except EOFError:
        os._exit(1)
    except StageError as e:
        _emit(status_fd, event="error", step=e.step, cause=str(e.cause))
        os._exit(1)
    except Exception as e:  # noqa: BLE001 - reported to the builder
        _emit(status_fd, event="error", step=step, cause=f"{type(e).__name__}: {e}")
        os._exit(1)

    env = dict(request.get("env") or {})
    env.setdefault("PATH", "/usr/local/bin:/usr/bin:/bin")
    env.setdefault("PYTHONPATH", RUNNER_CODE_MOUNT)
    env.setdefault("HOME", "/tmp")
    if broker_fd is not None:
        os.set_inheritable(broker_fd, True)
        env["PLUGCELL_BIND_BROKER_FD"] = str(broker_fd)
    try:
        log_fd = os.open("/comm/runner.log", os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
        null_fd = os.open("/dev/null", os.O_RDONLY)
        os.dup2(null_fd, 0)
        os.dup2(log_fd, 1)
        os.dup2(log_fd, 2)
        os.chdir(request.get("cwd") or "/")
        os.execve(request["argv"][0], request["argv"], env)
    except Exception as e:  # noqa: BLE001
        _emit(status_fd, event="exec-failed", cause=f"{type(e).__name__}: {e}")
        os._exit(127)


# -- stage 1 ------------------------------------------------------------------

def _join_or_unshare(cfg):
    guest = cfg["guest_pid"]
    net_fd = os.open(f"/proc/{guest}/ns/net", os.O_RDONLY)
    pid_fd = os.open(f"/proc/{guest}/ns/pid", os.O_RDONLY)
    if cfg["share_net"]:
        libc.setns(net_fd, libc.CLONE_NEWNET)
    else:
        libc.unshare(libc.CLONE_NEWNET)
        _loopback_up()
    if cfg["share_pid"]:
        libc.setns(pid_fd, libc.CLONE_NEWPID)
    else:
        libc.unshare(libc.CLONE_NEWPID)
    os.close(net_fd)
    os.close(pid_fd)


def serve_bind_requests(sock, allowlist):
    """Hand out bound sockets for allowlisted ports over SCM_RIGHTS."""
    while True:
        try:
            data = sock.recv(512)
        except OSError:
            return
        if not data:
            return
        try:
            req = json.loads(data)
            port = int(req["port"])
            proto = req.get("proto", "tcp")
            host = req.get("host", "0.0.0.0")
            if port not in allowlist:
                raise PermissionError(f"port {port} not in allowlist")
            kind = socket.SOCK_STREAM if proto == "tcp" else socket.SOCK_DGRAM
            s = socket.socket(socket.AF_INET, kind)
            s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            s.bind((host, port))
            socket.send_fds(sock, [json.dumps({"ok": True}).encode()], [s.fileno()])
            s.close()
        except Exception as e:  # noqa: BLE001 - reported to the requester
            sock.send(json.dumps({"ok": False, "error": str(e)}).encode())


def stage1():
    cfg = json.loads(sys.stdin.readline())
    status_fd, cmd_fd = cfg["status_fd"], cfg["cmd_fd"]
    libc.set_name("plugcell-init")
    try:
        _join_or_unshare(cfg)
    except OSError as e:
        _emit(status_fd, event="error", step="namespaces", cause=str(e))
        return 1
    broker = child_end = None
    if cfg.get("bind_allowlist"):
        broker, child_end = socket.socketpair(socket.AF_UNIX, socket.SOCK_SEQPACKET)
    pid = os.fork()
    if pid == 0:
        if broker is not None:
            broker.close()
        try:
            stage2(cfg, status_fd, cmd_fd, child_end.detach() if child_end else None)
        finally:
            os._exit(1)
    if child_end is not None:
        child_end.close()
    _emit(status_fd, event="namespaces", runner_pid=pid)
    os.close(status_fd)
    os.close(cmd_fd)
    if broker is not None:
        serve_bind_requests(broker, set(cfg["bind_allowlist"]))
    _, status = os.waitpid(pid, 0)
    return os.waitstatus_to_exitcode(status)


def _loopback_up():
    from pyroute2 import IPRoute

    with IPRoute() as ipr:
        idx = ipr.link_lookup(ifname="lo")
        if idx:
            ipr.link("set", index=idx[0], state="up")


if __name__ == "__main__":
    sys.exit(stage1())
