"""Attachment sessions: one sandboxed plugin runner per guest.

``attach`` resolves the guest, builds and validates the policy, creates the
sandbox, runs the fetch window and starts a supervisor thread that validates
and forwards runner output.  ``detach`` stops and tears everything down.
"""

import enum
import json
import logging
import os
import signal
import socket
import sys
import threading
import time
import uuid
from dataclasses import dataclass, field, replace
from typing import Optional
from urllib.parse import urlsplit

from plugcell.core.emit import DEFAULT_RATE, Emitter, make_backend
from plugcell.core.validate import OutputValidator, is_record
from plugcell.errors import FetchDeadline, FetchFailed, PlugcellError, PolicyInvalid
from plugcell.guest import DockerAdapter, ExplicitAdapter, guest_alive, resolve_guest
from plugcell.policy import default_policy, loads, validate_policy
from plugcell.policy.model import Endpoint, LocalhostMode, PolicyOptions
from plugcell.runner.manifest import PluginManifest, parse_manifest
from plugcell.runtime import sandbox as sb

log = logging.getLogger(__name__)

GUEST_MANIFEST = ".plugcell/plugins-to-run"
DEFAULT_FETCH_DEADLINE_S = 60.0
DEFAULT_OUTPUT_CAP = 100 * 1024 * 1024
DEFAULT_BACKEND = "file:/var/lib/plugcell/records"


class Phase(str, enum.Enum):
    RESOLVING = "RESOLVING"
    FETCH_WINDOW = "FETCH_WINDOW"
    COLLECTING = "COLLECTING"
    STOPPED = "STOPPED"


_PHASE_ORDER = list(Phase)


@dataclass
class AttachOptions:
    guest_pid: Optional[int] = None
    guest_rootfs: Optional[str] = None
    engine_socket: str = "/var/run/docker.sock"
    plugins_file: Optional[str] = None
    manifest: Optional[bytes] = None
    policy_file: Optional[str] = None
    policy_opts: Optional[PolicyOptions] = None
    backend: str = DEFAULT_BACKEND
    localhost_mode: Optional[LocalhostMode] = None
    fetch_deadline_s: float = DEFAULT_FETCH_DEADLINE_S
    rate: float = DEFAULT_RATE
    output_cap: int = DEFAULT_OUTPUT_CAP
    base_dir: str = sb.DEFAULT_BASE_DIR
    cgroup_parent: str = sb.DEFAULT_CGROUP_PARENT
    event_log: Optional[str] = None
    runner_args: tuple = ()
    fail_at: Optional[str] = None
    poll_s: float = 0.05


@dataclass
class SessionStats:
    cycles: int = 0
    records: int = 0
    validation_failures: int = 0
    throttle_drops: int = 0
    rejections: dict = field(default_factory=dict)

    def to_dict(self):
        return dict(self.__dict__, rejections=dict(self.rejections))


class EventLog:
    """Machine-readable NDJSON event log; also mirrored to the logger."""

    def __init__(self, path=None):
        self.path = path
        self._lock = threading.Lock()

    def write(self, session, event, **fields):
        entry = {"time": time.time(), "session": session, "event": event, **fields}
        log.info("%s %s %s", session, event, json.dumps(fields, sort_keys=True, default=str))
        if not self.path:
            return
        with self._lock, open(self.path, "a") as f:
            f.write(json.dumps(entry, sort_keys=True, default=str) + "\n")


class AttachmentSession:
    def __init__(self, session_id, container_id, opts, events):
        self.id = session_id
        self.container_id = container_id
        self.opts = opts
        self.events = events
        self.guest = None
        self.policy = None
        self.sandbox = None
        self.runner = None
        self.channel = None
        self.phase = Phase.RESOLVING
        self.stats = SessionStats()
        self.validator = OutputValidator()
        self.emitter = None
        self.output_offset = 0
        self._partial = b""
        self._lock = threading.RLock()
        self._stop = threading.Event()
        self._thread = None
        self.stop_reason = ""

    # -- phase ---------------------------------------------------------------

    def advance(self, phase):
        with self._lock:
            if _PHASE_ORDER.index(phase) < _PHASE_ORDER.index(self.phase):
                raise ValueError(f"phase cannot go back from {self.phase.value} to {phase.value}")
            self.phase = phase
        self.events.write(self.id, "phase", phase=phase.value)
        self.persist()

    # -- persistence ---------------------------------------------------------

    @property
    def state_path(self):
        return session_path(self.opts.base_dir, self.id)

    def to_dict(self):
        return {
            "session": self.id, "container_id": self.container_id, "phase": self.phase.value,
            "supervisor_pid": os.getpid(),
            "guest": self.guest.to_dict() if self.guest else None,
            "sandbox": self.sandbox.to_dict() if self.sandbox else None,
            "stats": self.stats.to_dict(),
        }

    def persist(self):
        if self.phase is Phase.STOPPED:
            return
        os.makedirs(os.path.dirname(self.state_path), exist_ok=True)
        tmp = self.state_path + ".tmp"
        with open(tmp, "w") as f:
            json.dump(self.to_dict(), f, sort_keys=True)
        os.replace(tmp, self.state_path)

    # -- output pump ---------------------------------------------------------

    def pump(self):
        """Validate and forward whatever complete lines the runner added."""
        with self._lock:
            if self.channel is None:
                return 0
            try:
                data = self.channel.read_from("output.ndjson", self.output_offset)
            except (OSError, PlugcellError):
                return 0
            self.output_offset += len(data)
            data = self._partial + data
            lines = data.split(b"\n")
            self._partial = lines.pop()
            accepted = []
            for line in lines:
                if not line.strip():
                    continue
                result = self.validator.validate(line)
                if is_record(result):
                    accepted.append(result)
                    self.stats.cycles = max(self.stats.cycles, result.cycle + 1)
                else:
                    self.stats.validation_failures += 1
                    self.stats.rejections[result.reason] = self.stats.rejections.get(result.reason, 0) + 1
            if accepted:
                stats = self.emitter.emit(accepted)
                self.stats.records += len(accepted)
                self.stats.throttle_drops = stats.throttle_drops
            return len(lines)

    def _supervise(self):
        while not self._stop.wait(self.opts.poll_s):
            self.pump()
            if self.channel.size("output.ndjson") > self.opts.output_cap:
                self.events.write(self.id, "output-cap", limit=self.opts.output_cap)
                self.stop_reason = "output-cap"
                self._stop_runner()
                break
            if self.runner is not None and not self.runner.alive():
                self.pump()
                self.stop_reason = self.stop_reason or "runner-exited"
                self.events.write(self.id, "runner-exited", guest_alive=guest_alive(self.guest))
                break

    def _stop_runner(self, timeout=10.0):
        try:
            self.channel.send("stop")
        except PlugcellError:
            return
        if self.runner is not None and self.runner.wait(timeout) is None:
            log.warning("runner did not stop within %.0fs; it is killed at teardown", timeout)

    def start_supervisor(self):
        self._thread = threading.Thread(target=self._supervise, name=f"session-{self.id}", daemon=True)
        self._thread.start()

    @property
    def collecting(self):
        return self.phase is Phase.COLLECTING and self._thread is not None and self._thread.is_alive()


def session_path(base_dir, session_id):
    return os.path.join(base_dir, "sessions", f"{session_id}.json")


# -- attach ----------------------------------------------------------------------

def _engine(opts):
    if opts.guest_pid is not None:
        return ExplicitAdapter(opts.guest_pid, opts.guest_rootfs)
    return DockerAdapter(opts.engine_socket)


def _load_policy(opts, guest, ordinal):
    if opts.policy_file:
        with open(opts.policy_file) as f:
            policy = loads(f.read())
    else:
        popts = opts.policy_opts or PolicyOptions()
        popts = replace(popts, ordinal=ordinal)
        if opts.localhost_mode is not None:
            popts = replace(popts, localhost_mode=opts.localhost_mode)
        policy = default_policy(guest, popts)
    report = validate_policy(policy)
    if not report.ok:
        raise PolicyInvalid(report)
    return policy


def _load_manifest(opts, guest):
    in_guest = os.path.join(guest.rootfs_path, GUEST_MANIFEST)
    if os.path.isfile(in_guest):
        with open(in_guest, "rb") as f:
            return f.read(), "guest"
    if opts.manifest is not None:
        return opts.manifest, "inline"
    if opts.plugins_file:
        with open(opts.plugins_file, "rb") as f:
            return f.read(), "plugins-file"
    return b"", "none"


def fetch_endpoints(manifest):
    """Resolve the network sources of a manifest on the host.

    Returns (endpoints, hosts): firewall exceptions for the fetch window and
    name -> address pairs for the sandbox's /etc/hosts, since the sandbox
    cannot reach a resolver of its own.
    """
    endpoints, hosts = [], []
    for entry in manifest.entries:
        if not entry.source.startswith(("http://", "https://")):
            continue
        url = urlsplit(entry.source)
        port = url.port or (443 if url.scheme == "https" else 80)
        try:
            infos = socket.getaddrinfo(url.hostname, port, socket.AF_INET, socket.SOCK_STREAM)
        except socket.gaierror as e:
            raise FetchFailed(entry.name, f"cannot resolve {url.hostname}: {e}") from e
        addr = infos[0][4][0]
        endpoints.append(Endpoint(addr, port))
        if addr != url.hostname:
            hosts.append((addr, url.hostname))
    return sorted(set(endpoints), key=str), sorted(set(hosts))


def _runner_argv(session, opts):
    return [sys.executable, "-m", "plugcell.runner.main", "--label", session.container_id,
            "--fetch-timeout-s", str(opts.fetch_deadline_s), *opts.runner_args]


def _await_fetch(session, deadline):
    while time.monotonic() < deadline:
        events = session.channel.status_events()
        for ev in events:
            if ev.get("event") == "fetch-done":
                return ev
            if ev.get("event") in ("fetch-failed", "manifest-error"):
                raise FetchFailed(ev.get("name", "manifest"), ev.get("message", ev.get("code", "")))
        if not session.runner.alive():
            raise FetchFailed("runner", "runner exited during the fetch window")
        time.sleep(0.02)
    raise FetchDeadline(f"fetch window exceeded {session.opts.fetch_deadline_s}s")


def attach(container_id, opts=None):
    """Attach a sandboxed plugin runner to a guest; returns a COLLECTING session."""
    opts = opts or AttachOptions()
    events = EventLog(opts.event_log)
    session = AttachmentSession(uuid.uuid4().hex[:12], container_id, opts, events)
    events.write(session.id, "attach", container=container_id)
    session.guest = resolve_guest(container_id, _engine(opts))
    ordinal = sb.reserve_ordinal(opts.base_dir)
    try:
        session.policy = _load_policy(opts, session.guest, ordinal)
        raw, origin = _load_manifest(opts, session.guest)
        manifest = parse_manifest(raw) if raw else PluginManifest()
        events.write(session.id, "manifest", origin=origin, plugins=manifest.names())
        endpoints, hosts = fetch_endpoints(manifest)
        session.emitter = Emitter(make_backend(opts.backend, session.policy.backend_endpoint), rate=opts.rate)
    except BaseException:
        sb.release_ordinal(ordinal, opts.base_dir)
        raise

    try:
        session.sandbox = sb.create_sandbox(
            session.guest, session.policy, base_dir=opts.base_dir, cgroup_parent=opts.cgroup_parent,
            hosts=hosts, validate=False, fail_at=opts.fail_at, ordinal=ordinal,
        )
    except BaseException as e:
        sb.release_ordinal(ordinal, opts.base_dir)
        events.write(session.id, "build-failed", error=str(e))
        raise
    events.write(session.id, "sandbox", sandbox=session.sandbox.sandbox_id,
                 setup_ms=round(1000 * (session.sandbox.timings["ready"] - session.sandbox.timings["start"]), 1))
    try:
        session.channel = sb.open_comm_channel(session.sandbox)
        session.channel.write_manifest(raw)
        session.advance(Phase.FETCH_WINDOW)
        deadline = time.monotonic() + opts.fetch_deadline_s
        sb.open_fetch_window(session.sandbox, endpoints)
        try:
            session.runner = sb.exec_runner(session.sandbox, _runner_argv(session, opts))
            done = _await_fetch(session, deadline)
        finally:
            # the exception is revoked whatever the runner did or did not signal
            sb.close_fetch_window(session.sandbox)
        sb.seal_staging(session.sandbox)
        session.channel.send("fetch-closed")
        events.write(session.id, "fetch-closed", staged=done.get("staged", []))
        session.advance(Phase.COLLECTING)
        session.start_supervisor()
    except BaseException as e:
        events.write(session.id, "abort", error=str(e))
        detach(session)
        raise
    return session


# -- detach ----------------------------------------------------------------------

def detach(session, drain_timeout=10.0):
    """Stop the runner, drain its output and tear the sandbox down.  Idempotent."""
    with session._lock:
        if session.phase is Phase.STOPPED:
            return session.stats
    if session.sandbox is not None and session.channel is not None and session.runner is not None:
        if session.runner.alive():
            session._stop_runner(drain_timeout)
    session._stop.set()
    if session._thread is not None and session._thread is not threading.current_thread():
        session._thread.join(timeout=drain_timeout)
    if session.emitter is not None:
        session.pump()
        session.emitter.flush()
        session.stats.throttle_drops = session.emitter.stats.throttle_drops
    report = None
    if session.sandbox is not None:
        report = sb.teardown(session.sandbox, base_dir=session.opts.base_dir)
    with session._lock:
        session.phase = Phase.STOPPED
    try:
        os.unlink(session.state_path)
    except FileNotFoundError:
        pass
    session.events.write(session.id, "detach", stats=session.stats.to_dict(),
                         teardown=report.resources if report else {},
                         emit=session.emitter.stats.to_dict() if session.emitter else {})
    return session.stats


def detach_by_id(session_id, base_dir=sb.DEFAULT_BASE_DIR, timeout=30.0):
    """Detach a session owned by another process (the CLI's ``detach``).

    A live supervisor is asked to stop with SIGTERM.  If it is gone, the
    persisted sandbox handle is torn down directly.
    """
    path = session_path(base_dir, session_id)
    try:
        with open(path) as f:
            state = json.load(f)
    except FileNotFoundError:
        return None
    pid = state.get("supervisor_pid")
    if pid and pid != os.getpid() and _alive(pid):
        os.kill(pid, signal.SIGTERM)
        deadline = time.monotonic() + timeout
        while os.path.exists(path) and time.monotonic() < deadline:
            time.sleep(0.05)
        if not os.path.exists(path):
            return {"session": session_id, "detached_by": "supervisor"}
    report = None
    if state.get("sandbox"):
        handle = sb.SandboxHandle.from_dict(state["sandbox"])
        report = sb.teardown(handle, base_dir=base_dir)
    try:
        os.unlink(path)
    except FileNotFoundError:
        pass
    return {"session": session_id, "detached_by": "teardown",
            "teardown": report.resources if report else {}}


def _alive(pid):
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


def list_sessions(base_dir=sb.DEFAULT_BASE_DIR):
    d = os.path.join(base_dir, "sessions")
    try:
        names = sorted(os.listdir(d))
    except FileNotFoundError:
        return []
    return [n[:-5] for n in names if n.endswith(".json")]
