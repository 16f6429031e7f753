"""One collection cycle: run each staged plugin once and gather its records."""

import json
import logging
import os
import pickle
import signal
import subprocess
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from plugcell.errors import ChrootFailed
from plugcell.records import CollectionRecord, SchemaError, check_record, parse_ts, utc_now

log = logging.getLogger(__name__)

GUEST_ROOT = "/guest"
GUEST_CGROUP_ROOT = "/guest-cgroup"
MAX_PLUGIN_OUTPUT = 16 * 1024 * 1024
DEFAULT_FANOUT = 4


@dataclass(frozen=True)
class GuestView:
    """Where the guest's state is visible from the current context."""

    label: str = "guest"
    root: str = GUEST_ROOT
    cgroup_root: str = GUEST_CGROUP_ROOT
    extra_env: tuple = field(default=())

    def env(self):
        env = {
            "PATH": os.environ.get("PATH", "/usr/local/bin:/usr/bin:/bin"),
            "HOME": os.environ.get("HOME", "/tmp"),
            "PLUGCELL_GUEST_ROOT": self.root,
            "PLUGCELL_GUEST_CGROUP": self.cgroup_root,
            "PLUGCELL_LABEL": self.label,
        }
        if "PYTHONPATH" in os.environ:
            env["PYTHONPATH"] = os.environ["PYTHONPATH"]
        env.update(dict(self.extra_env))
        return env


def error_record(view, plugin, cycle, reason, **detail):
    return CollectionRecord(
        namespace_label=view.label, feature_type="error", feature_key=plugin,
        timestamp=utc_now(), cycle=cycle, payload={"reason": reason, **detail}, plugin=plugin,
    )


def _stamp(obj, view, plugin, cycle):
    if not isinstance(obj, dict):
        raise SchemaError("not_object", type(obj).__name__)
    rec = dict(obj)
    rec["namespace_label"] = view.label
    rec["plugin"] = plugin
    rec["cycle"] = cycle
    try:
        parse_ts(rec.get("timestamp"))
    except ValueError:
        rec["timestamp"] = utc_now()
    rec.setdefault("payload", {})
    return check_record(rec)


def parse_plugin_output(data, view, plugin, cycle):
    """Turn a plugin's stdout into records plus the first format problem seen."""
    records, bad, first = [], 0, None
    for line in data.splitlines():
        if not line.strip():
            continue
        try:
            records.append(_stamp(json.loads(line), view, plugin, cycle))
        except (ValueError, SchemaError) as e:
            bad += 1
            if first is None:
                first = getattr(e, "reason", "malformed") + (f": {e.detail}" if getattr(e, "detail", "") else "")
    return records, bad, first


class _Reader(threading.Thread):
    def __init__(self, stream, limit, pid):
        super().__init__(daemon=True)
        self.stream, self.limit, self.pid = stream, limit, pid
        self.chunks, self.size, self.overflow = [], 0, False

    def run(self):
        while True:
            chunk = self.stream.read1(65536) if hasattr(self.stream, "read1") else self.stream.read(65536)
            if not chunk:
                break
            if self.size + len(chunk) > self.limit:
                self.overflow = True
                # a blocked writer would otherwise sit out its whole timeout
                _killpg(self.pid)
                break
            self.chunks.append(chunk)
            self.size += len(chunk)

    @property
    def data(self):
        return b"".join(self.chunks)


def _killpg(pid):
    try:
        os.killpg(pid, signal.SIGKILL)
    except (ProcessLookupError, PermissionError):
        pass


def run_plugin(plugin, view, cycle, max_output=MAX_PLUGIN_OUTPUT):
    """Run one plugin to completion; never raises."""
    argv = [plugin.path, "--args-json", json.dumps(plugin.args_dict, sort_keys=True)]
    try:
        child = subprocess.Popen(
            argv, stdin=subprocess.DEVNULL, stdout=subprocess.PIPE, env=view.env(),
            cwd="/", start_new_session=True,
        )
    except OSError as e:
        return [error_record(view, plugin.name, cycle, "crash", detail=f"exec: {e}")]
    reader = _Reader(child.stdout, max_output, child.pid)
    reader.start()
    try:
        child.wait(timeout=plugin.timeout_s)
        timed_out = False
    except subprocess.TimeoutExpired:
        timed_out = True
    # the plugin's session must not outlive its run
    _killpg(child.pid)
    child.wait()
    reader.join(timeout=2)
    child.stdout.close()
    if timed_out:
        return [error_record(view, plugin.name, cycle, "timeout", timeout_s=plugin.timeout_s)]
    if reader.overflow:
        return [error_record(view, plugin.name, cycle, "oversize_output", limit=max_output)]
    if child.returncode != 0:
        detail = ({"signal": -child.returncode} if child.returncode < 0
                  else {"exit_code": child.returncode})
        return [error_record(view, plugin.name, cycle, "crash", **detail)]
    records, bad, first = parse_plugin_output(reader.data, view, plugin.name, cycle)
    if bad:
        records.append(error_record(view, plugin.name, cycle, "format", bad_lines=bad, detail=first))
    return records


def run_cycle(plugins, view, cycle=0, fanout=DEFAULT_FANOUT):
    """Run every plugin once, at most ``fanout`` at a time.

    Records come back grouped per plugin in the order ``plugins`` lists them.
    """
    plugins = list(plugins)
    if not plugins:
        return []
    with ThreadPoolExecutor(max_workers=max(1, min(fanout, len(plugins)))) as pool:
        results = list(pool.map(lambda p: run_plugin(p, view, cycle), plugins))
    return [r for group in results for r in group]


def enter_guest_root(action, *args, root=GUEST_ROOT):
    """Run ``action(*args)`` in a child whose filesystem root is the guest's.

    The runner itself never changes root.  When ``root`` already is ``/``
    (guest context) no chroot is needed and none is attempted.
    """
    if not os.path.isdir(root):
        raise ChrootFailed(f"guest root {root} is not a directory")
    r, w = os.pipe()
    pid = os.fork()
    if pid == 0:
        os.close(r)
        try:
            if not os.path.samefile(root, "/"):
                os.chroot(root)
            os.chdir("/")
        except OSError as e:
            result = ("chroot", str(e))
        else:
            try:
                result = ("ok", action(*args))
            except BaseException as e:  # noqa: BLE001 - shipped to the parent
                result = ("raise", e)
        try:
            data = pickle.dumps(result)
        except Exception as e:  # noqa: BLE001
            data = pickle.dumps(("raise", RuntimeError(repr(e))))
        with os.fdopen(w, "wb") as f:
            f.write(data)
        os._exit(0)
    os.close(w)
    with os.fdopen(r, "rb") as f:
        data = f.read()
    os.waitpid(pid, 0)
    if not data:
        raise ChrootFailed("guest-root helper died")
    kind, value = pickle.loads(data)
    if kind == "chroot":
        raise ChrootFailed(f"chroot({root}): {value}")
    if kind == "raise":
        raise value
    return value
