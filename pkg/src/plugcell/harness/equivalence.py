"""Run the reference collectors from inside a sandbox and from the guest's
own context against a frozen guest, and diff the records field by field."""

import json
import logging
import os
import subprocess
import time
from dataclasses import dataclass, field

from plugcell.harness.attacks import HarnessEnv
from plugcell.harness.fixture import GUEST_CGROUP_CONTROLLERS, wait_for
from plugcell.kernel.cgroups import SANDBOX_CONTROLLERS, CgroupSet
from plugcell.policy import default_policy
from plugcell.runtime.sandbox import create_sandbox, exec_runner, teardown

log = logging.getLogger(__name__)

DRIVER = ["/usr/bin/python3", "-m", "plugcell.harness.cycle_driver", "--cycles", "1", "--records",
          "--fanout", "1"]
VOLATILE = ("timestamp",)


@dataclass
class EquivalenceResult:
    guest: str
    sandbox_records: list
    guest_records: list
    diffs: list = field(default_factory=list)

    @property
    def equal(self):
        return not self.diffs

    def per_collector(self):
        out = {}
        for r in self.sandbox_records:
            out.setdefault(r.get("plugin", ""), 0)
            out[r.get("plugin", "")] += 1
        return out


def normalize(records):
    """Drop fields that legitimately differ between runs and sort."""
    out = [{k: v for k, v in r.items() if k not in VOLATILE} for r in records]
    return sorted(out, key=lambda r: json.dumps(r, sort_keys=True))


def _key(r):
    return (r.get("plugin", ""), r["feature_type"], r["feature_key"])


def field_diffs(a, b):
    """Field-level differences between two normalized record lists."""
    diffs = []
    ka = {}
    for r in a:
        ka.setdefault(_key(r), []).append(r)
    kb = {}
    for r in b:
        kb.setdefault(_key(r), []).append(r)
    for key in sorted(set(ka) | set(kb), key=str):
        ra, rb = ka.get(key, []), kb.get(key, [])
        if len(ra) != len(rb):
            diffs.append({"key": key, "field": "<count>", "sandbox": len(ra), "guest": len(rb)})
            continue
        for x, y in zip(ra, rb):
            for name in sorted(set(x) | set(y)):
                if name == "payload":
                    px, py = x.get(name, {}), y.get(name, {})
                    for sub in sorted(set(px) | set(py)):
                        if px.get(sub) != py.get(sub):
                            diffs.append({"key": key, "field": f"payload.{sub}",
                                          "sandbox": px.get(sub), "guest": py.get(sub)})
                elif x.get(name) != y.get(name):
                    diffs.append({"key": key, "field": name, "sandbox": x.get(name), "guest": y.get(name)})
    return diffs


def _result_records(text):
    for line in text.splitlines():
        if line.startswith("RESULT "):
            return json.loads(line[7:])["records"]
    raise RuntimeError(f"cycle driver printed no result: {text[-500:]!r}")


class _Frozen:
    def __init__(self, guest):
        self.state = os.path.join(guest.cg.path("freezer"), "freezer.state")

    def _set(self, value):
        with open(self.state, "w") as f:
            f.write(value)

    def _is(self, value):
        with open(self.state) as f:
            return f.read().strip() == value

    def __enter__(self):
        self._set("FROZEN")
        if not wait_for(lambda: self._is("FROZEN"), timeout=10):
            raise RuntimeError("guest did not freeze")
        return self

    def __exit__(self, *exc):
        self._set("THAWED")


def sandbox_records(guest, env, cell=None, policy=None, timeout=120.0):
    pol = policy or default_policy(guest.target)
    h = create_sandbox(guest.target, pol, base_dir=env.base_dir,
                       cgroup_parent=cell.relpath if cell else "plugcell")
    try:
        runner = exec_runner(h, DRIVER)
        runner.wait(timeout)
        with open(os.path.join(h.comm_dir, "runner.log")) as f:
            return _result_records(f.read())
    finally:
        teardown(h, base_dir=env.base_dir)


def guest_context_records(guest, scratch, timeout=120.0):
    argv = DRIVER + ["--guest-root", "/", "--guest-cgroup", "/sys/fs/cgroup"]
    res = guest.run(argv, uid=0, cgroup_dirs=list(scratch.dirs.values()), timeout=timeout,
                    stdout=subprocess.PIPE, stderr=subprocess.PIPE)
    return _result_records(res.stdout.decode(errors="replace"))


def compare_contexts(guest, env=None):
    """Collect once in each context with the guest frozen; returns the diff."""
    env = env or HarnessEnv()
    os.makedirs(env.base_dir, exist_ok=True)
    stamp = f"{os.getpid()}-{time.monotonic_ns()}"
    scratch = CgroupSet(f"{env.cell_parent}/oracle-{stamp}", controllers=GUEST_CGROUP_CONTROLLERS)
    cell = CgroupSet(f"{env.cell_parent}/eq-{stamp}", controllers=SANDBOX_CONTROLLERS)
    scratch.create()
    cell.create()
    try:
        with _Frozen(guest):
            in_sandbox = sandbox_records(guest, env, cell)
            in_guest = guest_context_records(guest, scratch)
    finally:
        for cg in (scratch, cell):
            cg.kill_all()
            cg.remove()
        cell.prune_parents()
    a, b = normalize(in_sandbox), normalize(in_guest)
    return EquivalenceResult(guest.ident, a, b, field_diffs(a, b))
