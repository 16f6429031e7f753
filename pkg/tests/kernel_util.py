"""Helpers for tests that build real sandboxes against fixture guests."""

import json
import os
import textwrap

from plugcell.harness.fixture import host_snapshot
from plugcell.policy import default_policy
from plugcell.runtime import firewall
from plugcell.runtime.sandbox import create_sandbox, exec_runner, teardown

BASE_DIR = "/run/plugcell-test"
CG_PARENT = "plugcell-test"
PY = "/usr/bin/python3"


def build(guest, policy=None, **kw):
    kw.setdefault("base_dir", BASE_DIR)
    kw.setdefault("cgroup_parent", CG_PARENT)
    return create_sandbox(guest.target, policy or default_policy(guest.target), **kw)


def destroy(h):
    return teardown(h, base_dir=BASE_DIR)


def runner_log(h):
    try:
        with open(os.path.join(h.comm_dir, "runner.log")) as f:
            return f.read()
    except OSError:
        return ""


def run_probe(h, code, timeout=60, env=None):
    """Exec ``code`` as the sandbox's process and return its last JSON line."""
    r = exec_runner(h, [PY, "-c", textwrap.dedent(code)], env=env)
    r.wait(timeout)
    return last_json(runner_log(h))


def last_json(text):
    for line in reversed(text.splitlines()):
        line = line.strip()
        if line.startswith("{"):
            try:
                return json.loads(line)
            except ValueError:
                continue
    raise AssertionError(f"probe printed no JSON:\n{text[-2000:]}")


def probe(guest, code, policy=None, timeout=60, env=None, **kw):
    h = build(guest, policy, **kw)
    try:
        return run_probe(h, code, timeout, env)
    finally:
        destroy(h)


def full_snapshot(guest=None):
    """Host state plus the guest netns ruleset, where sandbox rules live."""
    snap = host_snapshot()
    if guest is not None and guest.init_pid:
        snap["guest_firewall"] = firewall.snapshot(guest.init_pid)
    return snap
