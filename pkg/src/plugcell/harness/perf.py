"""Overhead measurements: sandbox setup latency, per-cycle duration in the
guest versus in the sandbox, sandbox memory, and the effect of collection
on a guest CPU benchmark."""

import json
import logging
import os
import statistics
import subprocess
import time
from dataclasses import asdict, dataclass, field

from plugcell.harness.attacks import HarnessEnv, guest_benchmark
from plugcell.harness.fixture import GUEST_CGROUP_CONTROLLERS, FixtureGuest, GuestSpec
from plugcell.kernel.cgroups import SANDBOX_CONTROLLERS, CgroupSet, ensure_net_cls
from plugcell.policy import default_policy
from plugcell.runtime.sandbox import create_sandbox, exec_runner, teardown

log = logging.getLogger(__name__)

DRIVER = ["/usr/bin/python3", "-m", "plugcell.harness.cycle_driver"]
MIN_RUNS = 10


def distribution(samples):
    s = sorted(samples)
    if not s:
        return {"n": 0}
    p95 = s[min(len(s) - 1, int(round(0.95 * (len(s) - 1))))]
    return {"n": len(s), "median": statistics.median(s), "mean": statistics.fmean(s),
            "p95": p95, "min": s[0], "max": s[-1]}


@dataclass
class PerfReport:
    setup_latency_ms: dict
    cycle_ms_in_guest: dict
    cycle_ms_in_sandbox: dict
    cycle_ratio: float
    sandbox_mem_bytes: int
    guest_mem_bytes: int
    mem_ratio: float
    guest_benchmark_delta_pct: dict
    cycles: int
    pinned: bool
    cpus: int
    notes: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def _mem(cg):
    return int(cg.read("memory", "memory.usage_in_bytes"))


def _result_from(text):
    marker = text.find("RESULT ")
    if marker < 0:
        return None
    line = text[marker + 7:].split("\n", 1)[0]
    try:
        return json.loads(line)
    except ValueError:
        return None


def _cpus():
    return len(os.sched_getaffinity(0))


def _pin(cg, cpu):
    if "cpuset" in cg.dirs:
        with open(os.path.join(cg.path("cpuset"), "cpuset.cpus"), "w") as f:
            f.write(str(cpu))


class Workload:
    """The cycle driver running in one location; ``start`` returns once it
    is running, ``result`` waits for its report."""

    def __init__(self, guest, where, env, driver_args, cell):
        self.guest, self.where, self.env, self.args, self.cell = guest, where, env, driver_args, cell
        self.sandbox = None
        self.proc = None
        self.cg = None

    def start(self, pin_cpu=None):
        if self.where == "sandbox":
            pol = default_policy(self.guest.target)
            self.sandbox = create_sandbox(self.guest.target, pol, base_dir=self.env.base_dir,
                                          cgroup_parent=self.cell.relpath)
            self.cg = CgroupSet(self.sandbox.cgroup_path, controllers=SANDBOX_CONTROLLERS)
            if pin_cpu is not None:
                _pin(self.cg, pin_cpu)
            exec_runner(self.sandbox, DRIVER + self.args)
        else:
            # a child of the guest's own cgroups, so its memory can be read apart
            self.cg = CgroupSet(f"{self.guest.cg.relpath}/workload",
                                controllers=GUEST_CGROUP_CONTROLLERS + ("cpuset",))
            self.cg.create()
            if pin_cpu is not None:
                _pin(self.cg, pin_cpu)
            args = DRIVER + self.args + ["--guest-root", "/", "--guest-cgroup", "/sys/fs/cgroup"]
            self.proc = self.guest.popen(args, uid=0, cgroup_dirs=list(self.cg.dirs.values()),
                                         stdout=subprocess.PIPE, stderr=subprocess.DEVNULL)
        return self

    def _output(self):
        if self.sandbox is not None:
            try:
                with open(os.path.join(self.sandbox.comm_dir, "runner.log")) as f:
                    return f.read()
            except OSError:
                return ""
        return self._buf

    def result(self, timeout):
        """Wait for the driver's report (the driver then lingers)."""
        if self.proc is not None:
            self._buf = ""
            deadline = time.monotonic() + timeout
            while time.monotonic() < deadline:
                line = self.proc.stdout.readline().decode(errors="replace")
                if not line:
                    break
                self._buf += line
                if line.startswith("RESULT "):
                    break
            return _result_from(self._buf)
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            res = _result_from(self._output())
            if res is not None:
                return res
            time.sleep(0.2)
        return None

    def memory(self):
        return _mem(self.cg)

    def stop(self):
        if self.sandbox is not None:
            teardown(self.sandbox, base_dir=self.env.base_dir)
            self.sandbox = None
        if self.proc is not None:
            self.cg.kill_all()
            self.proc.kill()
            self.proc.wait()
            self.proc.stdout.close()
            self.proc = None
            self.cg.remove()


def _setup_latency(guest, env, cell, runs):
    pol = default_policy(guest.target)
    out = []
    for _ in range(runs):
        t0 = time.monotonic()
        h = create_sandbox(guest.target, pol, base_dir=env.base_dir, cgroup_parent=cell.relpath)
        out.append((time.monotonic() - t0) * 1000.0)
        teardown(h, base_dir=env.base_dir)
    return out


def _cycles_in(guest, env, cell, where, cycles, timeout):
    w = Workload(guest, where, env, ["--cycles", str(cycles), "--linger"], cell).start()
    try:
        res = w.result(timeout)
        if res is None:
            raise RuntimeError(f"cycle driver in {where} produced no result")
        return res["cycle_ms"], w.memory()
    finally:
        w.stop()


def _bench_series(guest, runs, secs):
    return [guest_benchmark(guest, secs) for _ in range(runs)]


def _benchmark_delta(guest, env, cell, runs, secs, pinned):
    # benchmark processes inherit the harness's affinity; collection gets
    # its own core through the cpuset of whichever cgroup it runs in
    work_cpu = 1 if pinned else None
    saved = os.sched_getaffinity(0)
    if pinned:
        os.sched_setaffinity(0, {0})
    try:
        return _benchmark_rounds(guest, env, cell, runs, secs, work_cpu)
    finally:
        os.sched_setaffinity(0, saved)


def _benchmark_rounds(guest, env, cell, runs, secs, work_cpu):
    # baseline samples bracket the loaded phases so slow drift cancels out
    baseline = _bench_series(guest, runs // 2, secs)
    series = {}
    for where in ("guest", "sandbox"):
        w = Workload(guest, where, env, ["--duration-s", str(runs * secs * 2 + 30)], cell)
        w.start(pin_cpu=work_cpu)
        try:
            time.sleep(1.0)
            s = _bench_series(guest, runs, secs)
        finally:
            w.stop()
        series[where] = s
    baseline += _bench_series(guest, runs - runs // 2, secs)
    series["baseline"] = baseline
    medians = {k: statistics.median(v) for k, v in series.items()}
    base = medians["baseline"] or 1
    delta = {k: 100.0 * (base - medians[k]) / base for k in ("guest", "sandbox")}
    return {"guest_pct": delta["guest"], "sandbox_pct": delta["sandbox"],
            "difference_pp": abs(delta["guest"] - delta["sandbox"]), "medians": medians,
            "samples": {k: len(v) for k, v in series.items()}}


def measure_perf(env=None, cycles=300, runs=MIN_RUNS, bench_secs=1.0, progress=None):
    """Run every measurement once against a fresh fixture guest."""
    env = env or HarnessEnv()
    runs = max(MIN_RUNS, runs)
    os.makedirs(env.base_dir, exist_ok=True)
    ensure_net_cls()
    say = progress or (lambda msg: log.info("%s", msg))
    cpus = _cpus()
    pinned = cpus >= 2
    notes = []
    if not pinned:
        notes.append(f"only {cpus} CPU available: collection and benchmark share a core")
    cell = CgroupSet(f"{env.cell_parent}/perf-{os.getpid()}", controllers=SANDBOX_CONTROLLERS)
    cell.create()
    guest = FixtureGuest(GuestSpec(name="perf", services=("holder", "sleeper", "web")),
                         host_parent=cell.relpath)
    try:
        guest.start()
        say("setup latency")
        setup = _setup_latency(guest, env, cell, runs)
        timeout = max(120.0, cycles * 5.0)
        say(f"{cycles} cycles in the guest")
        guest_ms, guest_mem = _cycles_in(guest, env, cell, "guest", cycles, timeout)
        say(f"{cycles} cycles in the sandbox")
        sandbox_ms, sandbox_mem = _cycles_in(guest, env, cell, "sandbox", cycles, timeout)
        say("guest benchmark")
        bench = _benchmark_delta(guest, env, cell, runs, bench_secs, pinned)
    finally:
        guest.stop()
        cell.kill_all()
        cell.remove()
        cell.prune_parents()
    g, s = distribution(guest_ms), distribution(sandbox_ms)
    return PerfReport(
        setup_latency_ms=distribution(setup),
        cycle_ms_in_guest=g,
        cycle_ms_in_sandbox=s,
        cycle_ratio=s["mean"] / g["mean"],
        sandbox_mem_bytes=sandbox_mem,
        guest_mem_bytes=guest_mem,
        mem_ratio=sandbox_mem / max(1, guest_mem),
        guest_benchmark_delta_pct=bench,
        cycles=cycles,
        pinned=pinned,
        cpus=cpus,
        notes=notes,
    )
