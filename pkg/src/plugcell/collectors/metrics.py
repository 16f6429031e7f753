"""``metric`` collector: resource usage counters from the guest's cgroups."""

import os

from plugcell.collectors.common import error, plugin_main, record

# metric name -> (controller, file, parser)
METRICS = {
    "cpu_usage_ns": ("cpuacct", "cpuacct.usage", "int"),
    # usage_in_bytes includes per-cpu pre-charges and moves without any
    # guest activity; rss + cache is exact
    "memory_bytes": ("memory", "memory.stat", "memstat"),
    "pids_current": ("pids", "pids.current", "int"),
    "blkio_bytes": ("blkio", "blkio.throttle.io_service_bytes", "blkio_total"),
}


def _parse(kind, text):
    if kind == "int":
        return int(text.strip())
    if kind == "memstat":
        stat = dict(line.split() for line in text.splitlines() if line.count(" ") == 1)
        return int(stat["total_rss"]) + int(stat["total_cache"])
    total = 0
    for line in text.splitlines():
        parts = line.split()
        if len(parts) == 2 and parts[0] == "Total":
            return int(parts[1])
        if len(parts) == 3 and parts[1] == "Total":
            total += int(parts[2])
    return total


def collect_metrics(view, args=None):
    records = []
    for name, (ctrl, fname, kind) in METRICS.items():
        cdir = os.path.join(view.cgroup_root, ctrl)
        if not os.path.isdir(cdir):
            records.append(error(name, "missing_controller", controller=ctrl))
            continue
        try:
            with open(os.path.join(cdir, fname)) as f:
                value = _parse(kind, f.read())
        except (OSError, ValueError, KeyError) as e:
            records.append(error(name, "unreadable", controller=ctrl, detail=str(e)))
            continue
        records.append(record("metric", name, {"name": name, "controller": ctrl, "value": value}))
    return records


def main():
    return plugin_main(collect_metrics)


if __name__ == "__main__":
    raise SystemExit(main())
