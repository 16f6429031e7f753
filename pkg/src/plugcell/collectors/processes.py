"""``process`` collector: one record per guest process, read from procfs."""

from plugcell.collectors.common import guest_pids, plugin_main, read_stat, record


def _uids(proc_root, pid):
    with open(f"{proc_root}/{pid}/status") as f:
        for line in f:
            if line.startswith("Uid:"):
                return [int(x) for x in line.split()[1:5]]
    return []


def _cmdline(proc_root, pid):
    with open(f"{proc_root}/{pid}/cmdline", "rb") as f:
        raw = f.read()
    return [a.decode(errors="replace") for a in raw.split(b"\0")[:-1]] if raw else []


def collect_processes(view, args=None):
    records = []
    for pid in guest_pids(view):
        try:
            comm, ppid, start = read_stat(view.proc_root, pid)
            payload = {
                "pid": pid, "ppid": ppid, "comm": comm, "start_time": start,
                "cmdline": _cmdline(view.proc_root, pid),
                "uids": _uids(view.proc_root, pid),
            }
        except (OSError, ValueError, IndexError):
            # the process exited mid-scan
            continue
        records.append(record("process", pid, payload))
    return records


def main():
    return plugin_main(collect_processes)


if __name__ == "__main__":
    raise SystemExit(main())
