"""``open_file`` collector: dereferences /proc/<pid>/fd/* of guest processes."""

import os

from plugcell.collectors.common import error, guest_pids, plugin_main, record


def fd_targets(proc_root, pid):
    """{fd: target} for one process; raises OSError when access is denied."""
    base = f"{proc_root}/{pid}/fd"
    out = {}
    for name in os.listdir(base):
        try:
            out[int(name)] = os.readlink(f"{base}/{name}")
        except FileNotFoundError:
            continue
    return out


def collect_open_files(view, args=None):
    records = []
    for pid in guest_pids(view):
        try:
            targets = fd_targets(view.proc_root, pid)
        except FileNotFoundError:
            continue
        except PermissionError as e:
            records.append(error(f"{pid}", "permission", pid=pid, detail=e.strerror))
            continue
        for fd in sorted(targets):
            records.append(record("open_file", f"{pid}:{fd}",
                                  {"pid": pid, "fd": fd, "target": targets[fd]}))
    return records


def main():
    return plugin_main(collect_open_files)


if __name__ == "__main__":
    raise SystemExit(main())
