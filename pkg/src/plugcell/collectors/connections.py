"""``connection`` collector: the namespace's TCP/UDP tables, joined with the
socket inodes held by guest processes."""

import ipaddress
import re

from plugcell.collectors.common import guest_pids, plugin_main, record
from plugcell.collectors.open_files import fd_targets

TABLES = ("tcp", "tcp6", "udp", "udp6")
TCP_STATES = {
    "01": "ESTABLISHED", "02": "SYN_SENT", "03": "SYN_RECV", "04": "FIN_WAIT1",
    "05": "FIN_WAIT2", "06": "TIME_WAIT", "07": "CLOSE", "08": "CLOSE_WAIT",
    "09": "LAST_ACK", "0A": "LISTEN", "0B": "CLOSING", "0C": "NEW_SYN_RECV",
}
_SOCKET = re.compile(r"^socket:\[(\d+)\]$")


def decode_addr(text):
    """Decode a ``HEXADDR:HEXPORT`` pair from /proc/net/{tcp,udp}[6]."""
    addr, port = text.split(":")
    raw = bytes.fromhex(addr)
    # the kernel prints each 32-bit word in host (little-endian) order
    raw = b"".join(raw[i:i + 4][::-1] for i in range(0, len(raw), 4))
    return str(ipaddress.ip_address(raw)), int(port, 16)


def parse_table(text, proto):
    rows = []
    for line in text.splitlines()[1:]:
        parts = line.split()
        if len(parts) < 10:
            continue
        local, lport = decode_addr(parts[1])
        remote, rport = decode_addr(parts[2])
        state = TCP_STATES.get(parts[3], parts[3])
        if proto.startswith("udp"):
            state = "UNCONN" if parts[3] == "07" else state
        rows.append({
            "proto": proto, "local_addr": local, "local_port": lport,
            "remote_addr": remote, "remote_port": rport, "state": state,
            "inode": int(parts[9]),
        })
    return rows


def socket_owners(view):
    owners = {}
    for pid in guest_pids(view):
        try:
            targets = fd_targets(view.proc_root, pid)
        except OSError:
            continue
        for target in targets.values():
            m = _SOCKET.match(target)
            if m:
                owners.setdefault(int(m.group(1)), set()).add(pid)
    return owners


def collect_connections(view, args=None):
    owners = socket_owners(view)
    records = []
    for proto in TABLES:
        try:
            with open(f"{view.proc_root}/net/{proto}") as f:
                rows = parse_table(f.read(), proto)
        except FileNotFoundError:
            continue
        for row in rows:
            row["pids"] = sorted(owners.get(row["inode"], ())) if row["inode"] else []
            key = f"{proto}:{row['local_addr']}:{row['local_port']}->{row['remote_addr']}:{row['remote_port']}"
            records.append(record("connection", key, row))
    return records


def main():
    return plugin_main(collect_connections)


if __name__ == "__main__":
    raise SystemExit(main())
