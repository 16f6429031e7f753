"""``os`` collector: distribution and hostname, read under the guest root."""

from plugcell.collectors.common import error, plugin_main, record
from plugcell.errors import ChrootFailed
from plugcell.runner.cycle import enter_guest_root

FILES = ("/etc/os-release", "/etc/hostname")


def parse_os_release(text):
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#") or "=" not in line:
            continue
        key, _, value = line.partition("=")
        value = value.strip()
        if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
            value = value[1:-1]
        out[key.strip()] = value
    return out


def _read_files():
    # runs with the guest's filesystem as root
    out = {}
    for path in FILES:
        try:
            with open(path, "rb") as f:
                out[path] = f.read().decode(errors="replace")
        except OSError as e:
            out[path] = e
    return out


def collect_os(view, args=None):
    try:
        files = enter_guest_root(_read_files, root=view.root)
    except ChrootFailed as e:
        return [error("os", "chroot_failed", detail=str(e))]
    records = []
    for path, value in files.items():
        if isinstance(value, FileNotFoundError):
            records.append(error(path, "missing_file", path=path))
        elif isinstance(value, OSError):
            records.append(error(path, "unreadable", path=path, detail=value.strerror or str(value)))
    release = files["/etc/os-release"]
    if isinstance(release, str):
        fields = parse_os_release(release)
        hostname = files["/etc/hostname"]
        records.append(record("os", "os", {
            "os_id": fields.get("ID", ""),
            "version_id": fields.get("VERSION_ID", ""),
            "name": fields.get("NAME", ""),
            "pretty_name": fields.get("PRETTY_NAME", ""),
            "hostname": hostname.strip() if isinstance(hostname, str) else "",
        }))
    return records


def main():
    return plugin_main(collect_os)


if __name__ == "__main__":
    raise SystemExit(main())
